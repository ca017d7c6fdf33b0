"""Box-layout prediction from the sentence feature.

Two independent MLPs read the sentence feature: one emits ``K_max`` boxes
(sigmoid-squashed ``x, y, w, h``), the other a non-negative box count
(softplus). At inference the count is rounded and clamped to ``[0, K_max]``;
slots past it are invalid and are ignored by the coordinate loss.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .imgenc import BoxSet
from .ndcore import ops

POSITION_TERMS = ("left", "right", "on top of", "above", "below", "under", "next to", "behind", "in front of")


@dataclass
class BoxPrediction:
    coords: nd.Tensor   # (M, K_max, 4) in [0, 1]
    count: nd.Tensor    # (M,) >= 0

    def rounded_count(self):
        k_max = self.coords.shape[1]
        return np.clip(np.rint(self.count.data), 0, k_max).astype(np.int64)

    def boxsets(self):
        """Rounded-count predictions as BoxSets, with w/h clipped to stay in the unit square."""
        out = []
        for coords, n in zip(self.coords.data, self.rounded_count()):
            boxes = []
            for x, y, w, h in coords[:n]:
                x, y = min(float(x), 0.95), min(float(y), 0.95)
                boxes.append((x, y, max(min(float(w), 1 - x), 0.05), max(min(float(h), 1 - y), 0.05)))
            out.append(BoxSet.from_list(boxes, coords.shape[0]))
        return out


class MLP(nd.Module):
    """``depth`` affine layers; leaky ReLU between them."""

    def __init__(self, n_in, n_out, depth, hidden, rng):
        if depth < 1:
            raise ValueError("depth must be at least 1")
        sizes = [n_in] + [hidden] * (depth - 1) + [n_out]
        self.layers = [nd.Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.leaky_relu(x, 0.2)
        return x


class BoxPredictor(nd.Module):
    def __init__(self, dim=32, k_max=4, depth=1, hidden=64, rng=None):
        rng = rng or nd.RngStream(4)
        self.k_max = k_max
        self.depth = depth
        self.coord_net = MLP(dim, 4 * k_max, depth, hidden, rng)
        self.count_net = MLP(dim, 1, depth, hidden, rng)

    def predict_boxes(self, sentence):
        m = sentence.shape[0]
        return ops.sigmoid(self.coord_net(sentence)).reshape(m, self.k_max, 4)

    def predict_count(self, sentence):
        return ops.softplus(self.count_net(sentence)).reshape(sentence.shape[0])

    def __call__(self, sentence) -> BoxPrediction:
        sentence = nd.as_tensor(sentence)
        return BoxPrediction(self.predict_boxes(sentence), self.predict_count(sentence))


def sort_by_area(boxes, valid):
    """Valid boxes first, largest area first (stable); invalid slots stay zero."""
    boxes, valid = np.asarray(boxes), np.asarray(valid, dtype=bool)
    area = np.where(valid, boxes[..., 2] * boxes[..., 3], -1.0)
    order = np.argsort(-area, axis=-1, kind="stable")
    return np.take_along_axis(boxes, order[..., None], axis=-2), np.take_along_axis(valid, order, axis=-1)


def bbox_loss(pred: BoxPrediction, boxes, valid):
    """(coord_loss, count_loss) against area-sorted ground truth.

    coord_loss is the mean squared error over the first round(count) slots
    of each sample (pooled over the batch); count_loss is the mean squared
    count error.
    """
    truth, tvalid = sort_by_area(boxes, valid)
    n = pred.rounded_count()
    k_max = pred.coords.shape[1]
    keep = (np.arange(k_max)[None, :] < n[:, None]).astype(pred.coords.dtype)[..., None]
    n_terms = float(keep.sum() * 4)
    diff = (pred.coords - nd.Tensor(truth.astype(pred.coords.dtype))) * nd.Tensor(keep)
    coord_loss = (diff * diff).sum() * (1.0 / max(n_terms, 1.0))
    k = tvalid.sum(axis=1).astype(pred.count.dtype)
    count_loss = ((pred.count - nd.Tensor(k)) ** 2).mean()
    return coord_loss, count_loss


def position_word_filter(tokens, terms=POSITION_TERMS):
    """True if any (possibly multi-word) term occurs as a contiguous token run."""
    if hasattr(tokens, "words"):
        tokens = tokens.words
    tokens = [t.lower() for t in tokens]
    for term in terms:
        parts = term.lower().split()
        n = len(parts)
        if any(tokens[i:i + n] == parts for i in range(len(tokens) - n + 1)):
            return True
    return False


def prediction_json(pred: BoxPrediction):
    out = []
    for coords, count, n in zip(pred.coords.data, pred.count.data, pred.rounded_count()):
        out.append({"boxes": [dict(zip("xywh", map(float, b))) for b in coords[:n]], "count": float(count)})
    return out


def export_json(path, pred: BoxPrediction):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(prediction_json(pred), indent=2), encoding="utf-8")
