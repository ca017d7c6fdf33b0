"""R-precision and inception score, plus the evaluation report."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from . import ndcore as nd
from .errors import ConfigError
from .ndcore import ops

REPORT_SCHEMA = {
    "type": "object",
    "required": ["r_precision", "inception_score", "sample_count"],
    "properties": {
        "r_precision": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["R", "mean", "std", "folds"],
                "properties": {
                    "R": {"type": "integer", "minimum": 2},
                    "mean": {"type": "number", "minimum": 0, "maximum": 1},
                    "std": {"type": "number", "minimum": 0},
                    "folds": {"type": "integer", "minimum": 1},
                    "label": {"type": "string"},
                },
            },
        },
        "inception_score": {
            "type": ["object", "null"],
            "required": ["mean", "std", "splits", "classes"],
            "properties": {
                "mean": {"type": "number", "minimum": 1},
                "std": {"type": "number", "minimum": 0},
                "splits": {"type": "integer", "minimum": 1},
                "classes": {"type": "integer", "minimum": 1},
            },
        },
        "sample_count": {"type": "integer", "minimum": 0},
        "notes": {"type": "array", "items": {"type": "string"}},
    },
}


def r_precision(scores, true_index, R=100, folds=10, seed=0, exclude=None, full_pool=False):
    """Fraction of queries whose true candidate outranks R-1 distractors.

    scores: (N, P) where row i scores query i against every pool entry.
    true_index: (N,) column of the relevant entry per row. ``exclude`` is an
    optional (N, P) bool mask of entries that may not serve as distractors
    (e.g. duplicate captions). With ``full_pool`` every admissible entry is
    a distractor and nothing is sampled. A hit needs a strictly greater score.

    Returns (mean, std over folds).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n, pool = scores.shape
    true_index = np.asarray(true_index, dtype=np.int64)
    rng = np.random.default_rng(seed)
    hits = np.zeros(n, dtype=bool)
    for i in range(n):
        allowed = np.ones(pool, dtype=bool)
        allowed[true_index[i]] = False
        if exclude is not None:
            allowed &= ~np.asarray(exclude[i], dtype=bool)
        cand = np.flatnonzero(allowed)
        if not full_pool:
            if len(cand) < R - 1:
                raise ConfigError(f"distractor pool of {len(cand)} is smaller than R-1={R - 1}")
            cand = rng.choice(cand, R - 1, replace=False)
        hits[i] = len(cand) == 0 or scores[i, true_index[i]] > scores[i, cand].max()
    folds = max(1, min(folds, n))
    per_fold = [h.mean() for h in np.array_split(hits, folds)]
    return float(hits.mean()), float(np.std(per_fold))


def inception_score(probs, splits=10, eps=1e-12):
    """exp(E_x KL(p(y|x) || p(y))) per split; returns (mean, std) over splits.

    probs: (N, C) rows of class probabilities. ``0 log 0`` is taken as 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    if n < splits:
        raise ConfigError(f"{n} samples cannot fill {splits} splits")
    values = []
    for part in np.array_split(probs, splits):
        marginal = part.mean(axis=0, keepdims=True)
        ratio = np.where(part > 0, part / np.maximum(marginal, eps), 1.0)
        kl = np.sum(np.where(part > 0, part * np.log(ratio), 0.0), axis=1)
        values.append(float(np.exp(kl.mean())))
    return float(np.mean(values)), float(np.std(values))


def classify(images, classifier, batch=64):
    """(N, C) class probabilities for (N, 3, H, W) images."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    with nd.no_grad():
        for start in range(0, len(images), batch):
            out.append(ops.softmax(classifier(images[start:start + batch]), axis=-1).data)
    return np.concatenate(out).astype(np.float64)


def inception_score_images(images, classifier, splits=10):
    return inception_score(classify(images, classifier), splits)


class ShapeClassifier(nd.Module):
    """Small CNN over (color, shape) classes of the dominant object."""

    def __init__(self, classes, channels=(16, 32, 32), rng=None):
        rng = rng or nd.RngStream(7)
        self.classes = list(classes)
        chans = (3,) + tuple(channels)
        self.convs = [nd.Conv2d(a, b, 3, rng, stride=2, pad=1) for a, b in zip(chans[:-1], chans[1:])]
        self.out = nd.Linear(chans[-1], len(self.classes), rng)

    def __call__(self, images):
        x = nd.as_tensor(images)
        for conv in self.convs:
            x = ops.leaky_relu(conv(x), 0.2)
        return self.out(x.mean(axis=(2, 3)))


def shape_classes():
    from .data import COLORS, SHAPES
    return [f"{c} {s}" for c in COLORS for s in SHAPES]


def train_shape_classifier(n=2000, iterations=2000, batch=32, lr=3e-3, seed=7):
    """Fit the classifier on freshly synthesized scenes; labelled by the largest object."""
    from .data import synth_generate
    classes = shape_classes()
    ds = synth_generate(seed, n)
    labels = np.array([classes.index(" ".join(s.largest_class)) for s in ds.samples])
    images = ds.images()
    clf = ShapeClassifier(classes, rng=nd.RngStream(seed))
    opt = nd.Adam(clf.parameters(), lr=lr, betas=(0.9, 0.999))
    rng = np.random.default_rng(seed)
    for _ in range(iterations):
        idx = rng.choice(n, batch, replace=False)
        logp = ops.log_softmax(clf(images[idx]), axis=-1)
        loss = -(logp * np.eye(len(classes), dtype=np.float32)[labels[idx]]).sum() / batch
        opt.zero_grad()
        nd.backward(loss)
        opt.step()
    return clf


SHIPPED_CLASSIFIER = "shape_classifier.ndta"


def load_shape_classifier(path=None):
    """Shipped weights unless ``path`` is given; trains from scratch if neither exists."""
    clf = ShapeClassifier(shape_classes())
    if path is None:
        ref = resources.files(__package__).joinpath(SHIPPED_CLASSIFIER)
        if not ref.is_file():
            return train_shape_classifier()
        with resources.as_file(ref) as p:
            clf.load_state_dict(nd.archive.load(p))
        return clf
    clf.load_state_dict(nd.archive.load(path))
    return clf


@dataclass
class RPrecision:
    R: int
    mean: float
    std: float
    folds: int
    label: str = "generated"


@dataclass
class InceptionScore:
    mean: float
    std: float
    splits: int
    classes: int


@dataclass
class MetricsReport:
    r_precision: list = field(default_factory=list)
    inception_score: InceptionScore | None = None
    sample_count: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "r_precision": [asdict(r) for r in self.r_precision],
            "inception_score": None if self.inception_score is None else asdict(self.inception_score),
            "sample_count": int(self.sample_count),
            "notes": list(self.notes),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self):
        rows = [("metric", "value", "std")]
        for r in self.r_precision:
            rows.append((f"R-precision@{r.R} ({r.label})", f"{r.mean:.4f}", f"{r.std:.4f}"))
        if self.inception_score is not None:
            s = self.inception_score
            rows.append((f"inception score ({s.classes} classes)", f"{s.mean:.4f}", f"{s.std:.4f}"))
        rows.append(("samples", str(self.sample_count), ""))
        widths = [max(len(r[k]) for r in rows) for k in range(3)]
        lines = [f"{a:<{widths[0]}}  {b:>{widths[1]}}  {c:>{widths[2]}}".rstrip() for a, b, c in rows]
        return "\n".join(lines + [f"note: {n}" for n in self.notes]) + "\n"
