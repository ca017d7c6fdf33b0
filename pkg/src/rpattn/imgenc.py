"""Image encoder: regular-grid, true-grid (RoI) and global features.

Boxes are normalized ``(x, y, w, h)`` fractions of the image side. A box
covers feature cell ``c`` along an axis of ``n`` cells when the cell
``[c/n, (c+1)/n)`` overlaps the box with positive length, i.e. cells
``floor(x*n) .. ceil((x+w)*n) - 1``. The same rule drives RoI pooling and
every box mask in the package, so a valid box always covers at least one
cell at any resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .errors import ContractError, ShapeError
from .ndcore import ops

_EPS = 1e-6


@dataclass
class BoxSet:
    boxes: np.ndarray   # (K_max, 4) float32
    valid: np.ndarray   # (K_max,) bool

    @property
    def count(self):
        return int(self.valid.sum())

    @property
    def k_max(self):
        return self.boxes.shape[0]

    @classmethod
    def from_list(cls, boxes, k_max=4):
        boxes = list(boxes)
        if len(boxes) > k_max:
            raise ContractError(f"{len(boxes)} boxes exceed K_max={k_max}")
        arr = np.zeros((k_max, 4), dtype=np.float32)
        valid = np.zeros(k_max, dtype=bool)
        for i, b in enumerate(boxes):
            arr[i] = b
            valid[i] = True
        out = cls(arr, valid)
        out.validate()
        return out

    def validate(self):
        for i in range(self.k_max):
            if self.valid[i]:
                check_box(self.boxes[i])
            elif self.boxes[i].any():
                raise ContractError(f"invalid box slot {i} is not all-zero")
        return self

    def areas(self):
        return np.where(self.valid, self.boxes[:, 2] * self.boxes[:, 3], 0.0)

    def to_json(self):
        return [dict(zip("xywh", map(float, b))) for b, v in zip(self.boxes, self.valid) if v]


def stack_boxsets(sets):
    return np.stack([s.boxes for s in sets]), np.stack([s.valid for s in sets])


def check_box(box):
    x, y, w, h = (float(v) for v in box)
    if not (w > 0 and h > 0 and x >= -_EPS and y >= -_EPS and x + w <= 1 + _EPS and y + h <= 1 + _EPS):
        raise ContractError(f"box {tuple(box)} is not inside the unit square with positive size")


def cell_range(start, extent, n):
    """Half-open range of cells (out of ``n``) overlapped by ``[start, start+extent)``."""
    lo = int(math.floor(start * n + _EPS))
    hi = int(math.ceil((start + extent) * n - _EPS))
    lo = min(max(lo, 0), n - 1)
    hi = min(max(hi, lo + 1), n)
    return lo, hi


def box_mask(boxes, valid, height, width):
    """(K, H, W) float mask: 1 on cells covered by each valid box, else 0."""
    boxes = np.asarray(boxes)
    out = np.zeros((len(boxes), height, width), dtype=np.float32)
    for k, (b, v) in enumerate(zip(boxes, valid)):
        if not v:
            continue
        r0, r1 = cell_range(b[1], b[3], height)
        c0, c1 = cell_range(b[0], b[2], width)
        out[k, r0:r1, c0:c1] = 1.0
    return out


def _bins(lo, hi, out):
    """Split cells [lo, hi) into ``out`` sub-windows by integer division.

    A window that comes out empty falls back to the single cell holding the
    window's centre.
    """
    n = hi - lo
    res = []
    for i in range(out):
        a, b = (i * n) // out, ((i + 1) * n) // out
        if b > a:
            res.append((lo + a, lo + b))
        else:
            c = ((2 * i + 1) * n) // (2 * out)
            res.append((lo + c, lo + c + 1))
    return res


def roi_windows(box, height, width, out_hw):
    """Sub-window cell ranges ``[(r0, r1, c0, c1)]`` for one box, row-major."""
    check_box(box)
    x, y, w, h = (float(v) for v in box)
    rows = _bins(*cell_range(y, h, height), out_hw[0])
    cols = _bins(*cell_range(x, w, width), out_hw[1])
    return [(r0, r1, c0, c1) for r0, r1 in rows for c0, c1 in cols]


def _roi_argmax(fmap, box, out_hw):
    """Flat (row*W + col) index of the max cell per channel and sub-window: (C, Hr, Wr)."""
    c, height, width = fmap.shape
    idx = np.empty((c, out_hw[0] * out_hw[1]), dtype=np.int64)
    for k, (r0, r1, c0, c1) in enumerate(roi_windows(box, height, width, out_hw)):
        sub = fmap[:, r0:r1, c0:c1].reshape(c, -1)
        a = sub.argmax(axis=1)
        wn = c1 - c0
        idx[:, k] = (r0 + a // wn) * width + (c0 + a % wn)
    return idx.reshape(c, *out_hw)


def roi_pool_batch(fmaps, batch_idx, boxes, out_hw=(4, 4)):
    """Max-pool each box of its image's feature map to ``out_hw``.

    fmaps: (N, C, H, W) Tensor; batch_idx: (n,) image index per box;
    boxes: (n, 4). Returns (n, C, Hr, Wr); gradients flow to the argmax cells.
    """
    fmaps = nd.as_tensor(fmaps)
    n_img, c, height, width = fmaps.shape
    boxes = np.asarray(boxes)
    flat_idx = np.stack([_roi_argmax(fmaps.data[b], bx, out_hw) for b, bx in zip(batch_idx, boxes)]) \
        if len(boxes) else np.zeros((0, c, *out_hw), dtype=np.int64)
    flat = fmaps.reshape(n_img, c, height * width)
    bi = np.asarray(batch_idx, dtype=np.int64)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    return flat[bi, ci, flat_idx]


def roi_pool(fmap, box, out_hw=(4, 4)):
    """Single map (C, H, W) and one normalized box -> (C, Hr, Wr)."""
    fmap = nd.as_tensor(fmap)
    if fmap.ndim != 3:
        raise ShapeError("roi_pool expects a (C, H, W) map", fmap.shape)
    out = roi_pool_batch(fmap.reshape(1, *fmap.shape), [0], np.asarray(box, dtype=np.float64)[None], out_hw)
    return out[0]


@dataclass
class ImageFeatures:
    regular: nd.Tensor     # (M, J, D)
    global_: nd.Tensor     # (M, D)
    true_grid: nd.Tensor   # (M, K_max, D), zero rows where invalid
    box_valid: np.ndarray  # (M, K_max)

    def select(self, idx):
        idx = np.asarray(idx)
        return ImageFeatures(self.regular[idx], self.global_[idx], self.true_grid[idx], self.box_valid[idx])

    def detach(self):
        return ImageFeatures(self.regular.detach(), self.global_.detach(), self.true_grid.detach(), self.box_valid)


class Backbone(nd.Module):
    """Stride-2 3x3 conv blocks with leaky ReLU; each block halves H and W."""

    def __init__(self, channels=(16, 32, 32), rng=None, in_ch=3):
        rng = rng or nd.RngStream(0)
        chans = (in_ch,) + tuple(channels)
        self.blocks = [nd.Conv2d(a, b, 3, rng, stride=2, pad=1) for a, b in zip(chans[:-1], chans[1:])]

    @property
    def out_channels(self):
        return self.blocks[-1].weight.shape[0]

    def __call__(self, images):
        x = images
        for conv in self.blocks:
            x = ops.leaky_relu(conv(x), 0.2)
        return x


class ImageEncoder(nd.Module):
    def __init__(self, dim=32, image_size=64, channels=(16, 32, 32), roi_size=4, rng=None):
        rng = rng or nd.RngStream(1)
        self.image_size = image_size
        self.roi_size = roi_size
        self.backbone = Backbone(channels, rng)
        cf = self.backbone.out_channels
        self.region_proj = nd.Linear(cf, dim, rng)
        self.global_proj = nd.Linear(cf, dim, rng)
        self.roi_kernel = nd.param(rng.normal((dim, cf, roi_size, roi_size), 1.0 / np.sqrt(cf * roi_size ** 2)))
        self.roi_bias = nd.param(np.zeros(dim))

    @property
    def grid_size(self):
        return self.image_size // (2 ** len(self.backbone.blocks))

    def backbone_features(self, images):
        """-> (feature map (M, C_f, Hf, Wf), pooled (M, C_f))."""
        images = nd.as_tensor(images)
        if images.ndim != 4 or images.shape[1:] != (3, self.image_size, self.image_size):
            raise ShapeError(f"expected images (M, 3, {self.image_size}, {self.image_size})", images.shape)
        fmap = self.backbone(images)
        return fmap, fmap.mean(axis=(2, 3))

    def regular_grid_features(self, fmap):
        m, c, h, w = fmap.shape
        cells = fmap.reshape(m, c, h * w).transpose(0, 2, 1)
        return self.region_proj(cells)

    def global_feature(self, pooled):
        return self.global_proj(pooled)

    def true_grid_features(self, fmap, boxes, valid):
        """(M, K_max, D): RoI pool each valid box, then a kernel-sized conv to a D-vector."""
        m, k_max = valid.shape
        d = self.roi_kernel.shape[0]
        bi, ki = np.nonzero(valid)
        if len(bi) == 0:
            return nd.Tensor(np.zeros((m, k_max, d), dtype=fmap.dtype))
        pooled = roi_pool_batch(fmap, bi, boxes[bi, ki], (self.roi_size, self.roi_size))
        vecs = ops.conv2d(pooled, self.roi_kernel, self.roi_bias).reshape(len(bi), d)
        slot = np.full((m, k_max), 0, dtype=np.int64)
        slot[bi, ki] = np.arange(len(bi))
        zero = nd.Tensor(np.zeros((1, d), dtype=vecs.dtype))
        table = ops.concat([vecs, zero], axis=0)
        return table[np.where(valid, slot, len(bi))]

    def __call__(self, images, boxes, valid):
        fmap, pooled = self.backbone_features(images)
        return ImageFeatures(
            self.regular_grid_features(fmap),
            self.global_feature(pooled),
            self.true_grid_features(fmap, np.asarray(boxes), np.asarray(valid, dtype=bool)),
            np.asarray(valid, dtype=bool),
        )
