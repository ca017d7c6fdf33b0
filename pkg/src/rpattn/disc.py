"""Per-stage discriminators and the matching-aware adversarial losses.

Each stage has three heads on a downsampling conv stack ending at 4x4:
an unconditional head, a sentence-conditioned head, and a sentence+box head
whose stack also sees a box-occupancy channel. Heads emit one logit each.

Sub-batches: ``real`` (image, its sentence), ``fake`` (generated image,
sentence) and ``false`` (real image, a different sentence). The conditional
heads push real to 1 and fake/false to 0; the unconditional head only sees
images, so false samples count as real there.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .errors import BatchSizeError, ShapeError
from .gen import union_mask
from .ndcore import ops

GRID = 4


@dataclass
class Triple:
    images: nd.Tensor | np.ndarray   # (M, 3, R, R)
    sentence: nd.Tensor              # (M, D)
    boxes: np.ndarray                # (M, K_max, 4)
    valid: np.ndarray                # (M, K_max)

    @property
    def size(self):
        return self.sentence.shape[0]


@dataclass
class DiscBatch:
    real: Triple
    fake: Triple
    false: Triple

    def __post_init__(self):
        sizes = {self.real.size, self.fake.size, self.false.size}
        if len(sizes) != 1:
            raise BatchSizeError(f"sub-batches differ in size: {sorted(sizes)}")
        if self.real.size == 0:
            raise BatchSizeError("empty discriminator batch")


def mismatch_indices(captions):
    """For each i, the nearest later index (cyclically) whose caption differs."""
    m = len(captions)
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        for shift in range(1, m):
            j = (i + shift) % m
            if captions[j] != captions[i]:
                out[i] = j
                break
        else:
            raise BatchSizeError("no mismatched caption available for false samples")
    return out


def occupancy(boxes, valid, size):
    """(M, 1, size, size): 1 on pixels inside any valid box, else 0."""
    return union_mask(boxes, valid, size)


def _stack_depth(resolution):
    depth = int(round(math.log2(resolution / GRID)))
    if depth < 0 or GRID * 2 ** depth != resolution:
        raise ShapeError(f"resolution must be {GRID} times a power of two", (resolution,))
    return depth


class DownStack(nd.Module):
    def __init__(self, in_ch, width, depth, rng):
        chans = [in_ch] + [min(width * 2 ** i, 64) for i in range(max(depth, 1))]
        self.blocks = [nd.Conv2d(a, b, 3, rng, stride=2 if i < depth else 1)
                       for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))]

    @property
    def out_channels(self):
        return self.blocks[-1].weight.shape[0]

    def __call__(self, x):
        for conv in self.blocks:
            x = ops.leaky_relu(conv(x), 0.2)
        return x


class StageDiscriminator(nd.Module):
    def __init__(self, resolution, dim=32, width=8, cond_dim=16, rng=None):
        rng = rng or nd.RngStream(3)
        self.resolution = resolution
        depth = _stack_depth(resolution)
        self.shared = DownStack(3, width, depth, rng)
        self.boxed = DownStack(4, width, depth, rng)
        c = self.shared.out_channels
        self.compress = nd.Linear(dim, cond_dim, rng)
        self.uncond_out = nd.Conv2d(c, 1, GRID, rng, pad=0)
        self.text_join = nd.Conv2d(c + cond_dim, c, 3, rng)
        self.text_out = nd.Conv2d(c, 1, GRID, rng, pad=0)
        self.box_join = nd.Conv2d(c + cond_dim, c, 3, rng)
        self.box_out = nd.Conv2d(c, 1, GRID, rng, pad=0)

    def _check(self, images):
        images = nd.as_tensor(images)
        if images.ndim != 4 or images.shape[1:] != (3, self.resolution, self.resolution):
            raise ShapeError(f"discriminator expects (M, 3, {self.resolution}, {self.resolution})", images.shape)
        return images

    def _condition(self, feats, sentence, join, out):
        m = feats.shape[0]
        code = self.compress(sentence).reshape(m, -1, 1, 1)
        grid = code * nd.Tensor(np.ones((1, 1, GRID, GRID), dtype=feats.dtype))
        x = ops.leaky_relu(join(ops.concat([feats, grid], axis=1)), 0.2)
        return out(x).reshape(m)

    def uncond(self, images):
        images = self._check(images)
        return self.uncond_out(self.shared(images)).reshape(images.shape[0])

    def text(self, images, sentence):
        return self._condition(self.shared(self._check(images)), sentence, self.text_join, self.text_out)

    def text_box(self, images, sentence, boxes, valid):
        images = self._check(images)
        occ = nd.Tensor(occupancy(boxes, valid, self.resolution).astype(images.dtype))
        feats = self.boxed(ops.concat([images, occ], axis=1))
        return self._condition(feats, sentence, self.box_join, self.box_out)

    def heads(self, t: Triple):
        """(uncond, text, text_box) logits for one sub-batch, sharing the image stack."""
        images = self._check(t.images)
        feats = self.shared(images)
        m = images.shape[0]
        u = self.uncond_out(feats).reshape(m)
        s = self._condition(feats, t.sentence, self.text_join, self.text_out)
        b = self.text_box(images, t.sentence, t.boxes, t.valid)
        return u, s, b


def disc_uncond(images, params: StageDiscriminator):
    return params.uncond(images)


def disc_text(images, sentence, params: StageDiscriminator):
    return params.text(images, sentence)


def disc_text_box(images, sentence, boxes, valid, params: StageDiscriminator):
    return params.text_box(images, sentence, boxes, valid)


# targets per head for (real, fake, false)
_TARGETS = {"uncond": (1.0, 0.0, 1.0), "text": (1.0, 0.0, 0.0), "text_box": (1.0, 0.0, 0.0)}


def discriminator_loss(disc, batch: DiscBatch, return_logits=False):
    """Sum over heads and sub-batches of mean binary cross-entropy; fakes are detached.

    With ``return_logits`` also returns {(sub_batch, head): logits array}.
    """
    fake = Triple(nd.as_tensor(batch.fake.images).detach(), batch.fake.sentence, batch.fake.boxes, batch.fake.valid)
    total, logits = None, {}
    for k, (sub, t) in enumerate(zip(("real", "fake", "false"), (batch.real, fake, batch.false))):
        for name, logit in zip(_TARGETS, disc.heads(t)):
            logits[sub, name] = logit.data
            term = ops.bce_with_logits(logit, _TARGETS[name][k])
            total = term if total is None else total + term
    return (total, logits) if return_logits else total


def generator_adv_loss(disc, fake: Triple):
    """Non-saturating: -log D(fake) for all three heads."""
    total = None
    for logit in disc.heads(fake):
        term = ops.bce_with_logits(logit, 1.0)
        total = term if total is None else total + term
    return total


def stage_losses(disc, batch: DiscBatch, matching_loss=None, weight=5.0):
    """(d_loss, g_loss); ``matching_loss`` is the text-image loss on generated images, if any."""
    d_loss = discriminator_loss(disc, batch)
    g_loss = generator_adv_loss(disc, batch.fake)
    if matching_loss is not None:
        g_loss = g_loss + matching_loss * weight
    return d_loss, g_loss
