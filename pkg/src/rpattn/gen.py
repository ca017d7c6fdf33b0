"""Multi-stage generator with box-masked thumbnail and dual word/phrase attention.

Stage 1 turns the sentence feature, noise and the box layout into a hidden
map ``h_1``; each later stage attends from the previous hidden map to the
words (per pixel) and to the phrases (per box), averages the two context
matrices, and refines and upsamples. Every stage has its own RGB head.

Desk resolutions are 16, 32 and 64 pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .imgenc import box_mask, roi_pool_batch
from .ndcore import ops
from .textenc import TextEncoding

WORD, PHRASE = "WORD", "PHRASE"


@dataclass
class HiddenRep:
    h: nd.Tensor                 # (M, C, H, W)
    stage: int
    word_ctx: nd.Tensor | None = None
    phrase_ctx: nd.Tensor | None = None


@dataclass
class ContextMatrix:
    ctx: nd.Tensor               # (M, C, H, W)
    kind: str
    weights: nd.Tensor | None = None


def _act(x):
    return ops.leaky_relu(x, 0.2)


def up_block(conv, x):
    """x2 nearest upsampling, 3x3 conv, leaky ReLU."""
    return _act(conv(ops.upsample_nearest(x, 2)))


def union_mask(boxes, valid, size):
    """(M, 1, size, size) float mask of cells covered by any valid box."""
    boxes, valid = np.asarray(boxes), np.asarray(valid, dtype=bool)
    out = np.zeros((len(boxes), 1, size, size), dtype=np.float32)
    for i in range(len(boxes)):
        out[i, 0] = box_mask(boxes[i], valid[i], size, size).max(axis=0, initial=0.0)
    return out


def word_context_matrix(words, word_mask, h, proj):
    """Per-pixel attention over words.

    words (M, T, D) are projected to h's channels; for each of the H*W cells
    the weights are a softmax over words of ``h_j . e'_t`` and the context is
    the weighted sum of projected words. Returns ContextMatrix with the
    weights (M, H*W, T) attached.
    """
    m, c, hh, ww = h.shape
    ew = proj(words)
    cells = h.reshape(m, c, hh * ww).transpose(0, 2, 1)
    logits = ops.matmul(cells, ew.transpose(0, 2, 1))
    mask = np.broadcast_to(np.asarray(word_mask, bool)[:, None, :], logits.shape)
    phi = ops.softmax(logits, axis=-1, mask=mask)
    ctx = ops.matmul(phi, ew).transpose(0, 2, 1).reshape(m, c, hh, ww)
    return ContextMatrix(ctx, WORD, phi)


def phrase_context_matrix(phrases, phrase_mask, boxes, valid, h, proj, box_kernel):
    """Per-box attention over phrases, painted into the boxes.

    Each valid box is RoI-pooled from ``h`` and reduced to a C-vector by a
    kernel-sized conv. That vector attends (dot-product softmax) over the
    first ``min(T', K)`` projected phrases of its sentence, giving a context
    vector u_k. Pixels covered by several boxes take the mean of their u_k;
    pixels outside every box are exactly zero.
    """
    m, c, hh, ww = h.shape
    valid = np.asarray(valid, dtype=bool)
    boxes = np.asarray(boxes)
    n_phr = np.asarray(phrase_mask, bool).sum(axis=1)
    paired = np.minimum(n_phr, valid.sum(axis=1))
    bi, ki = np.nonzero(valid & (paired > 0)[:, None])
    zero = nd.Tensor(np.zeros((m, c, hh, ww), dtype=h.dtype))
    if len(bi) == 0:
        return ContextMatrix(zero, PHRASE)
    r = box_kernel.shape[-1]
    pooled = roi_pool_batch(h, bi, boxes[bi, ki], (r, r))
    bvec = ops.conv2d(pooled, box_kernel).reshape(len(bi), c, 1)
    pw = proj(phrases)[bi]                                   # (n, P, C)
    logits = ops.matmul(pw, bvec).reshape(len(bi), -1)
    pmask = np.arange(logits.shape[1])[None, :] < paired[bi][:, None]
    phi = ops.softmax(logits, axis=-1, mask=pmask)
    u = ops.matmul(phi.reshape(len(bi), 1, -1), pw).reshape(len(bi), c)

    slot = np.zeros(valid.shape, dtype=np.int64)
    slot[bi, ki] = np.arange(len(bi))
    live = np.zeros(valid.shape, dtype=bool)
    live[bi, ki] = True
    table = ops.concat([u, nd.Tensor(np.zeros((1, c), dtype=u.dtype))], axis=0)
    u_full = table[np.where(live, slot, len(bi))]            # (M, K, C)
    masks = np.stack([box_mask(boxes[i], live[i], hh, ww) for i in range(m)]).astype(h.dtype)
    total = ops.matmul(u_full.transpose(0, 2, 1), nd.Tensor(masks.reshape(m, -1, hh * ww)))
    count = np.maximum(masks.sum(axis=1), 1.0).reshape(m, 1, hh * ww)
    ctx = (total / nd.Tensor(count)).reshape(m, c, hh, ww)
    return ContextMatrix(ctx, PHRASE, phi)


class ResBlock(nd.Module):
    def __init__(self, channels, rng):
        self.conv1 = nd.Conv2d(channels, channels, 3, rng)
        self.conv2 = nd.Conv2d(channels, channels, 3, rng)

    def __call__(self, x):
        return x + self.conv2(_act(self.conv1(x)))


class Thumbnail(nd.Module):
    """Two-path first stage: global (conditioning + noise) and box-masked local.

    Both paths meet at a ``base x base`` grid and two upsampling blocks
    follow, so ``h_1`` is ``4 * base`` pixels wide.
    """

    def __init__(self, dim, z_dim, cond_dim, channels, base, rng):
        self.base = base
        self.channels = channels
        self.cond = nd.Linear(dim, cond_dim, rng)
        self.fc = nd.Linear(cond_dim + z_dim, channels * base * base, rng)
        self.local = nd.Conv2d(dim, channels, 3, rng)
        self.ups = [nd.Conv2d(2 * channels, channels, 3, rng), nd.Conv2d(channels, channels, 3, rng)]

    def masked_sentence(self, sentence, boxes, valid):
        """Sentence feature replicated over the grid and zeroed outside the boxes."""
        m, d = sentence.shape
        mask = nd.Tensor(union_mask(boxes, valid, self.base).astype(sentence.dtype))
        return sentence.reshape(m, d, 1, 1) * mask

    def __call__(self, sentence, z, boxes, valid):
        m = sentence.shape[0]
        f0 = self.cond(sentence)
        glob = _act(self.fc(ops.concat([f0, z], axis=1))).reshape(m, self.channels, self.base, self.base)
        loc = _act(self.local(self.masked_sentence(sentence, boxes, valid)))
        x = ops.concat([glob, loc], axis=1)
        for conv in self.ups:
            x = up_block(conv, x)
        return x


class SuperResStage(nd.Module):
    def __init__(self, dim, c_in, c_out, roi_size, rng, n_res=2):
        self.word_proj = nd.Linear(dim, c_in, rng, bias=False)
        self.phrase_proj = nd.Linear(dim, c_in, rng, bias=False)
        self.box_kernel = nd.param(rng.normal((c_in, c_in, roi_size, roi_size), 1.0 / np.sqrt(c_in * roi_size ** 2)))
        self.join = nd.Conv2d(2 * c_in, c_in, 3, rng)
        self.res = [ResBlock(c_in, rng) for _ in range(n_res)]
        self.up = nd.Conv2d(c_in, c_out, 3, rng)

    def contexts(self, h, text: TextEncoding, boxes, valid):
        wc = word_context_matrix(text.words, text.word_mask, h, self.word_proj)
        pc = phrase_context_matrix(text.phrases, text.phrase_mask, boxes, valid, h, self.phrase_proj, self.box_kernel)
        return wc, pc

    def __call__(self, prev: HiddenRep, text, boxes, valid):
        wc, pc = self.contexts(prev.h, text, boxes, valid)
        ctx = (wc.ctx + pc.ctx) * 0.5
        x = _act(self.join(ops.concat([prev.h, ctx], axis=1)))
        for block in self.res:
            x = block(x)
        return HiddenRep(up_block(self.up, x), prev.stage + 1, wc.ctx, pc.ctx)


def superres_stage(prev, text, boxes, valid, params: SuperResStage):
    return params(prev, text, boxes, valid)


class ImageHead(nd.Module):
    def __init__(self, channels, rng, init_scale=0.1):
        self.conv = nd.Conv2d(channels, 3, 3, rng)
        # untrained output starts near mid-gray instead of saturated noise
        self.conv.weight.data *= init_scale

    def __call__(self, h):
        return ops.tanh(self.conv(h))


def to_image(h, head: ImageHead):
    return head(h)


def thumbnail_generate(sentence, z, boxes, valid, params: Thumbnail):
    return HiddenRep(params(sentence, z, boxes, valid), 1)


class Generator(nd.Module):
    """Three-stage generator; ``channels[n]`` is the hidden width at stage n+1."""

    def __init__(self, dim=32, z_dim=16, cond_dim=16, channels=(32, 16, 16), roi_size=4, base=4, rng=None):
        rng = rng or nd.RngStream(2)
        self.z_dim = z_dim
        self.thumb = Thumbnail(dim, z_dim, cond_dim, channels[0], base, rng)
        self.stages = [SuperResStage(dim, a, b, roi_size, rng) for a, b in zip(channels[:-1], channels[1:])]
        self.heads = [ImageHead(c, rng) for c in channels]
        self.base = base

    @property
    def resolutions(self):
        return [self.base * 4 * 2 ** n for n in range(len(self.heads))]

    def sample_noise(self, rng: nd.RngStream, m):
        return nd.Tensor(rng.normal((m, self.z_dim)))

    def __call__(self, text: TextEncoding, z, boxes, valid, n_stages=None):
        """-> (hidden reps, images), one per stage; images are (M, 3, R, R) in (-1, 1)."""
        n_stages = n_stages or len(self.heads)
        boxes, valid = np.asarray(boxes), np.asarray(valid, dtype=bool)
        rep = thumbnail_generate(text.sentence, nd.as_tensor(z), boxes, valid, self.thumb)
        reps, images = [rep], [to_image(rep.h, self.heads[0])]
        for n in range(1, n_stages):
            rep = superres_stage(rep, text, boxes, valid, self.stages[n - 1])
            reps.append(rep)
            images.append(to_image(rep.h, self.heads[n]))
        return reps, images
