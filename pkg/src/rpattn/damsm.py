"""Attention-based image-text matching scores and the text-encoder losses.

Three similarity scores between a sentence S and image I:

* R1: cosine of sentence feature and global image feature.
* R2: words attend over regular-grid regions; each word is compared with its
  region-context vector and the per-word cosines are pooled by a smooth max
  ``(1/g2) log sum_t exp(g2 * cos(c_t, e_t))``.
* R3: the same with phrases as queries and true-grid (box) features as
  regions, pooled over the first ``min(T', K)`` phrases.

Attention weights are two-level: cosines are softmax-normalized across
regions, then sharpened by a second softmax with temperature ``gamma3``.

Posteriors ``P(S_q | I_i)`` are softmaxes of ``gamma1 * R`` over the sentence
index, ``P(I_i | S_q)`` over the image index. Each loss component is
``-sum_i [log P(S_i|I_i) + log P(I_i|S_i)]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .errors import BatchSizeError, EmptyRegionError
from .ndcore import ops

VARIANTS = {
    "basic": ("S", "W"),
    "full": ("S", "W", "P"),
    "phrase": ("S", "P"),
}


@dataclass(frozen=True)
class AttentionConfig:
    gamma1: float = 10.0
    gamma2: float = 5.0
    gamma3: float = 5.0

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SimilarityScores:
    r1: float | None = None
    r2: float | None = None
    r3: float | None = None


def _variant(variant):
    key = str(variant).lower()
    if key not in VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}; expected one of {sorted(VARIANTS)}")
    return key


def cosine_matrix(queries, regions):
    """Cosine between every query row and every region row: (..., Q, N)."""
    dots = ops.matmul(queries, regions.transpose(*range(regions.ndim - 2), regions.ndim - 1, regions.ndim - 2))
    nq = ops.l2norm(queries, axis=-1, keepdims=True)
    nr = ops.l2norm(regions, axis=-1, keepdims=True)
    nr = nr.transpose(*range(nr.ndim - 2), nr.ndim - 1, nr.ndim - 2)
    return dots / (nq * nr + ops.COS_EPS)


def attend(queries, regions, gamma3, region_mask=None):
    """Region-context vectors for a stack of queries.

    queries (..., Q, D), regions (..., N, D) -> (context (..., Q, D), alpha (..., Q, N)).
    """
    sims = cosine_matrix(queries, regions)
    mask = None if region_mask is None else np.broadcast_to(np.asarray(region_mask, bool)[..., None, :], sims.shape)
    s_bar = ops.softmax(sims, axis=-1, mask=mask)
    alpha = ops.softmax(s_bar, axis=-1, scale=gamma3, mask=mask)
    return ops.matmul(alpha, regions), alpha


def region_context(query, regions, gamma3):
    """Single query (D,) against regions (N, D) -> (c (D,), alpha (N,))."""
    query, regions = nd.as_tensor(query), nd.as_tensor(regions)
    if regions.ndim != 2 or regions.shape[0] == 0:
        raise EmptyRegionError("region_context needs at least one region")
    c, alpha = attend(query.reshape(1, -1), regions, gamma3)
    return c[0], alpha[0]


def _smooth_max(cos, gamma2, mask):
    return ops.logsumexp(cos * gamma2, axis=-1, mask=mask) * (1.0 / gamma2)


def score_r1(sentence, image_global):
    return ops.cosine_similarity(sentence, image_global)


def score_r2(words, regions, cfg=AttentionConfig()):
    """Words (T, D) vs regular-grid regions (J, D) -> scalar Tensor."""
    words, regions = nd.as_tensor(words), nd.as_tensor(regions)
    if words.shape[0] == 0:
        raise EmptyRegionError("score_r2 needs at least one word")
    if regions.shape[0] == 0:
        raise EmptyRegionError("score_r2 needs at least one region")
    c, _ = attend(words, regions, cfg.gamma3)
    return _smooth_max(ops.cosine_similarity(c, words), cfg.gamma2, None)


def score_r3(phrases, boxes, cfg=AttentionConfig()):
    """Phrases (T', D) vs valid true-grid rows (K, D).

    Returns None when T' or K is zero; the caller then drops the phrase term.
    """
    phrases, boxes = nd.as_tensor(phrases), nd.as_tensor(boxes)
    m = min(phrases.shape[0], boxes.shape[0])
    if m == 0:
        return None
    c, _ = attend(phrases[:m], boxes, cfg.gamma3)
    return _smooth_max(ops.cosine_similarity(c, phrases[:m]), cfg.gamma2, None)


# -- all-pairs score matrices; entry [q, i] scores sentence q against image i --

def pairwise_r1(text, image):
    return ops.cosine_similarity(text.sentence.reshape(-1, 1, text.sentence.shape[-1]),
                                 image.global_.reshape(1, -1, image.global_.shape[-1]))


def pairwise_r2(text, image, cfg):
    m_q, t_len, d = text.words.shape
    m_i = image.regular.shape[0]
    e = text.words.reshape(m_q, 1, t_len, d)
    v = image.regular.reshape(1, m_i, image.regular.shape[1], d)
    c, _ = attend(e, v, cfg.gamma3)
    cos = ops.cosine_similarity(c, e)
    mask = np.broadcast_to(text.word_mask[:, None, :], (m_q, m_i, t_len))
    return _smooth_max(cos, cfg.gamma2, mask)


def pairwise_r3(text, image, cfg):
    """-> (scores (Mq, Mi), defined (Mq, Mi) bool)."""
    m_q, p_len, d = text.phrases.shape
    m_i, k_max, _ = image.true_grid.shape
    p = text.phrases.reshape(m_q, 1, p_len, d)
    b = image.true_grid.reshape(1, m_i, k_max, d)
    region_mask = np.broadcast_to(image.box_valid[None, :, :], (m_q, m_i, k_max))
    c, _ = attend(p, b, cfg.gamma3, region_mask=region_mask)
    cos = ops.cosine_similarity(c, p)
    paired = np.minimum(text.phrase_counts[:, None], image.box_valid.sum(axis=1)[None, :])
    qmask = np.arange(p_len)[None, None, :] < paired[:, :, None]
    return _smooth_max(cos, cfg.gamma2, qmask), paired > 0


def posterior_matrix(scores, gamma1, mask=None):
    """P(S_q | I_i) laid out as [q, i]: each column is a softmax over sentences."""
    return ops.softmax(scores, axis=0, scale=gamma1, mask=mask)


def posterior_image_given_sentence(scores, gamma1, mask=None):
    """P(I_i | S_q) laid out as [q, i]: each row is a softmax over images."""
    return ops.softmax(scores, axis=1, scale=gamma1, mask=mask)


def component_loss(scores, gamma1, mask=None):
    """-sum_i [log P(S_i|I_i) + log P(I_i|S_i)] over pairs whose diagonal entry is defined."""
    m = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != m:
        raise BatchSizeError(f"score matrix must be square, got {scores.shape}")
    if m < 2:
        raise BatchSizeError("matching loss needs at least two pairs")
    ls = ops.log_softmax(scores, axis=0, scale=gamma1, mask=mask)
    li = ops.log_softmax(scores, axis=1, scale=gamma1, mask=mask)
    diag = np.arange(m)
    terms = ls[diag, diag] + li[diag, diag]
    if mask is not None:
        terms = terms * np.asarray(mask, dtype=bool)[diag, diag].astype(terms.dtype)
    return -terms.sum()


def score_matrices(text, image, cfg, components=("S", "W", "P")):
    """Dict of component -> (scores, mask-or-None)."""
    out = {}
    if "S" in components:
        out["S"] = (pairwise_r1(text, image), None)
    if "W" in components:
        out["W"] = (pairwise_r2(text, image, cfg), None)
    if "P" in components:
        r3, defined = pairwise_r3(text, image, cfg)
        out["P"] = (r3, defined)
    return out


def damsm_loss(text, image, cfg=AttentionConfig(), variant="full"):
    """Total matching loss and its components for a batch of matched pairs.

    Pair i of ``text`` is the ground truth for image i. Returns
    ``(loss, {"S": L_S, "W": L_W, "P": L_P})`` restricted to the variant's components.
    """
    comps = VARIANTS[_variant(variant)]
    m = text.sentence.shape[0]
    if m < 2:
        raise BatchSizeError(f"matching loss needs M >= 2 pairs, got {m}")
    parts = {k: component_loss(s, cfg.gamma1, mask) for k, (s, mask) in score_matrices(text, image, cfg, comps).items()}
    total = None
    for k in comps:
        total = parts[k] if total is None else total + parts[k]
    return total, parts


def similarity_matrix(text, image, cfg=AttentionConfig(), variant="full", chunk=32):
    """Numpy [q, i] matrix of R1 + R2 + R3 (per variant), without gradients.

    Undefined R3 entries contribute 0.
    """
    comps = VARIANTS[_variant(variant)]
    m_q, m_i = text.sentence.shape[0], image.global_.shape[0]
    out = np.zeros((m_q, m_i), dtype=np.float64)
    with nd.no_grad():
        for start in range(0, m_i, chunk):
            idx = np.arange(start, min(start + chunk, m_i))
            sub = image.select(idx)
            for k, (s, mask) in score_matrices(text, sub, cfg, comps).items():
                vals = s.data if mask is None else np.where(mask, s.data, 0.0)
                out[:, idx] += vals
    return out
