import math

import numpy as np
import pytest

from rpattn import gen
from rpattn import ndcore as nd
from rpattn.imgenc import BoxSet, stack_boxsets
from rpattn.textenc import TextEncoding


def make_text(rng, m, t, p, d, n_words=None, n_phrases=None):
    n_words = [t] * m if n_words is None else n_words
    n_phrases = [p] * m if n_phrases is None else n_phrases
    wmask = np.arange(t)[None, :] < np.array(n_words)[:, None]
    pmask = np.arange(max(p, 1))[None, :] < np.array(n_phrases)[:, None]
    words = rng.standard_normal((m, t, d)) * wmask[..., None]
    phrases = rng.standard_normal((m, max(p, 1), d)) * pmask[..., None]
    return TextEncoding(nd.Tensor(words), wmask, nd.Tensor(rng.standard_normal((m, d))), nd.Tensor(phrases), pmask)


def boxes_of(*lists, k_max=4):
    return stack_boxsets([BoxSet.from_list(b, k_max) for b in lists])


@pytest.fixture
def small():
    return gen.Generator(dim=6, z_dim=3, cond_dim=4, channels=(5, 4, 3), roi_size=2, base=2, rng=nd.RngStream(1))


def test_zero_params_zero_thumbnail(small):
    for p in small.parameters():
        p.data[:] = 0
    text = make_text(np.random.default_rng(0), 2, 3, 1, 6)
    b, v = boxes_of([(0.1, 0.1, 0.5, 0.5)], [])
    h1 = gen.thumbnail_generate(text.sentence, nd.Tensor(np.ones((2, 3))), b, v, small.thumb)
    assert h1.h.shape == (2, 5, 8, 8) and not h1.h.data.any()


def test_full_box_mask_is_identity(small):
    sentence = nd.Tensor(np.random.default_rng(1).standard_normal((1, 6)))
    b, v = boxes_of([(0.0, 0.0, 1.0, 1.0)])
    masked = small.thumb.masked_sentence(sentence, b, v).data
    np.testing.assert_array_equal(masked, np.broadcast_to(sentence.data[:, :, None, None], masked.shape))


def test_disjoint_boxes_mask_union():
    thumb = gen.Thumbnail(dim=3, z_dim=2, cond_dim=2, channels=2, base=8, rng=nd.RngStream(0))
    boxes = [(0.05, 0.1, 0.2, 0.3), (0.6, 0.55, 0.35, 0.4)]
    b, v = boxes_of(boxes)
    masked = thumb.masked_sentence(nd.Tensor(np.ones((1, 3))), b, v).data[0, 0]
    # a cell is inside when its square overlaps some box with positive area
    expect = np.zeros((8, 8))
    for r in range(8):
        for c in range(8):
            for x, y, w, h in boxes:
                if c / 8 < x + w and (c + 1) / 8 > x and r / 8 < y + h and (r + 1) / 8 > y:
                    expect[r, c] = 1
    np.testing.assert_array_equal(masked != 0, expect != 0)


def _oracle_word_context(words, h, proj_w):
    # words (T, D), h (C, H, W); straightforward loops in 64-bit
    c, hh, ww = h.shape
    ew = [[sum(words[t][k] * proj_w[k][j] for k in range(len(words[t]))) for j in range(c)] for t in range(len(words))]
    out = np.zeros((c, hh, ww))
    for r in range(hh):
        for q in range(ww):
            logits = [sum(h[j, r, q] * ew[t][j] for j in range(c)) for t in range(len(words))]
            top = max(logits)
            ex = [math.exp(x - top) for x in logits]
            z = sum(ex)
            for j in range(c):
                out[j, r, q] = sum(ex[t] / z * ew[t][j] for t in range(len(words)))
    return out


def test_word_context_oracle_and_normalization():
    rng = np.random.default_rng(2)
    for trial in range(100):
        m, t, d, c, s = 2, int(rng.integers(1, 4)), 3, int(rng.integers(1, 4)), int(rng.integers(1, 4))
        lengths = rng.integers(1, t + 1, m)
        text = make_text(rng, m, t, 1, d, n_words=lengths)
        proj = nd.Linear(d, c, nd.RngStream(trial), bias=False)
        h = nd.Tensor(rng.standard_normal((m, c, s, s)))
        cm = gen.word_context_matrix(text.words, text.word_mask, h, proj)
        assert np.all(np.abs(cm.weights.data.sum(axis=-1) - 1) <= 1e-5)
        if trial < 20:
            for i in range(m):
                want = _oracle_word_context(text.words.data[i, :lengths[i]].tolist(), h.data[i].astype(np.float64),
                                            proj.weight.data.tolist())
                np.testing.assert_allclose(cm.ctx.data[i], want, rtol=1e-5, atol=1e-6)


def test_word_context_single_word_and_zero_hidden():
    rng = np.random.default_rng(3)
    proj = nd.Linear(4, 3, nd.RngStream(0), bias=False)
    text = make_text(rng, 1, 1, 1, 4)
    h = nd.Tensor(rng.standard_normal((1, 3, 2, 2)))
    cm = gen.word_context_matrix(text.words, text.word_mask, h, proj)
    projected = text.words.data[0, 0] @ proj.weight.data
    np.testing.assert_allclose(cm.ctx.data[0], np.broadcast_to(projected[:, None, None], (3, 2, 2)), rtol=1e-6)
    text = make_text(rng, 1, 3, 1, 4)
    cm = gen.word_context_matrix(text.words, text.word_mask, nd.Tensor(np.zeros((1, 3, 2, 2))), proj)
    mean = (text.words.data[0] @ proj.weight.data).mean(axis=0)
    np.testing.assert_allclose(cm.ctx.data[0], np.broadcast_to(mean[:, None, None], (3, 2, 2)), rtol=1e-5)


def _phrase_parts(seed, c=3, d=4):
    rs = nd.RngStream(seed)
    return nd.Linear(d, c, rs, bias=False), nd.param(rs.normal((c, c, 2, 2), 0.5))


def test_phrase_context_single_box_single_phrase():
    rng = np.random.default_rng(4)
    proj, kernel = _phrase_parts(0)
    text = make_text(rng, 1, 2, 1, 4)
    b, v = boxes_of([(0.0, 0.0, 1.0, 1.0)])
    cm = gen.phrase_context_matrix(text.phrases, text.phrase_mask, b, v, nd.Tensor(rng.standard_normal((1, 3, 4, 4))),
                                   proj, kernel)
    projected = text.phrases.data[0, 0] @ proj.weight.data
    np.testing.assert_allclose(cm.ctx.data[0], np.broadcast_to(projected[:, None, None], (3, 4, 4)), rtol=1e-6)


def test_phrase_context_overlap_is_mean_and_outside_zero():
    rng = np.random.default_rng(5)
    proj, kernel = _phrase_parts(1)
    text = make_text(rng, 1, 3, 2, 4)
    b, v = boxes_of([(0.0, 0.0, 0.5, 0.5), (0.25, 0.25, 0.5, 0.5)])
    h = nd.Tensor(rng.standard_normal((1, 3, 8, 8)))
    ctx = gen.phrase_context_matrix(text.phrases, text.phrase_mask, b, v, h, proj, kernel).ctx.data[0]
    u, w = ctx[:, 0, 0], ctx[:, 7 - 2, 7 - 2]   # cells covered only by box 0 / box 1
    assert not np.array_equal(u, w)
    for r in range(8):
        for q in range(8):
            in0, in1 = r < 4 and q < 4, 2 <= r < 6 and 2 <= q < 6
            if in0 and in1:
                np.testing.assert_array_equal(ctx[:, r, q], (u + w) / 2)
            elif in0:
                np.testing.assert_array_equal(ctx[:, r, q], u)
            elif in1:
                np.testing.assert_array_equal(ctx[:, r, q], w)
            else:
                assert not ctx[:, r, q].any()


def test_phrase_context_zero_outside_random_boxes():
    rng = np.random.default_rng(6)
    proj, kernel = _phrase_parts(2)
    for _ in range(30):
        k = int(rng.integers(0, 4))
        boxes = []
        for _ in range(k):
            w, h = rng.uniform(0.05, 0.6, 2)
            boxes.append((rng.uniform(0, 1 - w), rng.uniform(0, 1 - h), w, h))
        b, v = boxes_of(boxes)
        text = make_text(rng, 1, 3, int(rng.integers(0, 3)), 4)
        ctx = gen.phrase_context_matrix(text.phrases, text.phrase_mask, b, v,
                                        nd.Tensor(rng.standard_normal((1, 3, 8, 8))), proj, kernel).ctx.data[0]
        outside = gen.union_mask(b, v, 8)[0, 0] == 0
        assert not ctx[:, outside].any()


def test_phrase_context_no_boxes_or_phrases():
    rng = np.random.default_rng(7)
    proj, kernel = _phrase_parts(3)
    h = nd.Tensor(rng.standard_normal((1, 3, 4, 4)))
    b, v = boxes_of([])
    text = make_text(rng, 1, 2, 1, 4)
    assert not gen.phrase_context_matrix(text.phrases, text.phrase_mask, b, v, h, proj, kernel).ctx.data.any()
    b, v = boxes_of([(0.1, 0.1, 0.5, 0.5)])
    text = make_text(rng, 1, 2, 0, 4)
    assert not gen.phrase_context_matrix(text.phrases, text.phrase_mask, b, v, h, proj, kernel).ctx.data.any()


def test_phrase_context_box_permutation():
    rng = np.random.default_rng(8)
    proj, kernel = _phrase_parts(4)
    boxes = [(0.0, 0.1, 0.5, 0.4), (0.3, 0.3, 0.6, 0.6), (0.6, 0.0, 0.4, 0.3)]
    text = make_text(rng, 1, 4, 3, 4)
    h = nd.Tensor(rng.standard_normal((1, 3, 8, 8)))
    b, v = boxes_of(boxes)
    base = gen.phrase_context_matrix(text.phrases, text.phrase_mask, b, v, h, proj, kernel).ctx.data
    perm = [2, 0, 1]
    bp, vp = boxes_of([boxes[i] for i in perm])
    tp = TextEncoding(text.words, text.word_mask, text.sentence,
                      nd.Tensor(text.phrases.data[:, perm]), text.phrase_mask)
    moved = gen.phrase_context_matrix(tp.phrases, tp.phrase_mask, bp, vp, h, proj, kernel).ctx.data
    np.testing.assert_allclose(moved, base, rtol=1e-6, atol=1e-7)


def test_superres_shapes_and_context_average(small):
    rng = np.random.default_rng(9)
    text = make_text(rng, 2, 3, 1, 6)
    b, v = boxes_of([(0.0, 0.0, 0.5, 0.5)], [(0.5, 0.5, 0.5, 0.5)])
    prev = gen.HiddenRep(nd.Tensor(rng.standard_normal((2, 5, 8, 8))), 1)
    out = gen.superres_stage(prev, text, b, v, small.stages[0])
    assert out.h.shape == (2, 4, 16, 16) and out.stage == 2
    avg = (out.word_ctx.data + out.phrase_ctx.data) / 2
    np.testing.assert_allclose(avg[0, :, 7, 7], out.word_ctx.data[0, :, 7, 7] / 2, rtol=1e-6)


def test_superres_zero_context_is_plain_upsampling(small):
    rng = np.random.default_rng(10)
    stage = small.stages[0]
    stage.word_proj.weight.data[:] = 0
    stage.phrase_proj.weight.data[:] = 0
    text = make_text(rng, 1, 2, 1, 6)
    b, v = boxes_of([(0.1, 0.1, 0.6, 0.6)])
    h = nd.Tensor(rng.standard_normal((1, 5, 8, 8)))
    out = stage(gen.HiddenRep(h, 1), text, b, v).h.data
    x = gen._act(stage.join(nd.concat([h, nd.Tensor(np.zeros((1, 5, 8, 8)))], axis=1)))
    for block in stage.res:
        x = block(x)
    np.testing.assert_array_equal(out, gen.up_block(stage.up, x).data)


def test_image_head(small):
    head = small.heads[0]
    h = nd.Tensor(np.random.default_rng(11).standard_normal((2, 5, 4, 4)) * 50)
    img = gen.to_image(h, head).data
    assert img.shape == (2, 3, 4, 4) and np.all(np.abs(img) <= 1)
    np.testing.assert_array_equal(img, gen.to_image(h, head).data)
    head.conv.weight.data[:] = 0
    assert not gen.to_image(h, head).data.any()


def test_full_forward_and_gradients_reach_inputs():
    g = gen.Generator(dim=8, z_dim=4, cond_dim=4, channels=(6, 4, 4), rng=nd.RngStream(3))
    rng = np.random.default_rng(12)
    text = make_text(rng, 2, 3, 2, 8)
    for t in (text.words, text.sentence, text.phrases):
        t.requires_grad = True
    z = nd.Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    b, v = boxes_of([(0.1, 0.1, 0.5, 0.4), (0.4, 0.5, 0.5, 0.5)], [(0.2, 0.2, 0.6, 0.6)])
    _, imgs = g(text, z, b, v)
    assert [i.shape[-1] for i in imgs] == [16, 32, 64] == g.resolutions
    assert all(np.isfinite(i.data).all() for i in imgs)
    loss = sum(((i - 0.3) ** 2).mean() for i in imgs)
    nd.backward(loss)
    for t in (text.words, text.sentence, text.phrases, z):
        assert t.grad is not None and np.linalg.norm(t.grad) > 0


def test_generator_gradients(small):
    rng = np.random.default_rng(13)
    text = make_text(rng, 2, 2, 2, 6)
    z = nd.Tensor(rng.standard_normal((2, 3)))
    b, v = boxes_of([(0.1, 0.1, 0.5, 0.4), (0.4, 0.5, 0.5, 0.5)], [(0.2, 0.2, 0.6, 0.6)])
    w = [rng.standard_normal((2, 3, r, r)) for r in small.resolutions]

    def fn():
        _, imgs = small(text, z, b, v)
        return sum((img * nd.Tensor(wi)).sum() for img, wi in zip(imgs, w))

    worst, checked, kinks = nd.gradcheck(fn, small.parameters(), max_per_tensor=6, kink_retry=True, report=True)
    assert worst <= 1e-4 and kinks <= 0.1 * checked
