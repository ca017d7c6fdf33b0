import zlib

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rpattn import ndcore as nd
from rpattn.errors import NumericDomainError, ShapeError, UsageError
from rpattn.ndcore import ops


def _mp_softmax(xs, gamma):
    mpmath.mp.dps = 50
    ex = [mpmath.exp(gamma * mpmath.mpf(x)) for x in xs]
    s = sum(ex)
    return [float(e / s) for e in ex]


class TestSoftmax:
    def test_uniform(self):
        y = nd.softmax(nd.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, [1 / 3] * 3, atol=1e-7)

    @pytest.mark.parametrize("x,gamma", [([1.0, 2.0], 1.0), ([5.0, -5.0], 10.0), ([0.3, -1.2, 2.0], 5.0)])
    def test_matches_high_precision(self, x, gamma):
        y = nd.softmax(nd.Tensor(x), scale=gamma)
        np.testing.assert_allclose(y.data, _mp_softmax(x, gamma), rtol=1e-6, atol=1e-30)

    def test_large_logits_do_not_overflow(self):
        y = nd.softmax(nd.Tensor([5.0, -5.0]), scale=10.0)
        assert y.data[0] == pytest.approx(1.0)
        assert 0.0 <= y.data[1] < 1e-40 or y.data[1] == 0.0

    def test_non_finite_input_raises(self):
        with pytest.raises(NumericDomainError):
            nd.softmax(nd.Tensor([0.0, np.inf]))

    def test_masked_entries_get_zero(self):
        y = nd.softmax(nd.Tensor([1.0, 5.0, 2.0]), mask=np.array([True, False, True]))
        assert y.data[1] == 0.0
        np.testing.assert_allclose(y.data[[0, 2]], _mp_softmax([1.0, 2.0], 1.0), rtol=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 7)),
               elements=st.floats(-50, 50, width=32)),
        st.sampled_from([1.0, 5.0, 10.0]),
    )
    def test_slices_sum_to_one(self, x, gamma):
        y = nd.softmax(nd.Tensor(x), axis=-1, scale=gamma)
        np.testing.assert_allclose(y.data.sum(-1), 1.0, atol=1e-5)


class TestCosine:
    def test_self(self):
        a = nd.Tensor([1.0, 2.0, 3.0])
        assert nd.cosine_similarity(a, a).item() == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal(self):
        assert nd.cosine_similarity(nd.Tensor([1.0, 0.0]), nd.Tensor([0.0, 1.0])).item() == 0.0

    def test_reference_value(self):
        ref = 1.0 / np.sqrt(2.0)
        val = nd.cosine_similarity(nd.Tensor([1.0, 1.0]), nd.Tensor([1.0, 0.0])).item()
        assert val == pytest.approx(ref, abs=1e-6)

    def test_zero_vector_is_finite(self):
        z = nd.Tensor(np.zeros(3), requires_grad=True)
        y = nd.cosine_similarity(z, nd.Tensor([1.0, 2.0, 3.0]))
        assert y.item() == 0.0
        nd.backward(y)
        assert np.isfinite(z.grad).all()


class TestSpatial:
    def test_conv_sum_of_ones(self):
        y = nd.conv2d(nd.Tensor(np.ones((1, 1, 2, 2))), nd.Tensor(np.ones((1, 1, 2, 2))))
        assert y.shape == (1, 1, 1, 1) and y.data[0, 0, 0, 0] == 4.0

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        with nd.precision(np.float64):
            y = nd.conv2d(nd.Tensor(x), nd.Tensor(w), nd.Tensor(b), stride=2, pad=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho, wo = (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
        np.testing.assert_allclose(y, ref, rtol=1e-12)

    def test_conv_shape_error(self):
        with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\)"):
            nd.conv2d(nd.Tensor(np.ones((1, 2, 4, 4))), nd.Tensor(np.ones((1, 3, 3, 3))))

    def test_max_pool(self):
        y = nd.max_pool2d(nd.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2)
        assert y.data.reshape(-1).tolist() == [4.0]

    def test_upsample(self):
        y = nd.upsample_nearest(nd.Tensor(np.ones((1, 1, 1, 1))), 2)
        assert y.data[0, 0].tolist() == [[1.0, 1.0], [1.0, 1.0]]

    def test_concat_and_masked_fill(self):
        a = nd.Tensor(np.ones((1, 2, 2, 2)))
        b = nd.Tensor(np.zeros((1, 3, 2, 2)))
        assert nd.concat([a, b], axis=1).shape == (1, 5, 2, 2)
        y = nd.masked_fill(nd.Tensor([1.0, 2.0, 3.0]), np.array([1, 0, 1]), -7.0)
        assert y.data.tolist() == [1.0, -7.0, 3.0]

    def test_concat_shape_error(self):
        with pytest.raises(ShapeError):
            nd.concat([nd.Tensor(np.ones((2, 2))), nd.Tensor(np.ones((3, 3)))], axis=0)


class TestBackward:
    def test_square(self):
        x = nd.Tensor([1.0, 2.0], requires_grad=True)
        nd.backward((x * x).sum())
        assert x.grad.tolist() == [2.0, 4.0]

    def test_softmax_pick(self):
        x = nd.Tensor([0.0, 0.0], requires_grad=True)
        nd.backward(nd.softmax(x)[0])
        np.testing.assert_allclose(x.grad, [0.25, -0.25], atol=1e-7)

    def test_softmax_pick_against_finite_differences(self):
        def f(v):
            e = np.exp(v - v.max())
            return (e / e.sum())[0]

        v = np.array([0.0, 0.0])
        h = 1e-6
        fd = [(f(v + h * np.eye(2)[i]) - f(v - h * np.eye(2)[i])) / (2 * h) for i in range(2)]
        np.testing.assert_allclose(fd, [0.25, -0.25], atol=1e-8)

    def test_cosine_self_has_zero_gradient(self):
        x = nd.Tensor([0.3, -1.2, 2.0], requires_grad=True)
        nd.backward(nd.cosine_similarity(x, x))
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-6)

    def test_non_scalar_raises(self):
        x = nd.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            nd.backward(x * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = nd.Tensor([3.0], requires_grad=True)
        y = x * x
        nd.backward((y + y).sum())
        assert x.grad.tolist() == [12.0]

    def test_forward_is_bit_deterministic(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        a = nd.conv2d(nd.Tensor(x), nd.Tensor(w), stride=2, pad=1).data
        b = nd.conv2d(nd.Tensor(x), nd.Tensor(w), stride=2, pad=1).data
        assert a.tobytes() == b.tobytes()


def _p(rng, *shape):
    return nd.Tensor(rng.standard_normal(shape), requires_grad=True)


@pytest.mark.parametrize("case", [
    "arith", "matmul", "nonlin", "softmax", "log_softmax", "lse", "cosine", "l2norm",
    "conv", "pool", "upsample", "index", "concat", "bce",
])
def test_op_gradients_match_finite_differences(case):
    rng = np.random.default_rng(zlib.crc32(case.encode()))
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    mask = rng.random((3, 4)) > 0.3
    mask[:, 0] = True
    img, ker, bias = _p(rng, 2, 2, 5, 5), _p(rng, 3, 2, 3, 3), _p(rng, 3)
    w = (rng.standard_normal((3, 4)))

    def weights():
        return nd.Tensor(w)

    fns = {
        "arith": (lambda: ((a * b - a / (b * b + 2.0)) ** 2).sum(), [a, b]),
        "matmul": (lambda: (a @ b.T).sum() + ((a.reshape(3, 4, 1) @ b.reshape(3, 1, 4)) * 0.5).sum(), [a, b]),
        "nonlin": (lambda: (ops.tanh(a) * ops.sigmoid(b) + ops.softplus(a) + ops.leaky_relu(b)
                            + ops.exp(a * 0.3) + ops.log(b * b + 1.0)).sum(), [a, b]),
        "softmax": (lambda: (nd.softmax(a, axis=1, scale=3.0, mask=mask) * weights()).sum(), [a]),
        "log_softmax": (lambda: (nd.log_softmax(a, axis=0, scale=2.0, mask=mask) * weights()).sum(), [a]),
        "lse": (lambda: (nd.logsumexp(a, axis=1, mask=mask) * nd.Tensor([1.0, -2.0, 0.5])).sum(), [a]),
        "cosine": (lambda: (nd.cosine_similarity(a.reshape(3, 1, 4), b.reshape(1, 3, 4)) * weights()[:, :3]).sum(), [a, b]),
        "l2norm": (lambda: (ops.l2norm(a, axis=1) * nd.Tensor([1.0, -2.0, 0.5])).sum(), [a]),
        "conv": (lambda: (ops.leaky_relu(nd.conv2d(img, ker, bias, stride=2, pad=1)) ** 2).sum(), [img, ker, bias]),
        "pool": (lambda: (nd.max_pool2d(img, 2) * nd.Tensor(w[:2, :2].reshape(1, 2, 1, 2))).sum(), [img]),
        "upsample": (lambda: (nd.upsample_nearest(img, 2) ** 2).sum(), [img]),
        "index": (lambda: (a[np.array([0, 2, 2]), np.array([1, 1, 3])] * nd.Tensor([1.0, 2.0, 3.0])).sum() + a[1:, ::2].sum(), [a]),
        "concat": (lambda: (nd.concat([a, b], axis=1) ** 2 * nd.Tensor(np.arange(8.0))).sum()
                   + (nd.stack([a, b], axis=0) ** 3).sum(), [a, b]),
        "bce": (lambda: nd.bce_with_logits(a, 1.0) + nd.bce_with_logits(b, 0.0), [a, b]),
    }
    fn, params = fns[case]
    assert nd.gradcheck(fn, params) <= 1e-4


class TestLSTM:
    def _cell(self, n_in, hidden):
        return nd.LSTMCell(n_in, hidden, nd.RngStream(0))

    def test_zero_params_give_zero_state(self):
        cell = self._cell(3, 2)
        for p in cell.parameters():
            p.data[:] = 0
        h, c = nd.lstm_step(nd.Tensor(np.ones((1, 3))), (nd.Tensor(np.zeros((1, 2))), nd.Tensor(np.zeros((1, 2)))), cell)
        assert np.all(h.data == 0) and np.all(c.data == 0)

    def test_single_unit_hand_algebra(self):
        cell = self._cell(1, 1)
        cell.w_x.data[:] = np.array([[1.0, -0.5, 2.0, 0.3]])
        cell.w_h.data[:] = np.array([[0.2, 0.1, -0.4, 0.6]])
        cell.b.data[:] = np.array([0.0, 1.0, 0.1, -0.2])
        x, h0, c0 = 0.7, 0.25, -0.4
        sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
        i = sig(1.0 * x + 0.2 * h0 + 0.0)
        f = sig(-0.5 * x + 0.1 * h0 + 1.0)
        g = np.tanh(2.0 * x - 0.4 * h0 + 0.1)
        o = sig(0.3 * x + 0.6 * h0 - 0.2)
        c1 = f * c0 + i * g
        h1 = o * np.tanh(c1)
        h, c = nd.lstm_step(nd.Tensor([[x]]), (nd.Tensor([[h0]]), nd.Tensor([[c0]])), cell)
        assert h.item() == pytest.approx(h1, rel=1e-6)
        assert c.item() == pytest.approx(c1, rel=1e-6)

    def test_forget_gate_decay(self):
        cell = self._cell(2, 3)
        for p in cell.parameters():
            p.data[:] = 0
        b_f = np.array([0.5, -1.0, 2.0])
        cell.b.data[3:6] = b_f
        h = nd.Tensor(np.zeros((1, 3)))
        c = nd.Tensor(np.array([[1.0, -2.0, 0.5]]))
        c_ref = c.data.astype(np.float64).copy()
        for _ in range(4):
            h, c = nd.lstm_step(nd.Tensor(np.zeros((1, 2))), (h, c), cell)
            c_ref = c_ref / (1 + np.exp(-b_f))
        np.testing.assert_allclose(c.data, c_ref, rtol=1e-5)

    def test_hidden_bounded(self):
        cell = self._cell(4, 5)
        rng = np.random.default_rng(1)
        h, c = nd.Tensor(np.zeros((3, 5))), nd.Tensor(np.zeros((3, 5)))
        for _ in range(5):
            h, c = cell(nd.Tensor(rng.standard_normal((3, 4)) * 10), (h, c))
            assert np.all(np.abs(h.data) < 1)

    def test_gradients(self):
        cell = self._cell(2, 3)
        rng = np.random.default_rng(5)
        x = nd.Tensor(rng.standard_normal((2, 4, 2)), requires_grad=True)
        mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)

        def fn():
            outs, last = nd.run_lstm(cell, x, mask, reverse=True)
            return (outs ** 2).sum() + last.sum()

        assert nd.gradcheck(fn, [x] + cell.parameters()) <= 1e-4


def test_archive_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}
    nd.archive.save(tmp_path / "x.nda", tensors, meta={"k": 1})
    back, meta = nd.archive.load(tmp_path / "x.nda", with_meta=True)
    assert meta == {"k": 1}
    for k, v in tensors.items():
        assert back[k].tobytes() == v.tobytes() and back[k].shape == v.shape


def test_rng_stream_is_reproducible():
    a = nd.RngStream(42).normal((5,))
    b = nd.RngStream(42).normal((5,))
    assert a.tobytes() == b.tobytes()


def test_adam_zero_lr_leaves_params():
    p = nd.Tensor([1.0, 2.0], requires_grad=True)
    opt = nd.Adam([p], lr=0.0)
    nd.backward((p * p).sum())
    opt.step()
    assert p.data.tolist() == [1.0, 2.0]
