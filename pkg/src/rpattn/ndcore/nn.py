"""Parameter containers and small layers built on the tape."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import ops
from .rng import RngStream
from .tensor import Tensor


def param(array):
    return Tensor(array, requires_grad=True)


class Module:
    """Walks attributes to find parameters and submodules.

    Every Tensor attribute is a parameter; modules must not keep activations
    as attributes.
    """

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable(self):
        return [p for p in self.parameters() if p.requires_grad]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for k, arr in state.items():
            if k not in own:
                continue
            if own[k].shape != tuple(arr.shape):
                raise ShapeError(f"parameter {k}", own[k].shape, arr.shape)
            own[k].data = np.array(arr, dtype=own[k].dtype)

    def freeze(self):
        """Stop gradient tracking on every parameter."""
        for p in self.parameters():
            p.requires_grad = False
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """y = x @ W + b with W stored as (in, out)."""

    def __init__(self, n_in, n_out, rng: RngStream, bias=True, scale=None):
        scale = (1.0 / np.sqrt(n_in)) if scale is None else scale
        self.weight = param(rng.normal((n_in, n_out), scale))
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng: RngStream, stride=1, pad=None, bias=True):
        fan_in = c_in * k * k
        self.weight = param(rng.normal((c_out, c_in, k, k), np.sqrt(2.0 / fan_in)))
        self.bias = param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.pad = (k // 2) if pad is None else pad

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class LSTMCell(Module):
    """Gate order in the packed weights: input, forget, cell candidate, output."""

    def __init__(self, n_in, hidden, rng: RngStream, forget_bias=1.0):
        self.hidden = hidden
        self.w_x = param(rng.normal((n_in, 4 * hidden), 1.0 / np.sqrt(n_in)))
        self.w_h = param(rng.normal((hidden, 4 * hidden), 1.0 / np.sqrt(hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = forget_bias
        self.b = param(b)

    def __call__(self, x, state):
        return lstm_step(x, state, self)


def lstm_step(x, state, params):
    """One LSTM step.

    i, f, o = sigmoid(.), g = tanh(.) over x W_x + h W_h + b;
    c' = f * c + i * g;  h' = o * tanh(c').
    ``x`` is (N, n_in); ``state`` is (h, c), each (N, hidden).
    """
    h, c = state
    hid = params.w_h.shape[0]
    if x.shape[-1] != params.w_x.shape[0] or h.shape[-1] != hid:
        raise ShapeError("lstm_step input/state vs weights", x.shape, h.shape, params.w_x.shape)
    z = ops.matmul(x, params.w_x) + ops.matmul(h, params.w_h) + params.b
    i = ops.sigmoid(z[..., :hid])
    f = ops.sigmoid(z[..., hid:2 * hid])
    g = ops.tanh(z[..., 2 * hid:3 * hid])
    o = ops.sigmoid(z[..., 3 * hid:])
    c_new = f * c + i * g
    h_new = o * ops.tanh(c_new)
    return h_new, c_new


def run_lstm(cell, xs, mask, reverse=False):
    """Run ``cell`` over a padded batch.

    xs: (N, T, n_in) Tensor; mask: (N, T) bool array of real positions.
    State is carried unchanged through padding, so with ``reverse=True`` the
    backward pass starts from a zero state at each sequence's last real token.
    Returns per-step hidden states (N, T, hidden) and the final hidden state.
    """
    n, t_len = mask.shape
    dt = xs.dtype
    h = Tensor(np.zeros((n, cell.hidden), dtype=dt))
    c = Tensor(np.zeros((n, cell.hidden), dtype=dt))
    outs = [None] * t_len
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in steps:
        m = mask[:, t:t + 1].astype(dt)
        h_new, c_new = cell(xs[:, t, :], (h, c))
        if m.all():
            h, c = h_new, c_new
        else:
            h = h_new * m + h * (1.0 - m)
            c = c_new * m + c * (1.0 - m)
        outs[t] = h
    return ops.stack(outs, axis=1), h
