"""Forward/backward pairs for the dense building blocks.

Parameters live in one flat dict keyed by dotted names; backward functions
accumulate into a ``grads`` dict with the same keys.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def softmax(s, axis=-1):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(s, axis=-1):
    z = s - s.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def accumulate(grads: dict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def init_linear(rng, params: dict, name: str, d_in: int, d_out: int, scale: float = 1.0, bias: bool = True):
    params[f"{name}.w"] = rng.normal(0.0, scale / math.sqrt(d_in), size=(d_in, d_out))
    if bias:
        params[f"{name}.b"] = np.zeros(d_out)


def init_mlp(rng, params: dict, name: str, d_in: int, d_hidden: int, d_out: int, out_scale: float = 1.0):
    init_linear(rng, params, f"{name}.l1", d_in, d_hidden)
    init_linear(rng, params, f"{name}.l2", d_hidden, d_out, scale=out_scale)


def mlp_forward(x, p, name):
    """linear -> GELU -> linear over the last axis."""
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    h = x2 @ p[f"{name}.l1.w"] + p[f"{name}.l1.b"]
    a = gelu(h)
    y = a @ p[f"{name}.l2.w"] + p[f"{name}.l2.b"]
    return y.reshape(*lead, y.shape[-1]), (x2, h, a, lead)


def mlp_backward(dy, cache, p, name, grads):
    x2, h, a, lead = cache
    dy2 = dy.reshape(-1, dy.shape[-1])
    accumulate(grads, f"{name}.l2.w", a.T @ dy2)
    accumulate(grads, f"{name}.l2.b", dy2.sum(axis=0))
    dh = (dy2 @ p[f"{name}.l2.w"].T) * gelu_grad(h)
    accumulate(grads, f"{name}.l1.w", x2.T @ dh)
    accumulate(grads, f"{name}.l1.b", dh.sum(axis=0))
    dx = dh @ p[f"{name}.l1.w"].T
    return dx.reshape(*lead, dx.shape[-1])


def attention_forward(x, wq, wk, wv):
    """Single-head scaled dot-product self-attention over the rows of ``x``."""
    q, k, v = x @ wq, x @ wk, x @ wv
    scale = 1.0 / math.sqrt(k.shape[1])
    a = softmax((q @ k.T) * scale, axis=1)
    return a @ v, (x, q, k, v, a, scale)


def attention_backward(dout, cache, wq, wk, wv):
    """Returns (dx, dwq, dwk, dwv)."""
    x, q, k, v, a, scale = cache
    dv = a.T @ dout
    da = dout @ v.T
    ds = a * (da - (da * a).sum(axis=1, keepdims=True))
    dq = ds @ k * scale
    dk = ds.T @ q * scale
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx, x.T @ dq, x.T @ dk, x.T @ dv
