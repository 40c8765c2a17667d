"""Layer building blocks on top of the tensor ops."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .optim import ParamStore


def init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng,
                zero: bool = False, stack: int | None = None, bias: bool = True):
    shape = (n_in, n_out) if stack is None else (stack, n_in, n_out)
    if zero:
        w = np.zeros(shape)
    else:
        w = rng.standard_normal(shape) * np.sqrt(1.0 / n_in)
    store.add(f"{name}.w", w)
    if bias:
        store.add(f"{name}.b", np.zeros(shape[:-2] + (1, n_out) if stack is not None else (n_out,)))


def linear(x, store: ParamStore, name: str):
    out = T.matmul(x, store[f"{name}.w"])
    if f"{name}.b" in store:
        out = out + store[f"{name}.b"]
    return out


def init_mlp(store, name, n_in, n_hidden, n_out, rng, zero_last=False, stack=None):
    init_linear(store, f"{name}.0", n_in, n_hidden, rng, stack=stack)
    init_linear(store, f"{name}.1", n_hidden, n_out, rng, zero=zero_last, stack=stack)


def mlp(x, store, name):
    """Two-layer perceptron with a tanh hidden layer."""
    return linear(T.tanh(linear(x, store, f"{name}.0")), store, f"{name}.1")


def init_gru(store, name, n_in, n_hidden, rng):
    for gate in ("r", "z", "n"):
        init_linear(store, f"{name}.x{gate}", n_in, n_hidden, rng)
        init_linear(store, f"{name}.h{gate}", n_hidden, n_hidden, rng)


def gru_cell(x, h, store, name):
    r = T.sigmoid(linear(x, store, f"{name}.xr") + linear(h, store, f"{name}.hr"))
    z = T.sigmoid(linear(x, store, f"{name}.xz") + linear(h, store, f"{name}.hz"))
    n = T.tanh(linear(x, store, f"{name}.xn") + r * linear(h, store, f"{name}.hn"))
    return (1.0 - z) * n + z * h


def gru(seq, valid, store, name, n_hidden):
    """Run a GRU over ``seq`` ``(..., S, F)``; steps with ``valid`` False keep the state.

    Returns the final hidden state ``(..., n_hidden)``.
    """
    seq = T.as_tensor(seq)
    valid = np.asarray(valid, dtype=bool)
    h = T.Tensor(np.zeros(seq.shape[:-2] + (n_hidden,)))
    for s in range(seq.shape[-2]):
        h_new = gru_cell(seq[..., s, :], h, store, name)
        h = T.where(valid[..., s, None], h_new, h)
    return h


def init_attention(store, name, dim, rng):
    for part in ("q", "k", "v", "o"):
        init_linear(store, f"{name}.{part}", dim, dim, rng)


def project_kv(kv, store, name, heads: int):
    """Key/value projections split into heads: each ``(..., H, Nk, dh)``."""
    k = _split_heads(linear(kv, store, f"{name}.k"), heads)
    v = _split_heads(linear(kv, store, f"{name}.v"), heads)
    return k, v


def _split_heads(x, heads):
    *lead, n, d = x.shape
    x = T.reshape(x, tuple(lead) + (n, heads, d // heads))
    return T.swapaxes(x, -2, -3)


def _merge_heads(x):
    *lead, h, n, dh = x.shape
    x = T.swapaxes(x, -2, -3)
    return T.reshape(x, tuple(lead) + (n, h * dh))


def attend(q_in, k, v, key_mask, store, name, heads: int):
    """Multi-head attention of ``q_in`` ``(..., Nq, D)`` over pre-projected keys/values.

    ``key_mask`` ``(..., Nk)`` marks valid keys; invalid keys receive exactly
    zero weight.
    """
    q = _split_heads(linear(q_in, store, f"{name}.q"), heads)
    dh = q.shape[-1]
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
    w = T.softmax(scores, mask=np.broadcast_to(mask, scores.shape))
    return linear(_merge_heads(T.matmul(w, v)), store, f"{name}.o")


def multi_head_attention(q_in, kv, key_mask, store, name, heads: int):
    k, v = project_kv(kv, store, name, heads)
    return attend(q_in, k, v, key_mask, store, name, heads)
