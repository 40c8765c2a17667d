"""Context-conditioned velocity / correction field and its training losses.

The field maps a query point ``(x, y, t)`` in the ego frame to an advised
velocity ``(vx, vy)`` (VF mode) or a scalar cost (CF mode), attending over the
scene tokens. Queries never attend to each other, so each output depends only
on its own point and the context.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import nn
from .dynamics import wrap_angle
from .encoder import POS_SCALE, ContextEmbedding

QUERY_FEATURES = 5
VELOCITY_SCALE = 10.0
CHUNK = 256         # differentiable path
FAST_CHUNK = 1024   # frozen-parameter numpy path


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class FieldConfig:
    mode: str = "vf"            # "vf" velocity field, "cf" scalar cost field
    embed_dim: int = 64
    attn_heads: int = 4
    time_scale: float = 0.2     # seconds -> feature units

    def __post_init__(self):
        if self.mode not in ("vf", "cf"):
            raise FieldError(f"unknown field mode {self.mode!r}")

    @property
    def out_dim(self) -> int:
        return 2 if self.mode == "vf" else 1


@dataclass(eq=False)
class FieldContext:
    """Pre-projected keys/values of one scene, reused across query batches."""
    k: "ad.Tensor"      # (H, Nk, dh)
    v: "ad.Tensor"
    mask: np.ndarray    # (Nk,)

    def valid_kv(self):
        """Keys and values of the valid tokens only, as plain arrays."""
        return self.k.data[:, self.mask, :], self.v.data[:, self.mask, :]


def init_field(store: ad.ParamStore, cfg: FieldConfig, rng) -> None:
    D = cfg.embed_dim
    nn.init_mlp(store, "field.query", QUERY_FEATURES, D, D, rng)
    nn.init_attention(store, "field.attn", D, rng)
    nn.init_mlp(store, "field.out", D, D, cfg.out_dim, rng, zero_last=True)


def prepare_field(emb: ContextEmbedding, store: ad.ParamStore, cfg: FieldConfig, b: int = 0) -> FieldContext:
    mask = np.asarray(emb.mask[b], dtype=bool)
    if not mask.any():
        raise FieldError("field context has no valid tokens")
    k, v = nn.project_kv(emb.tokens[b], store, "field.attn", cfg.attn_heads)
    return FieldContext(k, v, mask)


def query_features(points, cfg: FieldConfig) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise FieldError(f"query points must have shape (N, 3), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise FieldError("query points must be finite")
    t = p[:, 2] * cfg.time_scale
    return np.stack([p[:, 0] * POS_SCALE, p[:, 1] * POS_SCALE, t, np.sin(p[:, 2]), np.cos(p[:, 2])], axis=1)


def _query_chunk(feats, fctx: FieldContext, store, cfg):
    q = nn.mlp(ad.Tensor(feats), store, "field.query")
    h = q + nn.attend(q, fctx.k, fctx.v, fctx.mask, store, "field.attn", cfg.attn_heads)
    out = nn.mlp(h, store, "field.out")
    if cfg.mode == "vf":
        return out * VELOCITY_SCALE
    return ad.softplus(out)


def query_field(points, ctx, store: ad.ParamStore, cfg: FieldConfig):
    """Field values at ``points`` ``(N, 3)`` as a tensor ``(N, 2)`` or ``(N, 1)``.

    ``ctx`` is a FieldContext or a ContextEmbedding (its first scene is used).
    Queries are evaluated in fixed-size chunks so results do not depend on how
    many points are asked for at once.
    """
    fctx = ctx if isinstance(ctx, FieldContext) else prepare_field(ctx, store, cfg)
    feats = query_features(points, cfg)
    n = feats.shape[0]
    if n == 0:
        return ad.Tensor(np.zeros((0, cfg.out_dim)))
    parts = []
    for lo in range(0, n, CHUNK):
        chunk = feats[lo:lo + CHUNK]
        m = chunk.shape[0]
        if m < CHUNK:
            chunk = np.concatenate([chunk, np.zeros((CHUNK - m, QUERY_FEATURES))])
        out = _query_chunk(chunk, fctx, store, cfg)
        parts.append(out[:m] if m < CHUNK else out)
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


def _mlp_np(x, store, name):
    h = np.tanh(x @ store[f"{name}.0.w"].data + store[f"{name}.0.b"].data)
    return h @ store[f"{name}.1.w"].data + store[f"{name}.1.b"].data


def _fast_chunk(feats, k, v, store, cfg):
    heads = cfg.attn_heads
    n, D = feats.shape[0], cfg.embed_dim
    q = _mlp_np(feats, store, "field.query")
    qh = (q @ store["field.attn.q.w"].data + store["field.attn.q.b"].data)
    qh = qh.reshape(n, heads, D // heads).transpose(1, 0, 2)
    s = np.matmul(qh, k.transpose(0, 2, 1)) * (1.0 / np.sqrt(D // heads))
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    att = np.matmul(s, v).transpose(1, 0, 2).reshape(n, D)
    h = q + (att @ store["field.attn.o.w"].data + store["field.attn.o.b"].data)
    out = _mlp_np(h, store, "field.out")
    if cfg.mode == "vf":
        return out * VELOCITY_SCALE
    return np.logaddexp(0.0, out)


def query_velocity(points, ctx, store: ad.ParamStore, cfg: FieldConfig) -> np.ndarray:
    """Field values at ``points`` ``(N, 3)`` as a plain array, for frozen parameters.

    Same function as :func:`query_field` without gradient tracking; masked
    context tokens are dropped outright instead of being weighted by zero.
    """
    if not isinstance(ctx, FieldContext):
        with ad.no_grad():
            ctx = prepare_field(ctx, store, cfg)
    feats = query_features(points, cfg)
    k, v = ctx.valid_kv()
    n = feats.shape[0]
    out = np.empty((n, cfg.out_dim))
    for lo in range(0, n, FAST_CHUNK):
        chunk = feats[lo:lo + FAST_CHUNK]
        m = chunk.shape[0]
        if m < FAST_CHUNK:
            chunk = np.concatenate([chunk, np.zeros((FAST_CHUNK - m, QUERY_FEATURES))])
        out[lo:lo + m] = _fast_chunk(chunk, k, v, store, cfg)[:m]
    if not np.all(np.isfinite(out)):
        raise FieldError("field produced non-finite values")
    return out


def _sample_queries(samples, dt):
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 3 or s.shape[-1] != 4 or s.shape[1] < 3:
        raise FieldError(f"samples must have shape (N, T+1, 4) with T >= 2, got {s.shape}")
    N, T1, _ = s.shape
    t = np.broadcast_to(np.arange(1, T1)[None, :] * dt, (N, T1 - 1))
    pts = np.concatenate([s[:, 1:, :2], t[..., None]], axis=-1).reshape(-1, 3)
    return s, pts


def sample_field(samples, ctx, store, cfg: FieldConfig, dt: float):
    """Field output at every sample position for steps 1..T, shaped ``(N, T, out_dim)``."""
    s, pts = _sample_queries(samples, dt)
    out = query_field(pts, ctx, store, cfg)
    return ad.reshape(out, (s.shape[0], s.shape[1] - 1, cfg.out_dim))


def advised_velocities(samples, ctx, store, cfg: FieldConfig, dt: float):
    if cfg.mode != "vf":
        raise FieldError("field losses require a velocity field")
    return sample_field(samples, ctx, store, cfg, dt)


def _check_expert(samples, expert):
    e = np.asarray(expert, dtype=np.float64)
    if e.shape != samples.shape[1:]:
        raise FieldError(f"expert shape {e.shape} does not match sample shape {samples.shape[1:]}")
    return e


def imitation_loss(samples, expert, ctx, store, cfg: FieldConfig, dt: float, advised=None):
    """Discounted squared gap between the advised velocity and each sample's own velocity.

    Each step ``t = 1..T`` of each sample is weighted by
    ``exp(-|(dx, dy, dyaw)| / 2)`` against the expert at ``t``; the mean runs
    over ``N * T`` terms.
    """
    s = np.asarray(samples, dtype=np.float64)
    e = _check_expert(s, expert)
    if advised is None:
        advised = advised_velocities(s, ctx, store, cfg, dt)
    v, yaw = s[:, 1:, 3], s[:, 1:, 2]
    own = np.stack([v * np.cos(yaw), v * np.sin(yaw)], axis=-1)              # (N, T, 2)
    dpos = s[:, 1:, :2] - e[None, 1:, :2]
    dyaw = wrap_angle(s[:, 1:, 2] - e[None, 1:, 2])
    w = np.exp(-np.sqrt((dpos ** 2).sum(-1) + dyaw ** 2) / 2.0)
    return (ad.squared_difference(advised, own).sum(axis=-1) * w).mean()


def correction_loss(samples, expert, ctx, store, cfg: FieldConfig, dt: float, advised=None):
    """Discounted distance between the advised velocity and the velocity that reaches the expert's next point.

    The target at step ``t < T`` is ``(expert[t+1] - sample[t]) / dt``,
    weighted by ``exp(-|sample[t] - expert[t]| / 2)``; the mean runs over
    ``N * (T - 1)`` terms.
    """
    s = np.asarray(samples, dtype=np.float64)
    e = _check_expert(s, expert)
    if advised is None:
        advised = advised_velocities(s, ctx, store, cfg, dt)
    p = s[:, 1:-1, :2]                       # sample steps 1..T-1
    target = (e[None, 2:, :2] - p) / dt
    w = np.exp(-np.linalg.norm(p - e[None, 1:-1, :2], axis=-1) / 2.0)
    gap = ad.sqrt(ad.squared_difference(advised[:, :-1, :], target).sum(axis=-1))
    return (gap * w).mean()


def field_loss(samples, expert, ctx, store, cfg: FieldConfig, dt: float):
    """Imitation plus correction loss; returns ``(total, {"imitation": .., "correction": ..})``."""
    s = np.asarray(samples, dtype=np.float64)
    advised = advised_velocities(s, ctx, store, cfg, dt)
    li = imitation_loss(s, expert, ctx, store, cfg, dt, advised=advised)
    lc = correction_loss(s, expert, ctx, store, cfg, dt, advised=advised)
    return li + lc, {"imitation": li.item(), "correction": lc.item()}
