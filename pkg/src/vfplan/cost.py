"""Traveling cost from trajectory derivatives and field advice, plus the selection loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dynamics import Trajectory, derivatives_array

COMPONENTS = ("accel_sq", "jerk_sq", "yaw_rate_sq", "yaw_accel_sq", "v_diff_sq")
DEFAULT_WEIGHTS = (0.1, 0.001, 1.0, 0.001, 1.0)


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class CostConfig:
    top_k_for_selection: int = 20
    ade_sharpness: float = 1.0

    def __post_init__(self):
        if self.top_k_for_selection < 2:
            raise CostError("top_k_for_selection must be >= 2")
        if not self.ade_sharpness > 0:
            raise CostError("ade_sharpness must be positive")


def inverse_softplus(w):
    w = np.asarray(w, dtype=np.float64)
    return w + np.log(-np.expm1(-w))


def init_cost(store: ad.ParamStore, weights=DEFAULT_WEIGHTS) -> None:
    store.add("cost.w_raw", inverse_softplus(weights))


def effective_weights(store: ad.ParamStore) -> np.ndarray:
    return np.logaddexp(0.0, store["cost.w_raw"].data)


def _smoothness(states, dt):
    accel, jerk, yaw_rate, yaw_accel, vx, vy = derivatives_array(states, dt)
    d = np.stack([(accel ** 2).sum(-1), (jerk ** 2).sum(-1), (yaw_rate ** 2).sum(-1),
                  (yaw_accel ** 2).sum(-1)], axis=-1)
    return d, np.stack([vx, vy], axis=-1)


def raw_measurements(traj, advised, dt: float | None = None) -> np.ndarray:
    """Five-component measurement vector D for one trajectory.

    ``advised`` is ``(T, 2)`` advised velocities (velocity-field mode) or
    ``(T,)``/``(T, 1)`` scalar field costs (cost-field mode), aligned with
    trajectory steps 1..T.
    """
    if isinstance(traj, Trajectory):
        states, dt = traj.states, traj.dt
    else:
        states = np.asarray(traj, dtype=np.float64)
        if dt is None:
            raise CostError("dt is required when passing a raw state array")
    adv = np.asarray(advised, dtype=np.float64)
    if adv.ndim == 1:
        adv = adv[:, None]
    T = states.shape[0] - 1
    if adv.shape[0] != T or adv.shape[1] not in (1, 2):
        raise CostError(f"advised has shape {adv.shape}, expected ({T}, 2) or ({T}, 1)")
    d, vel = _smoothness(states, dt)
    if adv.shape[1] == 2:
        last = ((vel - adv) ** 2).sum()
    else:
        last = adv[:, 0].sum()
    return np.append(d, last)


def raw_measurements_batch(states, field_out, dt: float):
    """Differentiable D for a batch: ``states`` ``(N, T+1, 4)``, ``field_out`` tensor ``(N, T, k)``.

    The four derivative components are constants; the field term carries
    gradients into the field parameters. Returns a tensor ``(N, 5)``.
    """
    states = np.asarray(states, dtype=np.float64)
    N, T = states.shape[0], states.shape[1] - 1
    if field_out.shape[:2] != (N, T) or field_out.shape[2] not in (1, 2):
        raise CostError(f"field output shape {field_out.shape} does not match samples {(N, T)}")
    d, vel = _smoothness(states, dt)
    if field_out.shape[2] == 2:
        last = ad.squared_difference(field_out, vel).sum(axis=-1).sum(axis=-1, keepdims=True)
    else:
        last = field_out.sum(axis=1)
    return ad.concat([ad.Tensor(d), last], axis=-1)


def smoothness_measurements(states, dt: float) -> np.ndarray:
    """First four components of D for ``(..., T+1, 4)`` states."""
    return _smoothness(np.asarray(states, dtype=np.float64), dt)[0]


def trajectory_cost(d, store_or_weights):
    """Cost ``D . softplus(w_raw)``.

    With a ParamStore the result is a differentiable tensor (``(N,)`` for a
    batch of D); with a plain effective-weight vector it is numpy.
    """
    if isinstance(store_or_weights, ad.ParamStore):
        w = ad.softplus(store_or_weights["cost.w_raw"])
        return (ad.as_tensor(d) * w).sum(axis=-1)
    w = np.asarray(store_or_weights, dtype=np.float64)
    if np.any(w < 0):
        raise CostError("effective weights must be nonnegative")
    return np.asarray(d, dtype=np.float64) @ w


def _minmax(x):
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def ade_distribution(ades, sharpness: float = 1.0) -> np.ndarray:
    z = sharpness * (1.0 - _minmax(np.asarray(ades, dtype=np.float64)))
    e = np.exp(z - z.max())
    return e / e.sum()


def select_top_k(costs, k: int) -> np.ndarray:
    c = np.asarray(costs.data if isinstance(costs, ad.Tensor) else costs, dtype=np.float64)
    return np.argsort(c, kind="stable")[:min(k, c.size)]


def selection_loss(costs, ades, cfg: CostConfig = CostConfig()):
    """Cross-entropy between the cost-induced and ADE-induced distributions over the lowest-cost candidates.

    ``costs`` may be a tensor (gradients flow through the normalisation);
    ``ades`` is a plain array. Returns ``(loss, info)`` with the selected
    indices and both distributions.
    """
    costs = ad.as_tensor(costs)
    ades = np.asarray(ades, dtype=np.float64)
    if costs.ndim != 1 or ades.shape != costs.shape:
        raise CostError(f"costs {costs.shape} and ades {ades.shape} must be matching 1-D arrays")
    if costs.shape[0] < 2:
        raise CostError("selection loss needs at least 2 candidates")
    idx = select_top_k(costs, cfg.top_k_for_selection)
    c = costs[idx]
    p_ade = ade_distribution(ades[idx], cfg.ade_sharpness)
    lo_i, hi_i = int(np.argmin(c.data)), int(np.argmax(c.data))
    span = c.data[hi_i] - c.data[lo_i]
    if span <= 0:
        eta = ad.Tensor(np.zeros(c.shape))
    else:
        eta = (c - c[lo_i]) / (c[hi_i] - c[lo_i])
    logp = ad.log_softmax((1.0 - eta) * cfg.ade_sharpness)
    loss = -(logp * p_ade).sum()
    return loss, {"indices": idx, "p_ade": p_ade, "p_cost": np.exp(logp.data)}


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
