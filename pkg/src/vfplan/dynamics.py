"""Kinematic bicycle model and trajectory/control conversions.

States are stored as ``(..., 4)`` float arrays ordered ``(x, y, yaw, v)``;
controls as ``(..., T, 2)`` arrays ordered ``(accel, steer)``.  The dataclass
wrappers exist for the public API; the batched array functions are what the
planner uses in its inner loop.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOW_SPEED_STEER_THRESHOLD = 0.1  # m/s


class DynamicsError(ValueError):
    """Invalid input to a dynamics routine."""


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.8
    dt: float = 0.1
    a_max: float = 5.0
    s_max: float = 0.5
    length: float = 4.8
    width: float = 2.0

    def __post_init__(self):
        for name in ("wheelbase", "dt", "a_max", "s_max", "length", "width"):
            if not getattr(self, name) > 0:
                raise DynamicsError(f"VehicleParams.{name} must be positive")
        if self.s_max >= np.pi / 2:
            raise DynamicsError("VehicleParams.s_max must be below pi/2")

    @property
    def u_lim(self):
        return np.array([self.a_max, self.s_max])


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    yaw: float
    v: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.yaw, self.v])):
            raise DynamicsError(f"non-finite ego state {self}")
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    @classmethod
    def from_array(cls, arr) -> "EgoState":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.v])

    @property
    def vx(self) -> float:
        return self.v * np.cos(self.yaw)

    @property
    def vy(self) -> float:
        return self.v * np.sin(self.yaw)


@dataclass(frozen=True, eq=False)
class ControlSequence:
    accel: np.ndarray
    steer: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.accel, dtype=np.float64).reshape(-1)
        s = np.asarray(self.steer, dtype=np.float64).reshape(-1)
        if a.shape != s.shape:
            raise DynamicsError(f"accel/steer length mismatch: {a.shape} vs {s.shape}")
        object.__setattr__(self, "accel", a)
        object.__setattr__(self, "steer", s)

    def __len__(self):
        return len(self.accel)

    @classmethod
    def from_array(cls, arr) -> "ControlSequence":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[:, 0], arr[:, 1])

    def to_array(self) -> np.ndarray:
        return np.stack([self.accel, self.steer], axis=-1)

    def clamped(self, params: VehicleParams) -> "ControlSequence":
        return ControlSequence.from_array(clamp_controls(self.to_array(), params))


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray  # (T+1, 4)
    dt: float = 0.1

    def __post_init__(self):
        st = np.asarray(self.states, dtype=np.float64)
        if st.ndim != 2 or st.shape[1] != 4 or st.shape[0] < 2:
            raise DynamicsError(f"trajectory states must be (T+1>=2, 4), got {st.shape}")
        if not self.dt > 0:
            raise DynamicsError("trajectory dt must be positive")
        if not np.all(np.isfinite(st)):
            raise DynamicsError("trajectory contains non-finite states")
        object.__setattr__(self, "states", st)

    def __len__(self):
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1

    @property
    def xy(self) -> np.ndarray:
        return self.states[:, :2]

    def state(self, i: int) -> EgoState:
        return EgoState.from_array(self.states[i])


@dataclass(frozen=True)
class AugmentConfig:
    epsilon: float = 0.1
    u_lim: tuple = (5.0, 0.5)

    def __post_init__(self):
        if self.epsilon < 0:
            raise DynamicsError("augmentation epsilon must be >= 0")


@dataclass(frozen=True, eq=False)
class Derivatives:
    accel: np.ndarray
    jerk: np.ndarray
    yaw_rate: np.ndarray
    yaw_accel: np.ndarray
    vx: np.ndarray
    vy: np.ndarray


def clamp_controls(u, params: VehicleParams) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    np.clip(u[..., 0], -params.a_max, params.a_max, out=out[..., 0])
    np.clip(u[..., 1], -params.s_max, params.s_max, out=out[..., 1])
    return out


def rollout_states(start, controls, params: VehicleParams) -> np.ndarray:
    """Forward-Euler rollout of a batch of control sequences.

    ``start`` is ``(4,)`` or ``(..., 4)``, ``controls`` is ``(..., T, 2)``.
    Returns ``(..., T+1, 4)``.  Controls are clamped before integration.
    """
    start = np.asarray(start, dtype=np.float64)
    raw = np.asarray(controls, dtype=np.float64)
    if not (np.all(np.isfinite(start)) and np.all(np.isfinite(raw))):
        raise DynamicsError("non-finite start state or controls")
    u = clamp_controls(raw, params)
    batch = u.shape[:-2]
    T = u.shape[-2]
    out = np.empty(batch + (T + 1, 4))
    out[..., 0, :] = start
    out[..., 0, 2] = wrap_angle(out[..., 0, 2])
    dt, L = params.dt, params.wheelbase
    x, y, yaw, v = (out[..., 0, i].copy() for i in range(4))
    tan_s = np.tan(u[..., 1])
    for t in range(T):
        x = x + v * np.cos(yaw) * dt
        y = y + v * np.sin(yaw) * dt
        yaw = wrap_angle(yaw + v * tan_s[..., t] / L * dt)
        v = v + u[..., t, 0] * dt
        out[..., t + 1, 0] = x
        out[..., t + 1, 1] = y
        out[..., t + 1, 2] = yaw
        out[..., t + 1, 3] = v
    return out


def rollout_bicycle(start: EgoState, controls: ControlSequence, params: VehicleParams) -> Trajectory:
    if len(controls) < 1:
        raise DynamicsError("control sequence must have at least one step")
    states = rollout_states(start.to_array(), controls.to_array(), params)
    return Trajectory(states, params.dt)


def controls_from_states(states, params: VehicleParams) -> np.ndarray:
    """Invert forward Euler: ``(..., T+1, 4)`` states to ``(..., T, 2)`` controls."""
    st = np.asarray(states, dtype=np.float64)
    dt, L = params.dt, params.wheelbase
    v = st[..., :-1, 3]
    accel = (st[..., 1:, 3] - v) / dt
    dyaw = wrap_angle(st[..., 1:, 2] - st[..., :-1, 2])
    moving = np.abs(v) >= LOW_SPEED_STEER_THRESHOLD
    safe_v = np.where(moving, v, 1.0)
    steer = np.where(moving, np.arctan(dyaw * L / (safe_v * dt)), 0.0)
    return clamp_controls(np.stack([accel, steer], axis=-1), params)


def controls_from_trajectory(traj: Trajectory, params: VehicleParams) -> ControlSequence:
    return ControlSequence.from_array(controls_from_states(traj.states, params))


def augment_history(hist_controls: ControlSequence, start: EgoState, cfg: AugmentConfig,
                    seed: int, params: VehicleParams | None = None) -> Trajectory:
    """Perturb history controls with per-step Gaussian noise and re-roll from the oldest state.

    Noise std is ``epsilon * u_lim`` per axis.  Only the history is produced;
    callers keep the logged future untouched.
    """
    if params is None:
        params = VehicleParams(a_max=cfg.u_lim[0], s_max=cfg.u_lim[1])
    rng = np.random.default_rng(seed)
    u = hist_controls.to_array()
    std = cfg.epsilon * np.asarray(cfg.u_lim, dtype=np.float64)
    noise = rng.standard_normal(u.shape) * std
    return rollout_bicycle(start, ControlSequence.from_array(u + noise), params)


def derivatives_array(states, dt: float):
    """Per-step derivatives of ``(..., T+1, 4)`` states; each output is ``(..., T)``.

    Second differences are zero-padded at the tail.  Velocities are taken at
    states ``1..T`` so they line up with the trajectory points being queried.
    """
    st = np.asarray(states, dtype=np.float64)
    if st.shape[-2] < 4:
        raise DynamicsError(f"need at least 4 states for jerk, got {st.shape[-2]}")
    if not dt > 0:
        raise DynamicsError("dt must be positive")
    accel = np.diff(st[..., 3], axis=-1) / dt
    yaw_rate = wrap_angle(np.diff(st[..., 2], axis=-1)) / dt
    pad = [(0, 0)] * (accel.ndim - 1) + [(0, 1)]
    jerk = np.pad(np.diff(accel, axis=-1) / dt, pad)
    yaw_accel = np.pad(np.diff(yaw_rate, axis=-1) / dt, pad)
    v = st[..., 1:, 3]
    yaw = st[..., 1:, 2]
    return accel, jerk, yaw_rate, yaw_accel, v * np.cos(yaw), v * np.sin(yaw)


def trajectory_derivatives(traj: Trajectory) -> Derivatives:
    return Derivatives(*derivatives_array(traj.states, traj.dt))
