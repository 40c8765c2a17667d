"""Iterative Gaussian-sampling trajectory optimiser with elitist resampling.

Everything here runs in the ego frame at the planning instant. Candidates are
always control sequences rolled through the bicycle model, so every sample is
dynamically feasible by construction.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cost import DEFAULT_WEIGHTS, effective_weights, smoothness_measurements
from .dynamics import (Trajectory, VehicleParams, clamp_controls, controls_from_states, rollout_states,
                       wrap_angle)
from .encoder import ContextFeatures, context_features, decode, encode_features
from .field import prepare_field, query_velocity
from .scenario import ContextView, point_at_arclength, project_to_polyline

PROVENANCE = ("grid", "lattice", "il_guess", "resample")


class PlannerError(ValueError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    sigma_a: float = 1.0
    sigma_s: float = 0.1
    iterations: int = 10
    k_best: int = 10
    children_per_parent: int = 10
    decay: float = 0.5
    accel_levels: tuple = (-3.0, -1.5, 0.0, 1.0, 2.0)
    steer_levels: tuple = (-0.03, -0.01, 0.0, 0.01, 0.03)
    lattice_stations: tuple = (15.0, 30.0, 45.0)
    lattice_offsets: tuple = (-1.0, 0.0, 1.0)
    lattice_speed_factors: tuple = (0.0, 1.0, 1.25)
    allow_reverse: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.k_best < 1 or self.children_per_parent < 0:
            raise PlannerError("iterations >= 1, k_best >= 1 and children_per_parent >= 0 required")
        if not (self.sigma_a > 0 and self.sigma_s > 0):
            raise PlannerError("sigma values must be positive")
        if not 0 < self.decay <= 1:
            raise PlannerError("decay must lie in (0, 1]")
        for name in ("accel_levels", "steer_levels", "lattice_stations", "lattice_offsets",
                     "lattice_speed_factors"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if any(s <= 0 for s in self.lattice_stations):
            raise PlannerError("lattice stations must be positive")

    @property
    def population(self) -> int:
        return self.k_best * (self.children_per_parent + 1)


@dataclass(eq=False)
class SampleSet:
    controls: np.ndarray        # (N, T, 2)
    states: np.ndarray          # (N, T+1, 4)
    costs: np.ndarray           # (N,), NaN until evaluated
    provenance: list

    def __len__(self):
        return self.controls.shape[0]

    @classmethod
    def build(cls, controls, states, tag: str):
        n = controls.shape[0]
        return cls(controls, states, np.full(n, np.nan), [tag] * n)

    def take(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=int)
        return SampleSet(self.controls[idx], self.states[idx], self.costs[idx],
                         [self.provenance[i] for i in idx])

    @staticmethod
    def concat(sets) -> "SampleSet":
        sets = [s for s in sets if len(s)]
        return SampleSet(np.concatenate([s.controls for s in sets]), np.concatenate([s.states for s in sets]),
                         np.concatenate([s.costs for s in sets]), sum((s.provenance for s in sets), []))

    def best(self, k: int) -> np.ndarray:
        return np.argsort(self.costs, kind="stable")[:k]

    def trajectory(self, i: int, dt: float) -> Trajectory:
        return Trajectory(self.states[i], dt)


def project_no_reverse(v0, controls, dt: float) -> np.ndarray:
    """Raise decelerations that would drive the speed below zero so the vehicle stops instead."""
    u = np.array(controls, dtype=np.float64)
    v = np.broadcast_to(np.asarray(v0, dtype=np.float64), u.shape[:-2]).copy()
    for t in range(u.shape[-2]):
        a = np.maximum(u[..., t, 0], -v / dt)
        u[..., t, 0] = a
        v = np.maximum(v + a * dt, 0.0)
    return u


def _finish(start, controls, cfg: PlannerConfig, vehicle: VehicleParams):
    u = clamp_controls(controls, vehicle)
    if not cfg.allow_reverse:
        u = project_no_reverse(start[3], u, vehicle.dt)
    return u, rollout_states(start, u, vehicle)


def grid_samples(start, cfg: PlannerConfig, vehicle: VehicleParams, horizon: int) -> SampleSet:
    a, s = np.meshgrid(cfg.accel_levels, cfg.steer_levels, indexing="ij")
    pairs = np.stack([a.ravel(), s.ravel()], axis=-1)
    u = np.repeat(pairs[:, None, :], horizon, axis=1)
    return SampleSet.build(*_finish(start, u, cfg, vehicle), "grid")


def lattice_path(start, lane, station, offset, v_end, horizon: int, dt: float):
    """Geometric path from ``start`` to ``(station, offset, v_end)`` relative to ``lane``.

    The speed changes at a constant rate until the station is reached and is
    then held; the lateral offset follows a cubic smoothstep in arclength.
    Returns positions ``(T+1, 2)`` and the time the target is reached.
    """
    _, arc, lat, _ = project_to_polyline(start[None, :2], lane)
    s0, d0 = arc[0], lat[0]
    v0 = max(float(start[3]), 0.0)
    t = np.arange(horizon + 1) * dt
    if v0 + v_end < 1e-9:
        s, tau = np.zeros_like(t), np.inf
    else:
        acc = (v_end ** 2 - v0 ** 2) / (2.0 * station)
        tau = 2.0 * station / (v0 + v_end)
        s = np.where(t <= tau, v0 * t + 0.5 * acc * t ** 2, station + v_end * (t - tau))
    u = np.clip(s / station, 0.0, 1.0)
    d = d0 + (offset - d0) * (3 * u ** 2 - 2 * u ** 3)
    p, heading = point_at_arclength(lane, s0 + s)
    normal = np.stack([-np.sin(heading), np.cos(heading)], axis=-1)
    return p + normal * d[:, None], tau


def _path_states(start, path, dt):
    chords = np.diff(path, axis=0)
    speed = np.hypot(chords[:, 0], chords[:, 1]) / dt
    yaw = np.arctan2(chords[:, 1], chords[:, 0])
    for k in range(len(yaw)):
        if speed[k] < 1e-6:
            yaw[k] = yaw[k - 1] if k else start[2]
    st = np.empty((len(path), 4))
    st[:, :2] = path
    st[:-1, 2], st[-1, 2] = yaw, yaw[-1]
    st[:-1, 3], st[-1, 3] = speed, speed[-1]
    st[0] = start
    yaw_c = start[2] + np.concatenate([[0.0], np.cumsum(wrap_angle(np.diff(st[:, 2])))])
    st[:, 2] = wrap_angle(yaw_c)
    return st


def lattice_samples(start, lane, cfg: PlannerConfig, vehicle: VehicleParams, horizon: int) -> SampleSet:
    v_ref = max(float(start[3]), 2.0)
    ctrls = []
    for station in cfg.lattice_stations:
        for offset in cfg.lattice_offsets:
            for f in cfg.lattice_speed_factors:
                path, _ = lattice_path(start, lane, station, offset, f * v_ref, horizon, vehicle.dt)
                ctrls.append(controls_from_states(_path_states(start, path, vehicle.dt), vehicle))
    return SampleSet.build(*_finish(start, np.array(ctrls), cfg, vehicle), "lattice")


def initial_samples(guesses, start, cfg: PlannerConfig, vehicle: VehicleParams, lane=None):
    """Grid, lattice and imitation-guess candidates. Returns ``(SampleSet, lattice_skipped)``."""
    guesses = np.asarray(guesses, dtype=np.float64)
    if guesses.ndim != 3 or guesses.shape[0] < 1:
        raise PlannerError("at least one initial-guess control sequence (M, T, 2) is required")
    T = guesses.shape[1]
    start = np.asarray(start, dtype=np.float64)
    parts = [grid_samples(start, cfg, vehicle, T)]
    skipped = lane is None
    if not skipped:
        parts.append(lattice_samples(start, lane, cfg, vehicle, T))
    parts.append(SampleSet.build(*_finish(start, guesses, cfg, vehicle), "il_guess"))
    return SampleSet.concat(parts), skipped


def perturb(parents: SampleSet, iteration: int, cfg: PlannerConfig, rng, start, vehicle: VehicleParams) -> SampleSet:
    """Parents unchanged followed by ``children_per_parent`` noisy children each."""
    if iteration < 1:
        raise PlannerError("perturb starts at iteration 1")
    P, T, _ = parents.controls.shape
    C = cfg.children_per_parent
    sigma = np.array([cfg.sigma_a, cfg.sigma_s])
    if iteration == 1:
        noise = rng.standard_normal((P, C, 1, 2)) * sigma
    else:
        noise = rng.standard_normal((P, C, T, 2)) * sigma * cfg.decay ** (iteration - 1)
    u = (parents.controls[:, None] + noise).reshape(P * C, T, 2)
    children = SampleSet.build(*_finish(np.asarray(start, dtype=np.float64), u, cfg, vehicle), "resample")
    return SampleSet.concat([parents, children])


@dataclass(eq=False)
class OptimizeResult:
    best_index: int
    population: SampleSet
    initial: SampleSet
    best_costs: list
    counts: list
    evaluations: int


def optimize(start, guesses, evaluator, cfg: PlannerConfig, vehicle: VehicleParams, lane=None, rng=None):
    """Run the sampler from ``start`` (ego frame) and return the final population."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    start = np.asarray(start, dtype=np.float64)
    pop, skipped = initial_samples(guesses, start, cfg, vehicle, lane)
    evals = _evaluate(pop, evaluator)
    initial = pop.take(np.arange(len(pop)))
    best_costs, counts = [float(pop.costs.min())], [len(pop)]
    for it in range(1, cfg.iterations + 1):
        pop = perturb(pop.take(pop.best(cfg.k_best)), it, cfg, rng, start, vehicle)
        evals += _evaluate(pop, evaluator)
        best_costs.append(float(pop.costs.min()))
        counts.append(len(pop))
    res = OptimizeResult(int(pop.best(1)[0]), pop, initial, best_costs, counts, evals)
    res.lattice_skipped = skipped
    return res


def _evaluate(pop: SampleSet, evaluator) -> int:
    todo = np.flatnonzero(np.isnan(pop.costs))
    if len(todo):
        c = np.asarray(evaluator(pop.states[todo]), dtype=np.float64)
        if c.shape != (len(todo),) or not np.all(np.isfinite(c)):
            raise PlannerError("evaluator returned non-finite or mis-shaped costs")
        pop.costs[todo] = c
    return len(todo)


# --- cost evaluators ---------------------------------------------------------------

class StubEvaluator:
    """Sum of squared distances to a fixed target trajectory."""
    mode = "stub"

    def __init__(self, target_states):
        self.target = np.asarray(target_states, dtype=np.float64)

    def __call__(self, states):
        d = states[:, 1:, :2] - self.target[None, 1:, :2]
        return (d ** 2).sum(axis=(1, 2))


class FieldEvaluator:
    """Learned traveling cost: smoothness terms plus field disagreement, weighted by the learned weights."""

    def __init__(self, model, emb, b: int = 0):
        self.model = model
        self.mode = "velocity_field" if model.field_cfg.mode == "vf" else "cost_field"
        with ad.no_grad():
            self.fctx = prepare_field(emb, model.store, model.field_cfg, b)
        self.w = effective_weights(model.store)

    def measurements(self, states):
        dt = self.model.vehicle.dt
        N, T = states.shape[0], states.shape[1] - 1
        t = np.broadcast_to(np.arange(1, T + 1) * dt, (N, T))
        pts = np.concatenate([states[:, 1:, :2], t[..., None]], axis=-1).reshape(-1, 3)
        out = query_velocity(pts, self.fctx, self.model.store, self.model.field_cfg).reshape(N, T, -1)
        d = smoothness_measurements(states, dt)
        if out.shape[-1] == 2:
            v = states[:, 1:, 3]
            yaw = states[:, 1:, 2]
            vel = np.stack([v * np.cos(yaw), v * np.sin(yaw)], axis=-1)
            last = ((vel - out) ** 2).sum(-1).sum(-1)
        else:
            last = out[..., 0].sum(-1)
        return np.concatenate([d, last[:, None]], axis=1)

    def __call__(self, states):
        return self.measurements(states) @ self.w


@dataclass(frozen=True)
class EuclideanWeights:
    smooth: tuple = DEFAULT_WEIGHTS[:4]
    proximity: float = 10.0
    lateral: float = 0.1
    hinge: float = 5.0
    min_distance: float = 0.1


class EuclideanEvaluator:
    """Hand-weighted smoothness, inverse-distance proximity to predicted agents and lane offset."""
    mode = "euclidean"

    def __init__(self, predictions, lane=None, dt: float = 0.1, weights: EuclideanWeights = EuclideanWeights()):
        self.pred = np.asarray(predictions, dtype=np.float64).reshape(-1, *np.shape(predictions)[-2:]) \
            if np.size(predictions) else np.zeros((0, 0, 2))
        self.lane = lane
        self.dt = dt
        self.w = weights

    def components(self, states):
        smooth = smoothness_measurements(states, self.dt) @ np.asarray(self.w.smooth)
        pos = states[:, 1:, :2]
        prox = np.zeros(len(states))
        if self.pred.shape[0]:
            T = min(pos.shape[1], self.pred.shape[1])
            d = np.linalg.norm(pos[:, None, :T] - self.pred[None, :, :T], axis=-1)
            pen = np.maximum(1.0 / np.maximum(d, self.w.min_distance) - 1.0 / self.w.hinge, 0.0)
            prox = pen.sum(axis=(1, 2))
        lat = np.zeros(len(states))
        if self.lane is not None:
            _, _, off, _ = project_to_polyline(pos.reshape(-1, 2), self.lane)
            lat = (off.reshape(pos.shape[:2]) ** 2).sum(-1)
        return smooth, prox, lat

    def __call__(self, states):
        smooth, prox, lat = self.components(states)
        return smooth + self.w.proximity * prox + self.w.lateral * lat


def euclidean_evaluator(feats: ContextFeatures, predictions, dt: float = 0.1, route=()) -> EuclideanEvaluator:
    """Evaluator over valid agent predictions ``(Na, T, 2)`` in the ego frame."""
    keep = [i for i, a in enumerate(feats.agent_ids) if a is not None]
    pred = np.asarray(predictions)[keep] if keep else np.zeros((0, 0, 2))
    return EuclideanEvaluator(pred, reference_lane(feats, route), dt)


def reference_lane(feats: ContextFeatures, route):
    """Destination (last) route lane as an ego-frame polyline, or None."""
    for rid in reversed(tuple(route)):
        pl = feats.local_map.get(rid)
        if pl is not None and len(pl) >= 2:
            return pl
    return None


# --- full planning call --------------------------------------------------------------

@dataclass(eq=False)
class PlanResult:
    trajectory: Trajectory          # world frame
    local_states: np.ndarray        # (T+1, 4) ego frame
    controls: np.ndarray            # (T, 2)
    diagnostics: dict
    features: ContextFeatures
    decoded: object = None
    search: OptimizeResult | None = None

    def __iter__(self):
        return iter((self.trajectory, self.diagnostics))


def plan(view: ContextView, model, cfg: PlannerConfig = PlannerConfig(), evaluator="vf", rng=None,
         guesses=None) -> PlanResult:
    """Encode the context once, sample, evaluate and return the minimum-cost candidate.

    ``evaluator`` is ``"vf"``/``"cf"`` (the model's field), ``"eula"``, ``"il"``
    (highest-probability imitation guess, no sampling) or any callable mapping
    ``(N, T+1, 4)`` ego-frame states to costs. ``guesses`` replaces the decoded
    initial guesses when given.
    """
    t0 = time.perf_counter()
    ecfg, vehicle = model.encoder_cfg, model.vehicle
    feats = context_features(view, ecfg)
    with ad.no_grad():
        emb = encode_features([feats], ecfg, model.store)
        dec = decode(emb, ecfg, model.store, vehicle)
    start = np.array([0.0, 0.0, 0.0, feats.speed])
    u_guess = dec.controls[0] if guesses is None else np.asarray(guesses, dtype=np.float64)
    diag = {"mode": evaluator if isinstance(evaluator, str) else getattr(evaluator, "mode", "custom")}
    if evaluator == "il":
        m = int(np.argmax(dec.mode_probs[0]))
        u, st = _finish(start, u_guess[m], cfg, vehicle)
        diag.update({"iterations": [], "best_costs": [], "counts": [], "evaluations": 0,
                     "winner_provenance": "il_guess", "winner_mode": m,
                     "timing_s": time.perf_counter() - t0})
        return PlanResult(Trajectory(feats.frame.states_to_world(st), vehicle.dt), st, u, diag, feats, dec)
    lane = reference_lane(feats, view.route)
    if evaluator in ("vf", "cf"):
        if evaluator != model.field_cfg.mode:
            raise PlannerError(f"evaluator {evaluator!r} needs a model trained with that field mode, "
                               f"this one has {model.field_cfg.mode!r}")
        ev = FieldEvaluator(model, emb)
    elif evaluator == "eula":
        ev = euclidean_evaluator(feats, dec.agent_predictions[0], vehicle.dt, view.route)
    elif callable(evaluator):
        ev = evaluator
    else:
        raise PlannerError(f"unknown evaluator {evaluator!r}")
    res = optimize(start, u_guess, ev, cfg, vehicle, lane, rng)
    i = res.best_index
    st = res.population.states[i]
    diag.update({
        "iterations": list(range(cfg.iterations + 1)),
        "best_costs": res.best_costs,
        "counts": res.counts,
        "evaluations": res.evaluations,
        "initial_count": len(res.initial),
        "winner_provenance": res.population.provenance[i],
        "winner_cost": float(res.population.costs[i]),
        "lattice_skipped": res.lattice_skipped,
        "timing_s": time.perf_counter() - t0,
    })
    return PlanResult(Trajectory(feats.frame.states_to_world(st), vehicle.dt), st,
                      res.population.controls[i].copy(), diag, feats, dec, res)
