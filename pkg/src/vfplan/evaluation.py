"""Open-loop and closed-loop evaluation: collisions, route exits, signal violations and errors.

Box poses are vehicle centres; the front bumper sits half a length ahead.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Trajectory, VehicleParams, controls_from_states, derivatives_array, rollout_states
from .planner import PlannerConfig, plan
from .encoder import encode_context
from .field import query_velocity
from .scenario import Scenario, context_at, expert_at, point_at_arclength, project_to_polyline

OFF_ROUTE_DISTANCE = 3.5
L2_HORIZONS = (1, 3, 5, 10)
TABLE_COLUMNS = (
    ("count", "N", "{:d}"), ("collision_rate", "CR", "{:.4f}"), ("off_route_rate", "ORR", "{:.4f}"),
    ("tlv_rate", "TLV", "{:.4f}"), ("progress", "Progress", "{:.2f}"), ("acc", "Acc", "{:.3f}"),
    ("jerk", "Jerk", "{:.3f}"), ("lat_acc", "Lat.Acc", "{:.3f}"),
    ("prediction_ade", "minADE(pred)", "{:.3f}"), ("prediction_fde", "minFDE(pred)", "{:.3f}"),
    ("plan_l2_1s", "L2@1s", "{:.4f}"), ("plan_l2_3s", "L2@3s", "{:.4f}"),
    ("plan_l2_5s", "L2@5s", "{:.4f}"), ("plan_l2_10s", "L2@10s", "{:.4f}"),
)


class EvalError(ValueError):
    pass


# --- geometry ---------------------------------------------------------------------

def box_corners(x, y, yaw, length, width) -> np.ndarray:
    """Corners ``(..., 4, 2)`` of oriented rectangles centred at ``(x, y)``."""
    x, y, yaw, length, width = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64)
                                                    for v in (x, y, yaw, length, width)))
    c, s = np.cos(yaw), np.sin(yaw)
    hl, hw = length / 2, width / 2
    local = np.stack([np.stack([hl, hw], -1), np.stack([-hl, hw], -1),
                      np.stack([-hl, -hw], -1), np.stack([hl, -hw], -1)], axis=-2)
    rx = c[..., None] * local[..., 0] - s[..., None] * local[..., 1] + x[..., None]
    ry = s[..., None] * local[..., 0] + c[..., None] * local[..., 1] + y[..., None]
    return np.stack([rx, ry], axis=-1)


def boxes_overlap(a, b) -> np.ndarray:
    """Separating-axis overlap test between rectangles given as corners ``(..., 4, 2)``.

    Touching edges count as overlap.
    """
    a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    hit = np.ones(a.shape[:-2], dtype=bool)
    for poly in (a, b):
        for i in range(2):
            edge = poly[..., i + 1, :] - poly[..., i, :]
            axis = np.stack([-edge[..., 1], edge[..., 0]], axis=-1)
            pa = (a * axis[..., None, :]).sum(-1)
            pb = (b * axis[..., None, :]).sum(-1)
            hit &= ~((pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1)))
    return hit


def _segments_cross(p0, p1, q0, q1) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    d1, d2 = orient(q0, q1, p0), orient(q0, q1, p1)
    d3, d4 = orient(p0, p1, q0), orient(p0, p1, q1)
    return (d1 * d2 <= 0) and (d3 * d4 <= 0) and not (d1 == 0 and d2 == 0)


def front_bumper(states, length: float) -> np.ndarray:
    st = np.asarray(states, dtype=np.float64)
    return st[..., :2] + (length / 2) * np.stack([np.cos(st[..., 2]), np.sin(st[..., 2])], axis=-1)


# --- per-trajectory checks ---------------------------------------------------------

def collision_steps(s: Scenario, states, start_step: int, vehicle: VehicleParams) -> list:
    """Absolute steps (with agent id) where the ego box overlaps a valid agent box.

    ``states[i]`` is the ego state at absolute step ``start_step + i``.
    """
    st = np.asarray(states, dtype=np.float64)
    steps = start_step + np.arange(len(st))
    ego = box_corners(st[:, 0], st[:, 1], st[:, 2], vehicle.length, vehicle.width)
    hits = []
    for a in s.agents:
        ok = (steps < a.states.shape[0]) & (steps >= a.valid[0]) & (steps < a.valid[1])
        if not ok.any():
            continue
        idx = np.flatnonzero(ok)
        ag = a.states[steps[idx]]
        box = box_corners(ag[:, 0], ag[:, 1], ag[:, 2], a.footprint[0], a.footprint[1])
        for j in np.flatnonzero(boxes_overlap(ego[idx], box)):
            hits.append((int(steps[idx[j]]), a.id))
    return sorted(hits)


def route_deviation(s: Scenario, states) -> np.ndarray:
    """Distance from each position to the nearest route lane."""
    pts = np.asarray(states, dtype=np.float64)[:, :2]
    lanes = s.route_lanes()
    if not lanes:
        return np.zeros(len(pts))
    return np.min([project_to_polyline(pts, e.polyline)[0] for e in lanes], axis=0)


def signal_violations(s: Scenario, states, start_step: int, vehicle: VehicleParams) -> list:
    """Absolute steps at which the front bumper crosses a stop line while its signal is red."""
    bumper = front_bumper(states, vehicle.length)
    out = []
    for line, sig in s.stop_lines():
        pl = line.polyline
        for i in range(len(bumper) - 1):
            step = start_step + i + 1
            if sig.state_at(step) != "red":
                continue
            for j in range(len(pl) - 1):
                if _segments_cross(bumper[i], bumper[i + 1], pl[j], pl[j + 1]):
                    out.append((step, line.id))
                    break
    return out


def motion_stats(states, dt: float) -> dict:
    st = np.asarray(states, dtype=np.float64)
    seg = np.hypot(*np.diff(st[:, :2], axis=0).T)
    out = {"progress": float(seg.sum())}
    if len(st) >= 4:
        accel, jerk, yaw_rate, _, _, _ = derivatives_array(st, dt)
        out.update(acc=float(np.abs(accel).mean()), jerk=float(np.abs(jerk[:-1]).mean()),
                   lat_acc=float(np.abs(st[:-1, 3] * yaw_rate).mean()))
    else:
        out.update(acc=0.0, jerk=0.0, lat_acc=0.0)
    return out


# --- reports --------------------------------------------------------------------

@dataclass
class MetricsReport:
    collision_rate: float = 0.0
    off_route_rate: float = 0.0
    tlv_rate: float = 0.0
    progress: float = 0.0
    acc: float = 0.0
    jerk: float = 0.0
    lat_acc: float = 0.0
    prediction_ade: float | None = None
    prediction_fde: float | None = None
    plan_l2_1s: float | None = None
    plan_l2_3s: float | None = None
    plan_l2_5s: float | None = None
    plan_l2_10s: float | None = None
    count: int = 0
    failures: int = 0
    mode: str = ""
    cost_weights: list | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        heads, cells = [], []
        for key, head, fmt in TABLE_COLUMNS:
            v = getattr(self, key)
            heads.append(head)
            cells.append("-" if v is None else fmt.format(v))
        widths = [max(len(h), len(c)) for h, c in zip(heads, cells)]
        line = lambda xs: "  ".join(x.rjust(w) for x, w in zip(xs, widths))
        rows = [f"mode: {self.mode}" if self.mode else "", line(heads), line(cells)]
        if self.cost_weights is not None:
            rows.append("cost weights: " + ", ".join(f"{w:.4g}" for w in self.cost_weights))
        return "\n".join(r for r in rows if r)


def _aggregate(records: list, failures: int, mode: str, weights=None) -> MetricsReport:
    rep = MetricsReport(count=len(records), failures=failures, mode=mode,
                        cost_weights=None if weights is None else [float(w) for w in weights])
    if not records:
        return rep
    for key in ("collision", "off_route", "tlv"):
        setattr(rep, f"{key}_rate", float(np.mean([r[key] for r in records])))
    for key in ("progress", "acc", "jerk", "lat_acc"):
        setattr(rep, key, float(np.mean([r[key] for r in records])))
    for key in ("prediction_ade", "prediction_fde") + tuple(f"plan_l2_{h}s" for h in L2_HORIZONS):
        vals = [r[key] for r in records if r.get(key) is not None]
        setattr(rep, key, float(np.mean(vals)) if vals else None)
    return rep


def _l2_at(states, log_xy, dt):
    """Position error at 1/3/5/10 s where both trajectories reach that far."""
    out = {}
    for h in L2_HORIZONS:
        k = int(round(h / dt))
        key = f"plan_l2_{h}s"
        out[key] = float(np.linalg.norm(states[k, :2] - log_xy[k])) if k < len(states) and k < len(log_xy) else None
    return out


# --- open loop ------------------------------------------------------------------

def _prediction_errors(s: Scenario, res, now: int):
    feats, dec = res.features, res.decoded
    ex = expert_at(s, now)
    errs, finals = [], []
    T = dec.agent_predictions.shape[2]
    for i, aid in enumerate(feats.agent_ids):
        if aid is None:
            continue
        fut = ex.agent_futures[aid][1:T + 1]
        ok = ex.agent_valid[aid][1:T + 1]
        if not ok.any():
            continue
        pred = feats.frame.xy_to_world(dec.agent_predictions[0, i, :len(fut)])
        d = np.linalg.norm(pred - fut[:, :2], axis=-1)
        errs.append(d[ok].mean())
        last = np.flatnonzero(ok)[-1]
        finals.append(d[last])
    if not errs:
        return None, None
    return float(np.mean(errs)), float(np.mean(finals))


def evaluate_plan(s: Scenario, states, now: int, vehicle: VehicleParams) -> dict:
    """Metrics of one planned (or executed) world-frame trajectory starting at absolute step ``now``."""
    st = np.asarray(states, dtype=np.float64)
    log = s.ego.ego_states()[now:]
    rec = {"collision": bool(collision_steps(s, st[1:], now + 1, vehicle)),
           "off_route": bool((route_deviation(s, st) > OFF_ROUTE_DISTANCE).any()),
           "tlv": bool(signal_violations(s, st, now, vehicle))}
    rec.update(motion_stats(st, vehicle.dt))
    rec.update(_l2_at(st, log[:, :2], vehicle.dt))
    return rec


def _check_mode(model, mode):
    # a bad mode is a configuration error, not a per-scenario failure
    if mode not in ("vf", "cf", "eula", "il"):
        raise EvalError(f"unknown mode {mode!r}")
    if mode in ("vf", "cf") and model.field_cfg.mode != mode:
        raise EvalError(f"mode {mode!r} needs a model trained with that field mode, "
                        f"this one has {model.field_cfg.mode!r}")


def open_loop_eval(corpus, model, cfg: PlannerConfig = PlannerConfig(), mode: str = "vf") -> MetricsReport:
    """Plan once per scenario from its history and score against the logs."""
    _check_mode(model, mode)
    records, failures = [], 0
    for s in corpus:
        try:
            now = s.current_index
            res = plan(context_at(s, now), model, cfg, mode)
            rec = evaluate_plan(s, res.trajectory.states, now, model.vehicle)
            rec["prediction_ade"], rec["prediction_fde"] = _prediction_errors(s, res, now)
            records.append(rec)
        except (ValueError, ArithmeticError, RuntimeError):
            failures += 1
    weights = model.cost_weights() if mode in ("vf", "cf") else None
    return _aggregate(records, failures, mode, weights)


# --- closed loop ------------------------------------------------------------------

@dataclass(eq=False)
class ClosedLoopResult:
    executed: Trajectory
    start_step: int
    replans: int
    events: list = field(default_factory=list)     # dicts: step, type, detail
    metrics: dict = field(default_factory=dict)

    @property
    def final_speed(self) -> float:
        return float(self.executed.states[-1, 3])

    def event_types(self) -> set:
        return {e["type"] for e in self.events}


class ExpertReplayPlanner:
    """Planner stub that returns the logged expert controls from the current step."""

    def __init__(self, scenario: Scenario, vehicle: VehicleParams):
        self.log = scenario.ego.ego_states()
        self.vehicle = vehicle

    def __call__(self, view, now: int):
        fut = self.log[now:]
        if len(fut) < 2:
            return np.zeros((1, 2))
        return controls_from_states(fut, self.vehicle)


def _history_row(state):
    x, y, yaw, v = state
    return np.array([x, y, yaw, v * np.cos(yaw), v * np.sin(yaw)])


def closed_loop_rollout(s: Scenario, model, cfg: PlannerConfig = PlannerConfig(), mode: str = "vf",
                        duration: float = 10.0, replan_interval: int = 1, planner=None,
                        vehicle: VehicleParams | None = None) -> ClosedLoopResult:
    """Plan, execute ``replan_interval`` steps, advance the logged agents and repeat.

    ``planner`` overrides the model: a callable ``(view, now) -> (T, 2)`` world-agnostic controls.
    The simulated duration is capped by the logged future. The loop stops
    early after a collision.
    """
    vehicle = vehicle or model.vehicle
    if replan_interval < 1:
        raise EvalError("replan_interval must be >= 1")
    start = s.current_index
    steps = min(int(round(duration / s.dt)), s.future_steps)
    steps -= steps % replan_interval
    hist = np.array(s.ego.states[start - s.history_steps + 1:start + 1])
    state = s.ego.ego_states()[start].copy()
    executed, events, replans = [state.copy()], [], 0
    for k in range(0, steps, replan_interval):
        now = start + k
        view = context_at(s, now, hist)
        if planner is None:
            u = plan(view, model, cfg, mode).controls
        else:
            u = np.asarray(planner(view, now), dtype=np.float64)
        replans += 1
        u = u[:replan_interval]
        if len(u) < replan_interval:
            u = np.concatenate([u, np.zeros((replan_interval - len(u), 2))])
        seg = rollout_states(state, u, vehicle)[1:]
        stop = False
        for j, st in enumerate(seg):
            step = now + j + 1
            prev = executed[-1]
            executed.append(st.copy())
            hist = np.vstack([hist[1:], _history_row(st)])
            for hit_step, aid in collision_steps(s, st[None], step, vehicle):
                events.append({"step": hit_step, "type": "collision", "detail": {"agent": aid}})
                stop = True
            if route_deviation(s, st[None])[0] > OFF_ROUTE_DISTANCE:
                events.append({"step": step, "type": "off_route", "detail": {}})
            for v_step, lid in signal_violations(s, np.stack([prev, st]), step - 1, vehicle):
                events.append({"step": v_step, "type": "tlv", "detail": {"stop_line": lid}})
            if stop:
                break
        state = executed[-1]
        if stop:
            break
    ex = np.array(executed)
    log = s.ego.ego_states()[start:]
    metrics = motion_stats(ex, s.dt)
    metrics.update(_l2_at(ex, log[:, :2], s.dt))
    metrics.update(collision=any(e["type"] == "collision" for e in events),
                   off_route=any(e["type"] == "off_route" for e in events),
                   tlv=any(e["type"] == "tlv" for e in events))
    return ClosedLoopResult(Trajectory(ex, s.dt), start, replans, events, metrics)


def closed_loop_eval(corpus, model, cfg: PlannerConfig = PlannerConfig(), mode: str = "vf",
                     duration: float = 10.0) -> tuple[MetricsReport, list]:
    _check_mode(model, mode)
    records, results, failures = [], [], 0
    for s in corpus:
        try:
            r = closed_loop_rollout(s, model, cfg, mode, duration)
        except (ValueError, ArithmeticError, RuntimeError):
            failures += 1
            results.append(None)
            continue
        results.append(r)
        records.append(dict(r.metrics))
    weights = model.cost_weights() if mode in ("vf", "cf") else None
    return _aggregate(records, failures, mode, weights), results


def stop_line_outcome(s: Scenario, result: ClosedLoopResult, vehicle: VehicleParams) -> dict | None:
    """For signalised scenes: final speed and signed bumper clearance to the first stop line."""
    lines = s.stop_lines()
    if not lines:
        return None
    line, _ = lines[0]
    st = result.executed.states[-1]
    bumper = front_bumper(st, vehicle.length)
    a, b = line.polyline[0], line.polyline[-1]
    heading = np.array([np.cos(st[2]), np.sin(st[2])])
    # signed distance along the heading from the bumper to the line
    d = b - a
    n = np.array([-d[1], d[0]]) / np.linalg.norm(d)
    denom = n @ heading
    clearance = float((n @ (a - bumper)) / denom) if abs(denom) > 1e-9 else float("inf")
    return {"final_speed": float(st[3]), "clearance": clearance,
            "stopped_before_line": bool(st[3] < 0.2 and clearance >= 0.0)}


def timing_probe(model, scenario: Scenario, cfg: PlannerConfig = PlannerConfig(), trials: int = 10,
                 mode: str = "vf") -> dict:
    """Wall-clock seconds of ``plan`` over ``trials`` calls (one warm-up call first)."""
    if trials <= 0:
        return {}
    view = context_at(scenario)
    plan(view, model, cfg, mode)
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        plan(view, model, cfg, mode)
        times.append(time.perf_counter() - t0)
    return {"mean": float(np.mean(times)), "min": float(np.min(times)), "max": float(np.max(times)),
            "trials": trials}


def field_alignment(corpus, model, times=(1.0, 2.0, 3.0), min_speed: float = 1.0) -> np.ndarray:
    """Angle (rad) between the queried field and the lane tangent at probe points.

    Probes are the logged ego positions at ``times`` seconds ahead, projected
    onto the nearest reference lane; probes where the logged speed is below
    ``min_speed`` are skipped.
    """
    angles = []
    for s in corpus:
        view = context_at(s)
        emb = encode_context(view, model.encoder_cfg, model.store)
        frame = emb.features[0].frame
        log = s.ego.ego_states()[s.current_index:]
        lanes = [e.polyline for e in s.map if e.kind == "reference_lane"]
        pts, tangents = [], []
        for t in times:
            k = int(round(t / s.dt))
            if k >= len(log) or log[k, 3] < min_speed:
                continue
            proj = [project_to_polyline(log[k, :2], pl) for pl in lanes]
            j = int(np.argmin([p[0][0] for p in proj]))
            on, heading = point_at_arclength(lanes[j], proj[j][1][0])
            local = frame.xy_to_local(on)
            pts.append([local[0], local[1], t])
            tangents.append(heading - frame.yaw)
        if not pts:
            continue
        v = query_velocity(np.array(pts), emb, model.store, model.field_cfg)
        for vec, tan in zip(v, tangents):
            if v.shape[1] != 2 or np.hypot(*vec) < 1e-6:
                angles.append(np.pi)        # no direction to speak of
                continue
            ang = np.arctan2(vec[1], vec[0]) - tan
            angles.append(abs((ang + np.pi) % (2 * np.pi) - np.pi))
    return np.array(angles)
