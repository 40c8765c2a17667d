"""Driving-scenario data model, JSON persistence, views and a synthetic generator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import (EgoState, VehicleParams, clamp_controls, controls_from_states, rollout_states,
                       wrap_angle)

SCHEMA_VERSION = "1"
AGENT_KINDS = ("vehicle", "pedestrian", "cyclist")
MAP_KINDS = ("reference_lane", "crosswalk", "stop_line", "road_edge")
SIGNAL_STATES = ("red", "yellow", "green", "unknown")
SCENARIO_KINDS = ("straight_cruise", "lead_follow", "red_light_stop", "curved_lane", "lane_change")
LANE_WIDTH = 3.5


class ScenarioError(ValueError):
    """Schema, reference or parameter error in a scenario."""


def _readonly(arr, shape_tail=None):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AgentTrack:
    id: int
    kind: str
    states: np.ndarray          # (n, 5): x, y, yaw, vx, vy
    footprint: tuple            # (length, width)
    valid: tuple                # [first, last) step indices with valid states

    def __post_init__(self):
        st = _readonly(self.states)
        if st.ndim != 2 or st.shape[1] != 5:
            raise ScenarioError(f"agent {self.id}: states must be (n, 5), got {st.shape}")
        if self.kind not in AGENT_KINDS:
            raise ScenarioError(f"agent {self.id}: unknown kind {self.kind!r}")
        lo, hi = (int(v) for v in self.valid)
        if not 0 <= lo <= hi <= st.shape[0]:
            raise ScenarioError(f"agent {self.id}: bad valid window {self.valid}")
        object.__setattr__(self, "states", st)
        object.__setattr__(self, "footprint", tuple(float(v) for v in self.footprint))
        object.__setattr__(self, "valid", (lo, hi))

    def is_valid(self, step: int) -> bool:
        return self.valid[0] <= step < self.valid[1]

    def valid_mask(self) -> np.ndarray:
        m = np.zeros(self.states.shape[0], dtype=bool)
        m[self.valid[0]:self.valid[1]] = True
        return m

    def speed(self) -> np.ndarray:
        """Signed longitudinal speed per step."""
        s = self.states
        return s[:, 3] * np.cos(s[:, 2]) + s[:, 4] * np.sin(s[:, 2])

    def ego_states(self) -> np.ndarray:
        """``(n, 4)`` bicycle states ``(x, y, yaw, v)``."""
        return np.column_stack([self.states[:, :3], self.speed()])


@dataclass(frozen=True, eq=False)
class MapElement:
    id: int
    kind: str
    polyline: np.ndarray
    speed_limit: float | None = None

    def __post_init__(self):
        pl = _readonly(self.polyline)
        if pl.ndim != 2 or pl.shape[1] != 2 or pl.shape[0] < 2:
            raise ScenarioError(f"map element {self.id}: polyline needs >= 2 (x, y) points")
        if self.kind not in MAP_KINDS:
            raise ScenarioError(f"map element {self.id}: unknown kind {self.kind!r}")
        if self.speed_limit is not None and self.kind != "reference_lane":
            raise ScenarioError(f"map element {self.id}: speed_limit only allowed on reference lanes")
        object.__setattr__(self, "polyline", pl)


@dataclass(frozen=True)
class TrafficSignal:
    stop_line_ref: int
    state_per_step: tuple

    def __post_init__(self):
        states = tuple(self.state_per_step)
        bad = [s for s in states if s not in SIGNAL_STATES]
        if bad:
            raise ScenarioError(f"signal {self.stop_line_ref}: unknown states {sorted(set(bad))}")
        object.__setattr__(self, "state_per_step", states)

    def state_at(self, step: int) -> str:
        if not self.state_per_step:
            return "unknown"
        return self.state_per_step[min(max(step, 0), len(self.state_per_step) - 1)]


@dataclass(frozen=True, eq=False)
class Scenario:
    dt: float
    history_steps: int
    future_steps: int
    ego: AgentTrack
    agents: tuple
    map: tuple
    signals: tuple
    route: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "map", tuple(self.map))
        object.__setattr__(self, "signals", tuple(self.signals))
        object.__setattr__(self, "route", tuple(int(r) for r in self.route))
        object.__setattr__(self, "meta", dict(self.meta))
        validate_scenario(self)

    @property
    def num_steps(self) -> int:
        return self.history_steps + self.future_steps

    @property
    def current_index(self) -> int:
        return self.history_steps - 1

    @property
    def kind(self) -> str | None:
        return self.meta.get("kind")

    def element(self, element_id: int) -> MapElement:
        for e in self.map:
            if e.id == element_id:
                return e
        raise KeyError(element_id)

    def route_lanes(self) -> list[MapElement]:
        return [self.element(i) for i in self.route]

    def stop_lines(self):
        """``(MapElement, TrafficSignal)`` pairs for signalised stop lines."""
        return [(self.element(s.stop_line_ref), s) for s in self.signals]

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "dt": self.dt,
            "history_steps": self.history_steps,
            "future_steps": self.future_steps,
            "ego": _track_to_dict(self.ego),
            "agents": [_track_to_dict(a) for a in self.agents],
            "map": [{"id": e.id, "kind": e.kind, "polyline": e.polyline.tolist(),
                     "speed_limit": e.speed_limit} for e in self.map],
            "signals": [{"stop_line_ref": s.stop_line_ref, "state_per_step": list(s.state_per_step)}
                        for s in self.signals],
            "route": list(self.route),
            "meta": self.meta,
        }

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _track_to_dict(t: AgentTrack) -> dict:
    return {"id": t.id, "kind": t.kind, "states": t.states.tolist(),
            "footprint": list(t.footprint), "valid": list(t.valid)}


def validate_scenario(s: Scenario) -> None:
    if not s.dt > 0:
        raise ScenarioError("dt must be positive")
    if s.history_steps < 2:
        raise ScenarioError("history_steps must be >= 2")
    if s.future_steps < 1:
        raise ScenarioError("future_steps must be >= 1")
    n = s.num_steps
    for t in (s.ego,) + s.agents:
        if t.states.shape[0] != n:
            raise ScenarioError(f"track {t.id}: {t.states.shape[0]} states, expected {n}")
        if not np.all(np.isfinite(t.states[t.valid[0]:t.valid[1]])):
            raise ScenarioError(f"track {t.id}: non-finite states")
    ids = [a.id for a in s.agents] + [s.ego.id]
    if len(set(ids)) != len(ids):
        raise ScenarioError("agent ids must be unique (ego included)")
    if s.ego.valid != (0, n):
        raise ScenarioError("ego track must be valid over the whole scenario")
    elements = {}
    for e in s.map:
        if e.id in elements:
            raise ScenarioError(f"duplicate map element id {e.id}")
        elements[e.id] = e
    for sig in s.signals:
        ref = elements.get(sig.stop_line_ref)
        if ref is None or ref.kind != "stop_line":
            raise ScenarioError(f"signal stop_line_ref {sig.stop_line_ref} does not resolve to a stop line")
        if len(sig.state_per_step) != n:
            raise ScenarioError(f"signal {sig.stop_line_ref}: {len(sig.state_per_step)} states, expected {n}")
    if not s.route:
        raise ScenarioError("route must name at least one reference lane")
    for r in s.route:
        ref = elements.get(r)
        if ref is None or ref.kind != "reference_lane":
            raise ScenarioError(f"route id {r} does not resolve to a reference lane")


# --- JSON ------------------------------------------------------------------------

_TOP_FIELDS = {"version", "dt", "history_steps", "future_steps", "ego", "agents", "map", "signals", "route"}
_TRACK_FIELDS = {"id", "kind", "states", "footprint", "valid"}
_ELEMENT_FIELDS = {"id", "kind", "polyline", "speed_limit"}
_SIGNAL_FIELDS = {"stop_line_ref", "state_per_step"}


def _check_fields(obj, required, where, optional=()):
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where}: expected an object")
    for name in sorted(required):
        if name not in obj:
            raise ScenarioError(f"{where}: missing field {name!r}")
    extra = set(obj) - set(required) - set(optional)
    if extra:
        raise ScenarioError(f"{where}: unknown fields {sorted(extra)}")


def scenario_from_dict(d: dict) -> Scenario:
    _check_fields(d, _TOP_FIELDS, "scenario", optional=("meta",))
    if d["version"] != SCHEMA_VERSION:
        raise ScenarioError(f"scenario: unsupported version {d['version']!r} (expected {SCHEMA_VERSION!r})")

    def track(t, where):
        _check_fields(t, _TRACK_FIELDS, where)
        return AgentTrack(int(t["id"]), t["kind"], np.asarray(t["states"], dtype=np.float64).reshape(-1, 5),
                          tuple(t["footprint"]), tuple(t["valid"]))

    try:
        ego = track(d["ego"], "ego")
        agents = [track(a, f"agents[{i}]") for i, a in enumerate(d["agents"])]
        elements = []
        for i, e in enumerate(d["map"]):
            _check_fields(e, _ELEMENT_FIELDS, f"map[{i}]")
            elements.append(MapElement(int(e["id"]), e["kind"], np.asarray(e["polyline"], dtype=np.float64),
                                       None if e["speed_limit"] is None else float(e["speed_limit"])))
        signals = []
        for i, s in enumerate(d["signals"]):
            _check_fields(s, _SIGNAL_FIELDS, f"signals[{i}]")
            signals.append(TrafficSignal(int(s["stop_line_ref"]), tuple(s["state_per_step"])))
        return Scenario(float(d["dt"]), int(d["history_steps"]), int(d["future_steps"]), ego, agents,
                        elements, signals, tuple(d["route"]), d.get("meta", {}))
    except (TypeError, KeyError) as exc:
        raise ScenarioError(f"scenario: malformed content ({exc})") from None


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(json.dumps(s.to_dict(), indent=None, separators=(",", ":")))


def load_scenario(path) -> Scenario:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
    try:
        return scenario_from_dict(d)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def load_corpus(directory) -> list[Scenario]:
    return [load_scenario(p) for p in sorted(Path(directory).glob("*.json")) if p.name != "manifest.json"]


# --- views -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ContextView:
    """What the planner may see at step ``now``: history window, map, current signals."""
    dt: float
    now: int
    history_steps: int
    ego: AgentTrack                 # history window only, valid over all of it
    ego_state: EgoState
    agents: tuple                   # AgentTrack per agent, history window only
    map: tuple
    signal_states: dict             # stop_line id -> state at ``now``
    route: tuple
    kind: str | None = None

    def route_lanes(self):
        by_id = {e.id: e for e in self.map}
        return [by_id[i] for i in self.route]


@dataclass(frozen=True, eq=False)
class ExpertView:
    """Logged futures from step ``now`` (index 0 is the current state)."""
    dt: float
    now: int
    ego_future: np.ndarray          # (F+1, 4) bicycle states
    agent_futures: dict             # id -> (F+1, 5)
    agent_valid: dict               # id -> (F+1,) bool


def _window_track(t: AgentTrack, lo: int, hi: int, states=None) -> AgentTrack:
    st = t.states[lo:hi] if states is None else states
    valid = (min(max(t.valid[0] - lo, 0), hi - lo), min(max(t.valid[1] - lo, 0), hi - lo))
    if states is not None:
        valid = (0, hi - lo)
    return AgentTrack(t.id, t.kind, np.array(st), t.footprint, valid)


def context_at(s: Scenario, now: int | None = None, ego_history: np.ndarray | None = None) -> ContextView:
    """Context view at absolute step ``now``; ``ego_history`` overrides the logged ego window."""
    now = s.current_index if now is None else now
    H = s.history_steps
    lo, hi = now - H + 1, now + 1
    if lo < 0 or now >= s.num_steps:
        raise ScenarioError(f"context step {now} outside scenario")
    if ego_history is not None:
        ego_history = np.asarray(ego_history, dtype=np.float64)
        if ego_history.shape != (H, 5):
            raise ScenarioError(f"ego_history must be ({H}, 5), got {ego_history.shape}")
    ego = _window_track(s.ego, lo, hi, ego_history)
    cur = ego.states[-1]
    v = cur[3] * np.cos(cur[2]) + cur[4] * np.sin(cur[2])
    agents = tuple(_window_track(a, lo, hi) for a in s.agents)
    signals = {sig.stop_line_ref: sig.state_at(now) for sig in s.signals}
    return ContextView(s.dt, now, H, ego, EgoState(cur[0], cur[1], cur[2], v), agents, s.map,
                       signals, s.route, s.kind)


def expert_at(s: Scenario, now: int | None = None) -> ExpertView:
    now = s.current_index if now is None else now
    ego = np.array(s.ego.ego_states()[now:])
    futures, valid = {}, {}
    for a in s.agents:
        futures[a.id] = np.array(a.states[now:])
        valid[a.id] = a.valid_mask()[now:].copy()
    return ExpertView(s.dt, now, ego, futures, valid)


def split_history_future(s: Scenario):
    """Context view (history window) and expert view (futures) at the current step."""
    return context_at(s), expert_at(s)


def nearest_agents(s, n: int) -> list:
    """Agents ordered by current distance to the ego (ties by id), padded with None to ``n``.

    Accepts a Scenario or a ContextView; agents invalid at the current step are skipped.
    """
    if n < 0:
        raise ScenarioError("n must be >= 0")
    if isinstance(s, Scenario):
        s = context_at(s)
    ex, ey = s.ego.states[-1, :2]
    cands = []
    for a in s.agents:
        if not a.valid_mask()[-1]:
            continue
        d = float(np.hypot(a.states[-1, 0] - ex, a.states[-1, 1] - ey))
        cands.append((d, a.id, a))
    cands.sort(key=lambda c: (c[0], c[1]))
    out = [c[2] for c in cands[:n]]
    return out + [None] * (n - len(out))


# --- polyline helpers --------------------------------------------------------------

def polyline_arclength(pl) -> np.ndarray:
    pl = np.asarray(pl, dtype=np.float64)
    return np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pl, axis=0).T))])


def resample_polyline(pl, n: int) -> np.ndarray:
    pl = np.asarray(pl, dtype=np.float64)
    s = polyline_arclength(pl)
    if s[-1] <= 0:
        return np.repeat(pl[:1], n, axis=0)
    q = np.linspace(0.0, s[-1], n)
    return np.column_stack([np.interp(q, s, pl[:, 0]), np.interp(q, s, pl[:, 1])])


def project_to_polyline(points, pl):
    """Closest-point projection: returns (distance, arclength, signed lateral offset, heading)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pl = np.asarray(pl, dtype=np.float64)
    a, b = pl[:-1], pl[1:]
    ab = b - a
    seg_len2 = np.maximum((ab * ab).sum(-1), 1e-12)
    ap = pts[:, None, :] - a[None]
    u = np.clip((ap * ab).sum(-1) / seg_len2, 0.0, 1.0)
    closest = a[None] + u[..., None] * ab[None]
    d2 = ((pts[:, None, :] - closest) ** 2).sum(-1)
    j = np.argmin(d2, axis=1)
    rows = np.arange(len(pts))
    s = polyline_arclength(pl)
    seg = np.sqrt(seg_len2)
    arc = s[j] + u[rows, j] * seg[j]
    heading = np.arctan2(ab[j, 1], ab[j, 0])
    rel = pts - closest[rows, j]
    lateral = -np.sin(heading) * rel[:, 0] + np.cos(heading) * rel[:, 1]
    return np.sqrt(d2[rows, j]), arc, lateral, heading


def point_at_arclength(pl, s_query):
    """Position and heading at arclength(s) along a polyline (linear extrapolation past the ends)."""
    pl = np.asarray(pl, dtype=np.float64)
    s = polyline_arclength(pl)
    sq = np.asarray(s_query, dtype=np.float64)
    j = np.clip(np.searchsorted(s, sq, side="right") - 1, 0, len(pl) - 2)
    seg = np.maximum(s[j + 1] - s[j], 1e-12)
    u = (sq - s[j]) / seg
    p = pl[j] + u[..., None] * (pl[j + 1] - pl[j])
    d = pl[j + 1] - pl[j]
    return p, np.arctan2(d[..., 1], d[..., 0])


# --- synthetic generator --------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorParams:
    dt: float = 0.1
    history_steps: int = 20
    future_steps: int = 50
    vehicle: VehicleParams = VehicleParams()

    def __post_init__(self):
        if not self.dt > 0 or self.history_steps < 2 or self.future_steps < 1:
            raise ScenarioError("non-physical generator params")


def _seed_rng(kind: str, seed: int):
    return np.random.default_rng(np.random.SeedSequence([SCENARIO_KINDS.index(kind), int(seed) % (1 << 63),
                                                         int(seed < 0)]))


class _Road:
    """Road built in a local frame (x forward, y left), then placed in the world."""

    def __init__(self, rng, centerline):
        self.center = centerline            # (n, 2) local
        self.theta = rng.uniform(-np.pi, np.pi)
        self.origin = rng.uniform(-500.0, 500.0, size=2)

    def offset(self, lateral: float) -> np.ndarray:
        pl = self.center
        d = np.gradient(pl, axis=0)
        nrm = np.column_stack([-d[:, 1], d[:, 0]]) / np.hypot(d[:, 0], d[:, 1])[:, None]
        return pl + lateral * nrm

    def to_world_xy(self, xy):
        c, s = np.cos(self.theta), np.sin(self.theta)
        xy = np.asarray(xy, dtype=np.float64)
        return np.column_stack([c * xy[:, 0] - s * xy[:, 1], s * xy[:, 0] + c * xy[:, 1]]) + self.origin

    def to_world_states(self, st):
        """Local (x, y, yaw, v) -> world (x, y, yaw, vx, vy)."""
        xy = self.to_world_xy(st[:, :2])
        yaw = wrap_angle(st[:, 2] + self.theta)
        v = st[:, 3]
        return np.column_stack([xy, yaw, v * np.cos(yaw), v * np.sin(yaw)])


def _straight(x0=-80.0, x1=280.0, step=2.0):
    x = np.arange(x0, x1 + 1e-9, step)
    return np.column_stack([x, np.zeros_like(x)])


def _curve(kappa, s_c, x0=-80.0, length=360.0, step=2.0):
    s = np.arange(0.0, length + 1e-9, step) + x0
    heading = kappa * np.maximum(s - s_c, 0.0)
    dx, dy = np.cos(heading) * step, np.sin(heading) * step
    x = x0 + np.concatenate([[0.0], np.cumsum(dx[:-1])])
    y = np.concatenate([[0.0], np.cumsum(dy[:-1])])
    return np.column_stack([x, y])


def _pure_pursuit(state, path, lookahead, wheelbase, s_max):
    _, arc, _, _ = project_to_polyline(state[None, :2], path)
    target, _ = point_at_arclength(path, arc[0] + lookahead)
    dx, dy = target[0] - state[0], target[1] - state[1]
    alpha = wrap_angle(np.arctan2(dy, dx) - state[2])
    ld = max(np.hypot(dx, dy), 1e-6)
    return float(np.clip(np.arctan(2.0 * wheelbase * np.sin(alpha) / ld), -s_max, s_max))


def _drive(start, n, policy, vp: VehicleParams, no_reverse=True):
    """Simulate ``n`` states from ``start`` with ``policy(k, state) -> (accel, steer)``."""
    u = np.zeros((n - 1, 2))
    st = np.asarray(start, dtype=np.float64)
    for k in range(n - 1):
        a, s = policy(k, st)
        if no_reverse:
            a = max(a, -st[3] / vp.dt)
        u[k] = clamp_controls(np.array([a, s]), vp)
        st = rollout_states(st, u[k:k + 1], vp)[-1]
    return rollout_states(np.asarray(start, dtype=np.float64), u, vp)


def _lane_keep(path, speed_fn, vp, lookahead_time=1.0):
    def policy(k, st):
        return speed_fn(k, st), _pure_pursuit(st, path, max(6.0, lookahead_time * st[3]), vp.wheelbase, vp.s_max)
    return policy


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def generate_synthetic(kind: str, seed: int, params: GeneratorParams | None = None) -> Scenario:
    """Deterministic synthetic scenario of the given kind."""
    if kind not in SCENARIO_KINDS:
        raise ScenarioError(f"unknown scenario kind {kind!r}; expected one of {SCENARIO_KINDS}")
    p = params or GeneratorParams()
    rng = _seed_rng(kind, seed)
    builder = {"straight_cruise": _gen_straight_cruise, "lead_follow": _gen_lead_follow,
               "red_light_stop": _gen_red_light, "curved_lane": _gen_curved,
               "lane_change": _gen_lane_change}[kind]
    return builder(rng, p, {"kind": kind, "seed": int(seed)})


def _assemble(road, p, ego_local, agents_local, lanes, route, extra_elements=(), signals=(), meta=None):
    """Convert local-frame pieces into a world-frame Scenario."""
    n = p.history_steps + p.future_steps
    vp = p.vehicle
    ego = AgentTrack(0, "vehicle", road.to_world_states(ego_local), (vp.length, vp.width), (0, n))
    agents = []
    for i, (kind, st, fp) in enumerate(agents_local):
        agents.append(AgentTrack(i + 1, kind, road.to_world_states(st), fp, (0, n)))
    elements = []
    for eid, (kind, pl, limit) in enumerate(list(lanes) + list(extra_elements), start=100):
        elements.append(MapElement(eid, kind, road.to_world_xy(pl), limit))
    sigs = [TrafficSignal(100 + len(lanes) + j, tuple(states)) for j, states in signals]
    return Scenario(p.dt, p.history_steps, p.future_steps, ego, agents, elements, sigs,
                    tuple(100 + r for r in route), meta or {})


def _two_lane_road(rng, center, speed_limit, lanes=(0.0, LANE_WIDTH)):
    road = _Road(rng, center)
    lane_pl = [road.offset(off) for off in lanes]
    lo, hi = min(lanes) - LANE_WIDTH / 2, max(lanes) + LANE_WIDTH / 2
    elems = [("reference_lane", pl, speed_limit) for pl in lane_pl]
    edges = [("road_edge", road.offset(lo), None), ("road_edge", road.offset(hi), None)]
    return road, lane_pl, elems, edges


def _cruisers(rng, n, lane_pl, v_ref, vp, p, exclude_x=(), count_range=(0, 3), min_sep=12.0):
    out, used = [], list(exclude_x)
    for _ in range(rng.integers(count_range[0], count_range[1] + 1)):
        for _try in range(20):
            x = rng.uniform(-40.0, 70.0)
            if all(abs(x - u) > min_sep for u in used):
                break
        else:
            continue
        used.append(x)
        pl = lane_pl[rng.integers(len(lane_pl))] if isinstance(lane_pl, list) else lane_pl
        v = max(2.0, v_ref + rng.uniform(-2.0, 2.0))
        start_pt, yaw = point_at_arclength(pl, x - pl[0, 0] - v * (p.history_steps - 1) * p.dt)
        st = _drive(np.array([start_pt[0], start_pt[1], yaw, v]), n, _lane_keep(pl, lambda k, s: 0.0, vp), vp)
        out.append(("vehicle", st, (4.6, 1.9)))
    return out


def _start_on(pl, s_from_start, v):
    pt, yaw = point_at_arclength(pl, s_from_start)
    return np.array([pt[0], pt[1], yaw, v])


def _gen_straight_cruise(rng, p, meta):
    vp = p.vehicle
    n = p.history_steps + p.future_steps
    v0 = rng.uniform(5.0, 15.0)
    road, lane_pl, elems, edges = _two_lane_road(rng, _straight(), speed_limit=round(v0 + 3.0, 1))
    ego_pl = lane_pl[0]
    x_now = 0.0
    x_start = x_now - v0 * (p.history_steps - 1) * p.dt
    ego = _drive(_start_on(ego_pl, x_start - ego_pl[0, 0], v0), n, lambda k, s: (0.0, 0.0), vp)
    agents = _cruisers(rng, n, [lane_pl[1]], v0, vp, p, count_range=(0, 3))
    if rng.random() < 0.5:
        bike_pl = road.offset(-LANE_WIDTH / 2 - 1.6)
        vb = rng.uniform(3.0, 6.0)
        xb = rng.uniform(-10.0, 60.0) - vb * (p.history_steps - 1) * p.dt
        st = _drive(_start_on(bike_pl, xb - bike_pl[0, 0], vb), n, lambda k, s: (0.0, 0.0), vp)
        agents.append(("cyclist", st, (1.8, 0.7)))
    return _assemble(road, p, ego, agents, elems, [0], edges, meta=meta)


def _idm_accel(v, gap, dv, v_des, a=1.5, b=2.0, s0=2.0, headway=1.2):
    s_star = s0 + max(0.0, v * headway + v * dv / (2.0 * np.sqrt(a * b)))
    return a * (1.0 - (v / max(v_des, 0.1)) ** 4 - (s_star / max(gap, 0.1)) ** 2)


def _gen_lead_follow(rng, p, meta):
    vp = p.vehicle
    n = p.history_steps + p.future_steps
    H = p.history_steps
    v0 = rng.uniform(8.0, 14.0)
    v_des = v0 + rng.uniform(0.0, 2.0)
    road, lane_pl, elems, edges = _two_lane_road(rng, _straight(), speed_limit=round(v_des, 2))
    pl = lane_pl[0]
    v_lead = max(4.0, v0 + rng.uniform(-3.0, 1.0))
    lead_len = 4.6
    gap0 = v0 * 1.2 + 2.0 + rng.uniform(3.0, 15.0)
    brake_step = H - 1 + int(rng.uniform(0.5, 4.0) / p.dt) if rng.random() < 0.6 else n + 1
    v_lead_low = v_lead * rng.uniform(0.3, 0.8)

    def lead_speed(k, st):
        if k >= brake_step and st[3] > v_lead_low:
            return -2.0
        return 0.0

    x_ego0 = -v0 * (H - 1) * p.dt
    lead = _drive(_start_on(pl, x_ego0 + gap0 + (vp.length + lead_len) / 2 - pl[0, 0], v_lead), n,
                  lambda k, s: (lead_speed(k, s), 0.0), vp)

    def ego_policy(k, st):
        gap = lead[k, 0] - st[0] - (vp.length + lead_len) / 2
        return float(np.clip(_idm_accel(st[3], gap, st[3] - lead[k, 3], v_des), -6.0, 2.0)), 0.0

    ego = _drive(_start_on(pl, x_ego0 - pl[0, 0], v0), n, ego_policy, vp)
    agents = [("vehicle", lead, (lead_len, 1.9))]
    agents += _cruisers(rng, n, [lane_pl[1]], v0, vp, p, count_range=(0, 2))
    return _assemble(road, p, ego, agents, elems, [0], edges, meta=meta)


def _braking_track(v0, decel, brake_step, n, vp, stop_x):
    """Straight-line track cruising at ``v0`` then braking at ``decel`` to rest at ``stop_x``."""
    def policy(k, st):
        return (-decel if k >= brake_step else 0.0), 0.0
    st = _drive(np.array([0.0, 0.0, 0.0, v0]), n, policy, vp)
    v_end = st[-1, 3]
    # rest position of the discrete braking sequence if it continues past the window
    final_x = st[-1, 0] + (v_end ** 2 / (2 * decel) + v_end * vp.dt / 2 if v_end > 1e-9 else 0.0)
    st[:, 0] += stop_x - final_x
    return st


def _gen_red_light(rng, p, meta):
    vp = p.vehicle
    n = p.history_steps + p.future_steps
    H = p.history_steps
    v0 = rng.uniform(6.0, 12.0)
    decel = rng.uniform(2.0, 2.5)
    # braking onset relative to the current step; the stop completes within 4.6 s
    brake_time = rng.uniform(-4.0, min(2.0, 4.6 - v0 / decel))
    onset = (H - 1) + brake_time / p.dt
    if onset >= 0:
        v_start, brake_step = v0, int(round(onset))
    else:
        v_start, brake_step = max(v0 + decel * onset * p.dt, 0.0), 0
    margin = rng.uniform(1.0, 2.0)             # front bumper to stop line at rest
    road, lane_pl, elems, edges = _two_lane_road(rng, _straight(), speed_limit=round(v0 + 2.0, 1))
    stop_line_x = 40.0
    ego = _braking_track(v_start, decel, brake_step, n, vp, stop_line_x - margin - vp.length / 2)
    agents = []
    if rng.random() < 0.7:
        va = rng.uniform(5.0, 11.0)
        st = _braking_track(va, rng.uniform(2.0, 2.5), max(0, H - 1 + int(rng.uniform(-3.0, 2.0) / p.dt)), n, vp,
                            stop_line_x - rng.uniform(1.0, 2.0) - 2.3)
        st[:, 1] += LANE_WIDTH
        agents.append(("vehicle", st, (4.6, 1.9)))
    if rng.random() < 0.7:
        vw = rng.uniform(1.0, 1.6)
        y0 = -LANE_WIDTH - rng.uniform(0.0, 4.0)
        ped = _drive(np.array([stop_line_x + 4.0, y0, np.pi / 2, vw]), n, lambda k, s: (0.0, 0.0), vp)
        agents.append(("pedestrian", ped, (0.6, 0.6)))
    y_lo, y_hi = -LANE_WIDTH / 2, LANE_WIDTH * 1.5
    stop_line = np.array([[stop_line_x, y_lo], [stop_line_x, y_hi]])
    crosswalk = np.array([[stop_line_x + 2.0, y_lo], [stop_line_x + 2.0, y_hi],
                          [stop_line_x + 6.0, y_hi], [stop_line_x + 6.0, y_lo]])
    extra = edges + [("stop_line", stop_line, None), ("crosswalk", crosswalk, None)]
    signals = [(len(edges), ["red"] * n)]
    return _assemble(road, p, ego, agents, elems, [0], extra, signals, meta=meta)


def _gen_curved(rng, p, meta):
    vp = p.vehicle
    n = p.history_steps + p.future_steps
    H = p.history_steps
    kappa = rng.choice([-1.0, 1.0]) * rng.uniform(1 / 80.0, 1 / 35.0)
    v0 = min(rng.uniform(5.0, 12.0), np.sqrt(2.5 / abs(kappa)))
    s_c = rng.uniform(-10.0, 30.0)
    road, lane_pl, elems, edges = _two_lane_road(rng, _curve(kappa, s_c), speed_limit=round(v0 + 2.0, 1))
    pl = lane_pl[0]
    s_start = 80.0 - v0 * (H - 1) * p.dt
    ego = _drive(_start_on(pl, s_start, v0), n, _lane_keep(pl, lambda k, s: 0.0, vp), vp)
    agents = []
    for _ in range(rng.integers(0, 3)):
        lane = int(rng.integers(2))
        va = v0 + rng.uniform(-1.0, 1.0)
        ahead = rng.uniform(25.0, 50.0) if lane == 0 else rng.uniform(-20.0, 50.0)
        apl = lane_pl[lane]
        st = _drive(_start_on(apl, s_start + ahead + (v0 - va) * (H - 1) * p.dt, va), n,
                    _lane_keep(apl, lambda k, s: 0.0, vp), vp)
        if any(np.min(np.hypot(*(st[:, :2] - o[1][:, :2]).T)) < 8.0 for o in agents):
            continue
        agents.append(("vehicle", st, (4.6, 1.9)))
    return _assemble(road, p, ego, agents, elems, [0], edges, meta=meta)


def _gen_lane_change(rng, p, meta):
    vp = p.vehicle
    n = p.history_steps + p.future_steps
    H = p.history_steps
    side = float(rng.choice([-1.0, 1.0]))
    v0 = rng.uniform(7.0, 13.0)
    road, lane_pl, elems, edges = _two_lane_road(rng, _straight(), speed_limit=round(v0 + 2.0, 1),
                                                 lanes=(0.0, side * LANE_WIDTH))
    start_time = rng.uniform(-3.0, 0.0)         # lane change onset relative to current step
    duration = 4.0
    x_now = 0.0
    x_on = x_now + v0 * start_time
    xs = np.arange(-80.0, 280.0, 1.0)
    target = np.column_stack([xs, side * LANE_WIDTH * _smoothstep((xs - x_on) / (v0 * duration))])
    x_start = x_now - v0 * (H - 1) * p.dt
    ego = _drive(np.array([x_start, float(target[np.searchsorted(xs, x_start), 1]), 0.0, v0]), n,
                 _lane_keep(target, lambda k, s: 0.0, vp, lookahead_time=1.2), vp)
    agents = []
    va = v0 + rng.uniform(-1.0, 1.0)
    ahead = rng.uniform(35.0, 60.0)
    st = _drive(_start_on(lane_pl[1], x_now + ahead - va * (H - 1) * p.dt - lane_pl[1][0, 0], va), n,
                _lane_keep(lane_pl[1], lambda k, s: 0.0, vp), vp)
    agents.append(("vehicle", st, (4.6, 1.9)))
    if rng.random() < 0.5:
        vb = v0 - rng.uniform(1.0, 3.0)
        st = _drive(_start_on(lane_pl[0], x_now + rng.uniform(40.0, 60.0) - vb * (H - 1) * p.dt
                              - lane_pl[0][0, 0], vb), n, _lane_keep(lane_pl[0], lambda k, s: 0.0, vp), vp)
        agents.append(("vehicle", st, (4.6, 1.9)))
    return _assemble(road, p, ego, agents, elems, [0, 1], edges, meta=meta)


def generate_corpus(kinds, count: int, seed: int, params: GeneratorParams | None = None) -> list[Scenario]:
    """``count`` scenarios cycling through ``kinds``; scenario i uses seed ``seed * 100003 + i``."""
    kinds = [kinds] if isinstance(kinds, str) else list(kinds)
    return [generate_synthetic(kinds[i % len(kinds)], seed * 100003 + i, params) for i in range(count)]
