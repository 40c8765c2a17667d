"""Vectorised context encoder and multi-modal decoder.

All features live in the ego frame at the planning instant (ego at the origin
facing +x), so the embedding is invariant to where the scene sits in the world.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import nn
from .dynamics import VehicleParams, rollout_states, wrap_angle
from .scenario import (AGENT_KINDS, MAP_KINDS, SIGNAL_STATES, ContextView, nearest_agents,
                       point_at_arclength, polyline_arclength, project_to_polyline)

POS_SCALE = 0.05
VEL_SCALE = 0.1
MAP_POINTS = 10
TRACK_FEATURES = 12
MAP_FEATURES = 2 * MAP_POINTS + len(MAP_KINDS) + len(SIGNAL_STATES) + 2
MAP_BEHIND, MAP_AHEAD, MAP_RADIUS = 20.0, 80.0, 80.0


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    attn_heads: int = 4
    gru_layers: int = 1
    num_modes: int = 3
    max_agents: int = 10
    max_map_elements: int = 16
    horizon: int = 50

    def __post_init__(self):
        if self.embed_dim % self.attn_heads:
            raise EncoderError("embed_dim must be divisible by attn_heads")
        if self.num_modes < 1 or self.gru_layers < 1 or self.horizon < 2:
            raise EncoderError("num_modes, gru_layers >= 1 and horizon >= 2 required")

    @property
    def num_tokens(self) -> int:
        return 1 + self.max_agents + self.max_map_elements


class Frame:
    """Rigid transform into the ego frame at the planning instant."""

    def __init__(self, x, y, yaw):
        self.x, self.y, self.yaw = float(x), float(y), float(yaw)
        self.c, self.s = np.cos(self.yaw), np.sin(self.yaw)

    def xy_to_local(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        dx, dy = xy[..., 0] - self.x, xy[..., 1] - self.y
        return np.stack([self.c * dx + self.s * dy, -self.s * dx + self.c * dy], axis=-1)

    def xy_to_world(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return np.stack([self.c * xy[..., 0] - self.s * xy[..., 1] + self.x,
                         self.s * xy[..., 0] + self.c * xy[..., 1] + self.y], axis=-1)

    def vec_to_local(self, v):
        v = np.asarray(v, dtype=np.float64)
        return np.stack([self.c * v[..., 0] + self.s * v[..., 1], -self.s * v[..., 0] + self.c * v[..., 1]], axis=-1)

    def yaw_to_local(self, yaw):
        return wrap_angle(np.asarray(yaw) - self.yaw)

    def states_to_world(self, st):
        """Local ``(..., 4)`` bicycle states to world coordinates."""
        out = np.array(st, dtype=np.float64)
        out[..., :2] = self.xy_to_world(st[..., :2])
        out[..., 2] = wrap_angle(st[..., 2] + self.yaw)
        return out

    def states_to_local(self, st):
        out = np.array(st, dtype=np.float64)
        out[..., :2] = self.xy_to_local(st[..., :2])
        out[..., 2] = self.yaw_to_local(st[..., 2])
        return out


@dataclass(eq=False)
class ContextFeatures:
    """Raw encoder inputs for one scene."""
    frame: Frame
    speed: float
    tracks: np.ndarray          # (1+Na, H, TRACK_FEATURES)
    track_valid: np.ndarray     # (1+Na, H)
    map_feats: np.ndarray       # (Nm, MAP_FEATURES)
    token_mask: np.ndarray      # (1+Na+Nm,)
    agent_ids: list             # Na entries, None for padding
    map_ids: list               # Nm entries, None for padding
    agent_now: np.ndarray       # (Na, 2) local position at the current step
    agent_vel: np.ndarray       # (Na, 2) local velocity at the current step
    local_map: dict             # element id -> local polyline (uncropped)


@dataclass(eq=False)
class ContextEmbedding:
    tokens: "ad.Tensor"         # (B, N, D)
    mask: np.ndarray            # (B, N)
    roles: list                 # per token: "ego" | ("agent", id) | ("map", id) | None
    features: list              # ContextFeatures per batch entry

    @property
    def batch(self) -> int:
        return self.mask.shape[0]


@dataclass(eq=False)
class DecoderOutput:
    controls: np.ndarray        # (B, M, T, 2)
    trajectories: np.ndarray    # (B, M, T+1, 4) local frame
    mode_probs: np.ndarray      # (B, M)
    agent_predictions: np.ndarray  # (B, Na, T, 2) local frame
    positions: "ad.Tensor"      # (B, M, T, 2) differentiable rollout positions
    mode_logits: "ad.Tensor"    # (B, M)
    predictions: "ad.Tensor"    # (B, Na, T, 2)


def _track_features(states, valid, kind_index, footprint, frame: Frame):
    xy = frame.xy_to_local(states[:, :2]) * POS_SCALE
    yaw = frame.yaw_to_local(states[:, 2])
    vel = frame.vec_to_local(states[:, 3:5]) * VEL_SCALE
    f = np.zeros((states.shape[0], TRACK_FEATURES))
    f[:, 0:2] = xy
    f[:, 2] = np.cos(yaw)
    f[:, 3] = np.sin(yaw)
    f[:, 4:6] = vel
    f[:, 6 + kind_index] = 1.0
    f[:, 10] = footprint[0] / 5.0
    f[:, 11] = footprint[1] / 2.0
    f[~valid] = 0.0
    return f


def _crop_element(e, frame: Frame):
    """Local resampled polyline for a map element, or None when out of range."""
    local = frame.xy_to_local(e.polyline)
    dist, arc, _, _ = project_to_polyline(np.zeros((1, 2)), local)
    if dist[0] > MAP_RADIUS:
        return None
    if e.kind in ("reference_lane", "road_edge"):
        total = polyline_arclength(local)[-1]
        lo = max(arc[0] - MAP_BEHIND, 0.0)
        hi = min(arc[0] + MAP_AHEAD, total)
        if hi - lo < 1e-6:
            return None
        pts, _ = point_at_arclength(local, np.linspace(lo, hi, MAP_POINTS))
        return pts
    s = polyline_arclength(local)
    pts, _ = point_at_arclength(local, np.linspace(0.0, s[-1], MAP_POINTS))
    return pts


def context_features(view: ContextView, cfg: EncoderConfig) -> ContextFeatures:
    es = view.ego_state
    frame = Frame(es.x, es.y, es.yaw)
    H = view.history_steps
    Na, Nm = cfg.max_agents, cfg.max_map_elements
    tracks = np.zeros((1 + Na, H, TRACK_FEATURES))
    valid = np.zeros((1 + Na, H), dtype=bool)
    ego_valid = view.ego.valid_mask()
    tracks[0] = _track_features(view.ego.states, ego_valid, 0, view.ego.footprint, frame)
    valid[0] = ego_valid
    agent_ids, agent_now, agent_vel = [], np.zeros((Na, 2)), np.zeros((Na, 2))
    for i, a in enumerate(nearest_agents(view, Na)):
        if a is None:
            agent_ids.append(None)
            continue
        m = a.valid_mask()
        tracks[1 + i] = _track_features(a.states, m, 1 + AGENT_KINDS.index(a.kind), a.footprint, frame)
        valid[1 + i] = m
        agent_ids.append(a.id)
        agent_now[i] = frame.xy_to_local(a.states[-1, :2])
        agent_vel[i] = frame.vec_to_local(a.states[-1, 3:5])
    map_feats = np.zeros((Nm, MAP_FEATURES))
    map_ids, local_map = [], {}
    route = list(view.route)
    kept = []
    for e in view.map:
        local_map[e.id] = frame.xy_to_local(e.polyline)
        pts = _crop_element(e, frame)
        if pts is not None:
            kept.append((e, pts))
    if len(kept) > Nm:
        raise EncoderError(f"{len(kept)} map elements in range exceed max_map_elements={Nm}")
    for j, (e, pts) in enumerate(kept):
        f = map_feats[j]
        f[:2 * MAP_POINTS] = (pts * POS_SCALE).reshape(-1)
        o = 2 * MAP_POINTS
        f[o + MAP_KINDS.index(e.kind)] = 1.0
        o += len(MAP_KINDS)
        if e.id in view.signal_states:
            f[o + SIGNAL_STATES.index(view.signal_states[e.id])] = 1.0
        o += len(SIGNAL_STATES)
        # destination lane 1, earlier route lanes 0.5
        f[o] = 1.0 if route and e.id == route[-1] else (0.5 if e.id in route else 0.0)
        f[o + 1] = (e.speed_limit or 0.0) * VEL_SCALE
        map_ids.append(e.id)
    map_ids += [None] * (Nm - len(kept))
    token_mask = np.concatenate([[True], [i is not None for i in agent_ids], [i is not None for i in map_ids]])
    return ContextFeatures(frame, float(es.v), tracks, valid, map_feats, token_mask, agent_ids, map_ids,
                           agent_now, agent_vel, local_map)


def init_encoder(store: ad.ParamStore, cfg: EncoderConfig, rng) -> None:
    D = cfg.embed_dim
    for layer in range(cfg.gru_layers):
        nn.init_gru(store, f"encoder.gru{layer}", TRACK_FEATURES if layer == 0 else D, D, rng)
    nn.init_mlp(store, "encoder.track_mlp", D, D, D, rng)
    nn.init_mlp(store, "encoder.map_mlp", MAP_FEATURES, D, D, rng)
    nn.init_attention(store, "encoder.attn", D, rng)


def init_decoder(store: ad.ParamStore, cfg: EncoderConfig, rng) -> None:
    D, M, T = cfg.embed_dim, cfg.num_modes, cfg.horizon
    nn.init_mlp(store, "decoder.plan", D, D, 2 * T, rng, zero_last=True, stack=M)
    nn.init_linear(store, "decoder.mode", D, M, rng, zero=True)
    nn.init_mlp(store, "decoder.pred", D, D, 2 * T, rng, zero_last=True)


def encode_features(feats: list, cfg: EncoderConfig, store: ad.ParamStore) -> ContextEmbedding:
    tracks = np.stack([f.tracks for f in feats])
    valid = np.stack([f.track_valid for f in feats])
    map_feats = np.stack([f.map_feats for f in feats])
    mask = np.stack([f.token_mask for f in feats])
    D = cfg.embed_dim
    seq = ad.Tensor(tracks)
    for layer in range(cfg.gru_layers):
        name = f"encoder.gru{layer}"
        if layer == cfg.gru_layers - 1:
            h = nn.gru(seq, valid, store, name, D)
        else:
            outs, h = [], ad.Tensor(np.zeros(tracks.shape[:2] + (D,)))
            for s in range(tracks.shape[2]):
                h = ad.where(valid[..., s, None], nn.gru_cell(seq[..., s, :], h, store, name), h)
                outs.append(h)
            seq = ad.stack(outs, axis=-2)
    track_tok = nn.mlp(h, store, "encoder.track_mlp")
    map_tok = nn.mlp(ad.Tensor(map_feats), store, "encoder.map_mlp")
    tokens = ad.concat([track_tok, map_tok], axis=1)
    keep = mask[..., None]
    tokens = ad.where(keep, tokens, 0.0)
    tokens = tokens + nn.multi_head_attention(tokens, tokens, mask, store, "encoder.attn", cfg.attn_heads)
    tokens = ad.where(keep, tokens, 0.0)
    roles = []
    for f in feats:
        r = ["ego"] + [("agent", i) if i is not None else None for i in f.agent_ids]
        r += [("map", i) if i is not None else None for i in f.map_ids]
        roles.append(r)
    return ContextEmbedding(tokens, mask, roles, list(feats))


def encode_context(views, cfg: EncoderConfig, store: ad.ParamStore) -> ContextEmbedding:
    """Encode one ContextView or a list of them into a batched embedding."""
    if isinstance(views, ContextView):
        views = [views]
    return encode_features([context_features(v, cfg) for v in views], cfg, store)


def rollout_tensor(start, controls, vehicle: VehicleParams):
    """Differentiable forward-Euler rollout; returns positions ``(..., T, 2)`` for steps 1..T.

    ``start`` is a numpy ``(B, 4)`` array, ``controls`` a tensor ``(B, M, T, 2)``.
    """
    dt, L = vehicle.dt, vehicle.wheelbase
    B, M, T, _ = controls.shape
    start = np.asarray(start, dtype=np.float64)
    a, s = controls[..., 0], controls[..., 1]

    def first(col):
        return ad.Tensor(np.broadcast_to(start[:, col][:, None, None], (B, M, 1)))

    v_next = first(3) + ad.cumsum(a, axis=-1) * dt
    v_prev = ad.concat([first(3), v_next[..., :-1]], axis=-1)
    yaw_next = first(2) + ad.cumsum(v_prev * ad.tan(s) * (dt / L), axis=-1)
    yaw_prev = ad.concat([first(2), yaw_next[..., :-1]], axis=-1)
    x = first(0) + ad.cumsum(v_prev * ad.cos(yaw_prev) * dt, axis=-1)
    y = first(1) + ad.cumsum(v_prev * ad.sin(yaw_prev) * dt, axis=-1)
    return ad.stack([x, y], axis=-1)


def decode(emb: ContextEmbedding, cfg: EncoderConfig, store: ad.ParamStore,
           vehicle: VehicleParams, start=None) -> DecoderOutput:
    """Initial-guess controls per mode, mode probabilities and agent predictions (ego frame).

    ``start`` defaults to the ego at the origin with its current speed.
    """
    B, M, T = emb.batch, cfg.num_modes, cfg.horizon
    if start is None:
        start = np.array([[0.0, 0.0, 0.0, f.speed] for f in emb.features])
    ego = emb.tokens[:, 0, :]
    raw = nn.mlp(ad.reshape(ego, (1, B, cfg.embed_dim)), store, "decoder.plan")      # (M, B, 2T)
    raw = ad.swapaxes(ad.reshape(raw, (M, B, T, 2)), 0, 1)                             # (B, M, T, 2)
    lim = np.array([vehicle.a_max, vehicle.s_max])
    controls = ad.tanh(raw) * lim
    positions = rollout_tensor(start, controls, vehicle)
    logits = nn.linear(ego, store, "decoder.mode")
    probs = ad.softmax(logits)
    Na = cfg.max_agents
    agent_tok = emb.tokens[:, 1:1 + Na, :]
    pred_raw = ad.reshape(nn.mlp(agent_tok, store, "decoder.pred"), (B, Na, T, 2)) * (1.0 / POS_SCALE)
    t = (np.arange(1, T + 1) * vehicle.dt)[None, None, :, None]
    now = np.stack([f.agent_now for f in emb.features])[:, :, None, :]
    vel = np.stack([f.agent_vel for f in emb.features])[:, :, None, :]
    predictions = pred_raw + (now + vel * t)
    u = controls.data
    trajs = rollout_states(np.broadcast_to(start[:, None, :], (B, M, 4)), u, vehicle)
    return DecoderOutput(u, trajs, probs.data.copy(), predictions.data.copy(), positions, logits, predictions)


@dataclass
class ILTargets:
    """Supervision in the ego frame: expert positions and agent futures for steps 1..T."""
    expert_xy: np.ndarray       # (B, T, 2)
    agent_xy: np.ndarray        # (B, Na, T, 2)
    agent_mask: np.ndarray      # (B, Na, T)


def il_targets(feats: list, experts: list, cfg: EncoderConfig) -> ILTargets:
    T, Na = cfg.horizon, cfg.max_agents
    B = len(feats)
    exy = np.zeros((B, T, 2))
    axy = np.zeros((B, Na, T, 2))
    am = np.zeros((B, Na, T), dtype=bool)
    for b, (f, ex) in enumerate(zip(feats, experts)):
        fut = ex.ego_future[1:T + 1, :2]
        if len(fut) < T:
            raise EncoderError(f"expert future has {len(fut)} steps, horizon is {T}")
        exy[b] = f.frame.xy_to_local(fut)
        for i, aid in enumerate(f.agent_ids):
            if aid is None:
                continue
            st = ex.agent_futures[aid][1:T + 1]
            ok = ex.agent_valid[aid][1:T + 1]
            n = len(st)
            axy[b, i, :n] = f.frame.xy_to_local(st[:, :2])
            am[b, i, :n] = ok
    return ILTargets(exy, axy, am)


def il_loss(out: DecoderOutput, targets: ILTargets, delta: float = 1.0):
    """Imitation loss: closest-mode plan ADE/FDE, agent prediction ADE and mode cross-entropy.

    Returns ``(total, components)`` where components holds floats per term and
    the chosen target modes.
    """
    pos = out.positions
    B, M, T, _ = pos.shape
    gt = targets.expert_xy
    plan_err = np.linalg.norm(pos.data - gt[:, None], axis=-1).mean(-1)                  # (B, M)
    am = targets.agent_mask
    pred_err = np.linalg.norm(out.predictions.data - targets.agent_xy, axis=-1)
    n_valid = np.maximum(am.sum(axis=(1, 2)), 1)
    pred_ade = (pred_err * am).sum(axis=(1, 2)) / n_valid                                  # (B,)
    target = np.argmin(plan_err + pred_ade[:, None], axis=1)
    rows = np.arange(B)
    chosen = pos[rows, target]                                                             # (B, T, 2)
    diff = chosen - gt
    l_ade = ad.huber(diff, delta).sum(axis=-1).mean()
    l_fde = ad.huber(diff[:, -1, :], delta).sum(axis=-1).mean()
    if am.any():
        per = ad.huber(out.predictions - targets.agent_xy, delta).sum(axis=-1)            # (B, Na, T)
        l_pre = (per * am).sum() * (1.0 / am.sum())
    else:
        l_pre = ad.Tensor(0.0)
    logp = ad.log_softmax(out.mode_logits)
    l_modal = -logp[rows, target].mean()
    total = l_ade + l_fde + l_pre + l_modal
    comps = {"plan_ade": l_ade.item(), "plan_fde": l_fde.item(), "pred_ade": l_pre.item(),
             "modal": l_modal.item(), "target_modes": target}
    return total, comps
