"""Two-stage training: imitation pre-training, then field, cost and imitation jointly."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, TrainConfig
from .cost import raw_measurements_batch, selection_loss, trajectory_cost
from .dynamics import AugmentConfig, ControlSequence, EgoState, augment_history, controls_from_states
from .encoder import ContextEmbedding, context_features, decode, encode_features, il_loss, il_targets
from .field import field_loss, prepare_field, sample_field
from .model import ModelConfig, PlanningModel
from .planner import FieldEvaluator, PlannerConfig, SampleSet, optimize, reference_lane
from .scenario import Scenario, context_at, expert_at

CSV_FIELDS = ("stage", "epoch", "step", "total", "il", "vf", "imitation", "correction", "sele")
STAGE1_PREFIXES = ("encoder.", "decoder.")


class TrainError(ValueError):
    pass


def model_config(run: RunConfig) -> ModelConfig:
    return ModelConfig(run.encoder, run.vehicle, run.field_mode)


def _rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed % (2 ** 63), *keys]))


def training_view(s: Scenario, run: RunConfig, rng):
    """Context view at the current step, with the ego history perturbed with probability ``augment_prob``."""
    tc = run.train
    now = s.current_index
    if tc.augment_epsilon <= 0 or rng.random() >= tc.augment_prob:
        return context_at(s, now)
    H = s.history_steps
    hist = s.ego.ego_states()[now - H + 1:now + 1]
    u = controls_from_states(hist, run.vehicle)
    cfg = AugmentConfig(tc.augment_epsilon, (run.vehicle.a_max, run.vehicle.s_max))
    traj = augment_history(ControlSequence.from_array(u), EgoState.from_array(hist[0]), cfg,
                           int(rng.integers(2 ** 62)), run.vehicle)
    st = traj.states
    if np.any(st[:, 3] < 0):
        return context_at(s, now)
    rows = np.column_stack([st[:, :3], st[:, 3] * np.cos(st[:, 2]), st[:, 3] * np.sin(st[:, 2])])
    return context_at(s, now, rows)


def _batches(n: int, size: int, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def stage1_step(model: PlanningModel, scenarios, views, tc: TrainConfig, update: bool = True) -> dict:
    ecfg = model.encoder_cfg
    feats = [context_features(v, ecfg) for v in views]
    experts = [expert_at(s) for s in scenarios]
    model.store.zero_grad()
    emb = encode_features(feats, ecfg, model.store)
    out = decode(emb, ecfg, model.store, model.vehicle)
    loss, comps = il_loss(out, il_targets(feats, experts, ecfg))
    if update:
        ad.backward(loss)
        names = [n for n in model.store if n.startswith(STAGE1_PREFIXES)]
        ad.adamw_step(model.store, tc.lr, weight_decay=tc.weight_decay, names=names)
    return {"total": loss.item(), "il": loss.item()}


def search_candidates(model: PlanningModel, emb, b: int, pcfg: PlannerConfig, rng, route):
    """No-gradient sampling search for one scene; returns the final population joined with the initial set."""
    feats = emb.features[b]
    with ad.no_grad():
        dec = decode(emb, model.encoder_cfg, model.store, model.vehicle)
    ev = FieldEvaluator(model, emb, b)
    start = np.array([0.0, 0.0, 0.0, feats.speed])
    res = optimize(start, dec.controls[b], ev, pcfg, model.vehicle, reference_lane(feats, route), rng)
    return SampleSet.concat([res.population, res.initial])


def stage2_losses(model: PlanningModel, emb, b: int, samples: SampleSet, expert_local, top_k: int,
                  cost_cfg, with_vf: bool):
    """Field and selection losses for scene ``b`` of a batched embedding."""
    fcfg, dt = model.field_cfg, model.vehicle.dt
    fctx = prepare_field(emb, model.store, fcfg, b)
    comps = {}
    total = ad.Tensor(0.0)
    if with_vf:
        lvf, parts = field_loss(samples.states, expert_local, fctx, model.store, fcfg, dt)
        total = total + lvf
        comps.update(vf=lvf.item(), **parts)
    ades = np.linalg.norm(samples.states[:, 1:, :2] - expert_local[None, 1:, :2], axis=-1).mean(-1)
    idx = np.argsort(samples.costs, kind="stable")[:top_k]
    field_out = sample_field(samples.states[idx], fctx, model.store, fcfg, dt)
    costs = trajectory_cost(raw_measurements_batch(samples.states[idx], field_out, dt), model.store)
    lsel, _ = selection_loss(costs, ades[idx], cost_cfg)
    comps["sele"] = lsel.item()
    return total + lsel, comps


def stage2_step(model: PlanningModel, scenarios, views, run: RunConfig, rng, update: bool = True) -> dict:
    ecfg, tc = model.encoder_cfg, run.train
    pcfg = PlannerConfig(**{**run.planner.__dict__, "iterations": tc.stage2_iterations})
    feats = [context_features(v, ecfg) for v in views]
    experts = [expert_at(s) for s in scenarios]
    with ad.no_grad():
        emb0 = encode_features(feats, ecfg, model.store)
    cand = [search_candidates(model, emb0, b, pcfg, rng, v.route) for b, v in enumerate(views)]
    model.store.zero_grad()
    emb = encode_features(feats, ecfg, model.store)
    out = decode(emb, ecfg, model.store, model.vehicle)
    l_il, _ = il_loss(out, il_targets(feats, experts, ecfg))
    total = l_il
    logs = {"il": l_il.item(), "vf": 0.0, "imitation": 0.0, "correction": 0.0, "sele": 0.0}
    T = ecfg.horizon
    scale = 1.0 / len(views)
    # field and cost losses train the field head and cost weights on frozen context tokens
    frozen = ContextEmbedding(ad.Tensor(emb.tokens.data), emb.mask, emb.roles, emb.features)
    for b, (f, ex) in enumerate(zip(feats, experts)):
        exp_local = f.frame.states_to_local(ex.ego_future[:T + 1])
        lb, comps = stage2_losses(model, frozen, b, cand[b], exp_local, run.cost.top_k_for_selection, run.cost,
                                  with_vf=model.field_cfg.mode == "vf")
        total = total + lb * scale
        for k, v in comps.items():
            logs[k] += v * scale
    if update:
        ad.backward(total)
        ad.adamw_step(model.store, tc.lr, weight_decay=tc.weight_decay)
    logs["total"] = total.item()
    return logs


@dataclass
class TrainResult:
    model: PlanningModel
    history: list
    checkpoint: Path | None


def _epoch_plan(run: RunConfig):
    tc = run.train
    plan = [(1, e) for e in range(1, tc.stage1_epochs + 1)]
    if not tc.stage1_only:
        plan += [(2, e) for e in range(1, tc.stage2_epochs + 1)]
    return plan


def train(corpus, run: RunConfig, out_dir=None, model: PlanningModel | None = None, resume=None,
          log=None) -> TrainResult:
    """Run both stages over ``corpus``, writing per-epoch checkpoints and a loss CSV to ``out_dir``.

    ``resume`` is a checkpoint written by a previous call; training continues
    with the epoch after the one it records.
    """
    corpus = list(corpus)
    if not corpus:
        raise TrainError("training corpus is empty")
    T = run.encoder.horizon
    for s in corpus:
        if s.future_steps < T or s.history_steps < 2:
            raise TrainError(f"scenario future ({s.future_steps}) shorter than the horizon ({T})")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history, done = [], None
    if resume is not None:
        model, meta = PlanningModel.load(resume)
        done = (meta["stage"], meta["epoch"])
        history = list(meta.get("history", []))
    elif model is None:
        model = PlanningModel(model_config(run), seed=run.seed)
    tc = run.train
    last_ckpt = None
    step = history[-1]["step"] if history else 0
    for stage, epoch in _epoch_plan(run):
        if done is not None and (stage, epoch) <= tuple(done):
            continue
        rng = _rng(run.seed, stage, epoch)
        sums, n = {}, 0
        for idx in _batches(len(corpus), tc.batch_size, rng):
            scen = [corpus[i] for i in idx]
            views = [training_view(s, run, rng) for s in scen]
            if stage == 1:
                logs = stage1_step(model, scen, views, tc)
            else:
                logs = stage2_step(model, scen, views, run, rng)
            step += 1
            for k, v in logs.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
        row = {"stage": stage, "epoch": epoch, "step": step}
        row.update({k: sums.get(k, 0.0) / n for k in CSV_FIELDS[3:]})
        history.append(row)
        if log is not None:
            log(row)
        if out is not None:
            meta = {"stage": stage, "epoch": epoch, "history": history, "config": run.to_dict()}
            last_ckpt = out / f"stage{stage}_epoch{epoch:03d}.ckpt"
            model.save(last_ckpt, meta)
            model.save(out / "latest.ckpt", meta)
            write_loss_csv(history, out / "losses.csv")
    return TrainResult(model, history, last_ckpt)


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k, "") for k in CSV_FIELDS})
