"""Command-line entry point: gen-data, train, plan, rollout, eval, plot."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, save_config
from .scenario import SCENARIO_KINDS, GeneratorParams, ScenarioError, generate_synthetic, load_corpus, load_scenario, save_scenario

ERROR_PREFIX = "vfplan-error:"


class CLIError(ValueError):
    pass


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("VFPLAN_OUT_DIR")
    if not out:
        raise CLIError("no output location: pass --out or set VFPLAN_OUT_DIR")
    return Path(out)


def _threads(args):
    n = args.threads if args.threads is not None else os.environ.get("VFPLAN_THREADS")
    if n is None:
        return nullcontext()
    n = int(n)
    if n < 1:
        raise CLIError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "mode", None):
        cfg = dataclasses.replace(cfg, mode=args.mode)
    cfg.validate_paths()
    return cfg


def _model(args, cfg: RunConfig):
    from .model import PlanningModel
    from .training import model_config
    if getattr(args, "checkpoint", None):
        if not Path(args.checkpoint).exists():
            raise CLIError(f"checkpoint not found: {args.checkpoint}")
        return PlanningModel.load(args.checkpoint)[0]
    return PlanningModel(model_config(cfg), seed=cfg.seed)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"not serialisable: {type(x)}")


# --- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    kinds = list(SCENARIO_KINDS) if args.kind in ("mixed", "all") else args.kind.split(",")
    for k in kinds:
        if k not in SCENARIO_KINDS:
            raise CLIError(f"unknown scenario kind {k!r}; choose from {', '.join(SCENARIO_KINDS)} or mixed")
    if args.count < 0:
        raise CLIError("--count must be >= 0")
    params = GeneratorParams(future_steps=args.future_steps)
    out.mkdir(parents=True, exist_ok=True)
    files, per_kind = [], {k: 0 for k in kinds}
    for i in range(args.count):
        kind = kinds[i % len(kinds)]
        s = generate_synthetic(kind, args.seed * 100003 + i, params)
        name = f"scenario_{i:05d}_{kind}.json"
        save_scenario(s, out / name)
        files.append(name)
        per_kind[kind] += 1
    manifest = {"count": args.count, "seed": args.seed, "kinds": per_kind, "files": files,
                "future_steps": args.future_steps}
    _write_json(out / "manifest.json", manifest)
    print(json.dumps(manifest, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .training import train
    cfg = _config(args)
    if args.stage1_only or args.stage1_epochs is not None or args.stage2_epochs is not None:
        tc = cfg.train
        tc = dataclasses.replace(
            tc, stage1_only=args.stage1_only or tc.stage1_only,
            stage1_epochs=tc.stage1_epochs if args.stage1_epochs is None else args.stage1_epochs,
            stage2_epochs=tc.stage2_epochs if args.stage2_epochs is None else args.stage2_epochs)
        cfg = dataclasses.replace(cfg, train=tc)
    corpus_dir = args.corpus or cfg.train_corpus
    if not corpus_dir:
        raise CLIError("no training corpus: set train_corpus in the config or pass --corpus")
    corpus = load_corpus(corpus_dir)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    res = train(corpus, cfg, out, resume=args.resume,
                log=lambda row: print(json.dumps(row, sort_keys=True), flush=True))
    res.model.save(out / "model.ckpt", {"history": res.history, "config": cfg.to_dict()}, optimizer_state=False)
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "epochs": len(res.history)}))
    return 0


def _evaluator(args, cfg, scenario):
    if args.evaluator == "stub":
        from .encoder import Frame
        from .planner import StubEvaluator
        cur = scenario.ego.ego_states()[scenario.current_index]
        T = cfg.encoder.horizon
        log = scenario.ego.ego_states()[scenario.current_index:scenario.current_index + T + 1]
        return StubEvaluator(Frame(cur[0], cur[1], cur[2]).states_to_local(log))
    return cfg.mode


def cmd_plan(args) -> int:
    from .planner import plan
    from .scenario import context_at
    cfg = _config(args)
    s = load_scenario(args.scenario)
    model = _model(args, cfg)
    res = plan(context_at(s), model, cfg.planner, _evaluator(args, cfg, s))
    # wall time stays off the deterministic outputs
    diag = {k: v for k, v in res.diagnostics.items() if k != "timing_s"}
    out = _out_dir(args)
    _write_json(out / "plan.json", {"trajectory": res.trajectory.states, "controls": res.controls,
                                    "diagnostics": diag})
    print(json.dumps(diag, sort_keys=True, default=_jsonable))
    print(f"plan time {res.diagnostics['timing_s']:.4f} s", file=sys.stderr)
    return 0


def cmd_rollout(args) -> int:
    from .evaluation import closed_loop_rollout, stop_line_outcome
    cfg = _config(args)
    s = load_scenario(args.scenario)
    model = _model(args, cfg)
    r = closed_loop_rollout(s, model, cfg.planner, cfg.mode, duration=cfg.closed_loop_seconds)
    rec = {"executed": r.executed.states, "start_step": r.start_step, "replans": r.replans,
           "events": r.events, "metrics": r.metrics, "stop_line": stop_line_outcome(s, r, model.vehicle)}
    _write_json(_out_dir(args) / "rollout.json", rec)
    print(json.dumps({"replans": r.replans, "events": len(r.events), **r.metrics}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import closed_loop_eval, open_loop_eval
    cfg = _config(args)
    src = args.scenarios or cfg.eval_corpus
    if not src:
        raise CLIError("no evaluation corpus: pass --scenarios or set eval_corpus")
    if not Path(src).exists():
        raise CLIError(f"scenario path does not exist: {src}")
    corpus = load_corpus(src) if Path(src).is_dir() else [load_scenario(src)]
    model = _model(args, cfg)
    mode = cfg.mode
    if args.closed_loop:
        rep, _ = closed_loop_eval(corpus, model, cfg.planner, mode, cfg.closed_loop_seconds)
    else:
        rep = open_loop_eval(corpus, model, cfg.planner, mode)
    out = _out_dir(args)
    _write_json(out / "metrics.json", rep.to_dict())
    (out / "metrics.txt").write_text(rep.to_table() + "\n")
    print(rep.to_table())
    return 0


def cmd_plot(args) -> int:
    from .planner import plan
    from .plotting import render_svg
    from .scenario import context_at
    cfg = _config(args)
    s = load_scenario(args.scenario)
    model = _model(args, cfg)
    planned = None
    if args.with_plan:
        planned = plan(context_at(s), model, cfg.planner, cfg.mode).trajectory.states
    svg = render_svg(s, model, args.t, planned)
    out = Path(args.out) if args.out else _out_dir(args) / "field.svg"
    if out.suffix != ".svg":
        out = out / "field.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    print(json.dumps({"svg": str(out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vfplan", description="Velocity-field sampling planner toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", help="output directory (default: $VFPLAN_OUT_DIR)")
        sp.add_argument("--threads", type=int, help="BLAS thread cap; 1 forces determinism ($VFPLAN_THREADS)")
        if config:
            sp.add_argument("--config", help="RunConfig JSON file")

    g = sub.add_parser("gen-data", help="generate synthetic scenarios")
    common(g, config=False)
    g.add_argument("--kind", default="mixed", help="scenario kind, comma list, or 'mixed'")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--future-steps", type=int, default=50)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training")
    common(t)
    t.add_argument("--corpus", help="training corpus directory (overrides config)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stage1-only", action="store_true")
    t.add_argument("--stage1-epochs", type=int)
    t.add_argument("--stage2-epochs", type=int)
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("plan", cmd_plan, "plan once on a scenario"),
                              ("rollout", cmd_rollout, "closed-loop rollout on a scenario")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--checkpoint")
        sp.add_argument("--scenario", required=True)
        sp.add_argument("--mode", choices=("vf", "cf", "eula", "il"))
        if name == "plan":
            sp.add_argument("--evaluator", choices=("model", "stub"), default="model",
                            help="'stub' scores squared distance to the logged expert")
        sp.set_defaults(func=func)

    e = sub.add_parser("eval", help="open- or closed-loop metrics over a corpus")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--scenarios", help="scenario directory or file")
    e.add_argument("--mode", choices=("vf", "cf", "eula", "il"))
    e.add_argument("--closed-loop", action="store_true")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="SVG of the scene and queried field")
    common(pl)
    pl.add_argument("--checkpoint")
    pl.add_argument("--scenario", required=True)
    pl.add_argument("--t", type=float, default=2.0)
    pl.add_argument("--mode", choices=("vf", "cf", "eula", "il"))
    pl.add_argument("--with-plan", action="store_true")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _threads(args):
            return args.func(args)
    except (CLIError, ConfigError, ScenarioError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"{ERROR_PREFIX} {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
