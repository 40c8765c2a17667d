import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from vfplan.cli import ERROR_PREFIX, main
from vfplan.evaluation import MetricsReport
from vfplan.model import PlanningModel
from vfplan.plotting import lattice_points, on_map_mask, PlotConfig
from vfplan.scenario import load_scenario

TINY = {
    "encoder": {"embed_dim": 16, "attn_heads": 2, "max_agents": 4, "max_map_elements": 8, "horizon": 20},
    "planner": {"iterations": 2, "k_best": 4, "children_per_parent": 3},
    "train": {"stage1_epochs": 2, "stage2_epochs": 1, "batch_size": 2, "lr": 1e-3, "stage2_iterations": 1},
    "closed_loop_seconds": 1.0,
}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["gen-data", "--kind", "straight_cruise,lead_follow", "--count", "2", "--seed", "3",
                 "--future-steps", "30", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "tiny.json"), "--corpus", str(root / "data"),
                 "--out", str(root / "run"), "--threads", "1"]) == 0
    return root


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_gen_data_count_manifest_and_repeatability(tmp_path, capsys):
    code, out, _ = run(["gen-data", "--count", "10", "--seed", "5", "--out", tmp_path / "a"], capsys)
    assert code == 0
    manifest = json.loads(out)
    scen = [p for p in (tmp_path / "a").glob("scenario_*.json")]
    assert len(scen) == 10 and manifest["count"] == 10
    assert sum(manifest["kinds"].values()) == 10
    for name in manifest["files"]:
        assert load_scenario(tmp_path / "a" / name).kind in manifest["kinds"]
    run(["gen-data", "--count", "10", "--seed", "5", "--out", tmp_path / "b"], capsys)
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


@pytest.mark.parametrize("argv", [
    ["gen-data", "--kind", "highway_merge", "--count", "1"],
    ["gen-data", "--count", "-1"],
    ["gen-data", "--count", "1", "--threads", "0"],
    ["eval", "--scenarios", "/nonexistent/path"],
    ["plan", "--scenario", "/nonexistent.json"],
    ["plot", "--scenario", "/nonexistent.json"],
    ["train"],
])
def test_validation_failures_exit_nonzero_with_one_line(argv, tmp_path, capsys):
    code, _, err = run(argv + ["--out", tmp_path], capsys)
    assert code == 2
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(ERROR_PREFIX)


def test_bad_config_rejected(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"mode": "dipp"}))
    code, _, err = run(["eval", "--config", tmp_path / "c.json", "--out", tmp_path], capsys)
    assert code == 2 and err.startswith(ERROR_PREFIX)
    (tmp_path / "c.json").write_text(json.dumps({"eval_corpus": "/missing"}))
    code, _, err = run(["eval", "--config", tmp_path / "c.json", "--out", tmp_path], capsys)
    assert code == 2 and "eval_corpus" in err


def test_out_dir_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("VFPLAN_OUT_DIR", str(tmp_path / "env"))
    assert run(["gen-data", "--count", "1"], capsys)[0] == 0
    assert (tmp_path / "env" / "manifest.json").exists()
    monkeypatch.delenv("VFPLAN_OUT_DIR")
    assert run(["gen-data", "--count", "1"], capsys)[0] == 2


def test_train_outputs_and_loss_decrease(workspace):
    run_dir = workspace / "run"
    for name in ("model.ckpt", "latest.ckpt", "losses.csv", "config.json",
                 "stage1_epoch001.ckpt", "stage1_epoch002.ckpt", "stage2_epoch001.ckpt"):
        assert (run_dir / name).exists(), name
    rows = list(csv.DictReader(open(run_dir / "losses.csv")))
    assert [(r["stage"], r["epoch"]) for r in rows] == [("1", "1"), ("1", "2"), ("2", "1")]
    s1 = [float(r["total"]) for r in rows if r["stage"] == "1"]
    assert s1[-1] < s1[0]


def test_stage1_only_leaves_field_and_cost_at_init(workspace, tmp_path, capsys):
    code, _, _ = run(["train", "--config", workspace / "tiny.json", "--corpus", workspace / "data",
                      "--out", tmp_path, "--stage1-only", "--threads", "1"], capsys)
    assert code == 0
    trained, _ = PlanningModel.load(tmp_path / "model.ckpt")
    fresh = PlanningModel(trained.cfg, seed=0)
    for name, t in trained.store.items():
        same = np.array_equal(t.data, fresh.store[name].data)
        if name.startswith(("field.", "cost.")):
            assert same, name
    assert not all(np.array_equal(t.data, fresh.store[n].data) for n, t in trained.store.items())


def test_resume_reproduces_next_epoch_bitwise(workspace, tmp_path, capsys):
    code, _, _ = run(["train", "--config", workspace / "tiny.json", "--corpus", workspace / "data",
                      "--out", tmp_path, "--resume", workspace / "run" / "stage1_epoch002.ckpt",
                      "--threads", "1"], capsys)
    assert code == 0
    assert (tmp_path / "stage2_epoch001.ckpt").read_bytes() == \
        (workspace / "run" / "stage2_epoch001.ckpt").read_bytes()


def test_plan_with_stub_is_monotone(workspace, tmp_path, capsys):
    scen = sorted((workspace / "data").glob("scenario_*straight_cruise.json"))[0]
    code, out, _ = run(["plan", "--config", workspace / "tiny.json", "--scenario", scen,
                        "--evaluator", "stub", "--out", tmp_path], capsys)
    assert code == 0
    best = json.loads(out)["best_costs"]
    assert all(b <= a for a, b in zip(best, best[1:]))
    rec = json.loads((tmp_path / "plan.json").read_text())
    assert np.asarray(rec["trajectory"]).shape == (TINY["encoder"]["horizon"] + 1, 4)


def test_eval_empty_corpus_and_schema(workspace, tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    code, _, _ = run(["eval", "--config", workspace / "tiny.json", "--scenarios", empty,
                      "--out", tmp_path / "o"], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert rep["count"] == 0
    assert set(rep) == set(MetricsReport.__dataclass_fields__)


@pytest.mark.parametrize("mode", ["vf", "cf", "eula", "il"])
def test_eval_modes_share_schema(workspace, tmp_path, capsys, mode):
    # the trained checkpoint carries a velocity field; cost-field mode uses a fresh cost-field model
    ckpt = [] if mode == "cf" else ["--checkpoint", workspace / "run" / "model.ckpt"]
    code, _, _ = run(["eval", "--config", workspace / "tiny.json", *ckpt,
                      "--scenarios", workspace / "data", "--mode", mode, "--out", tmp_path], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "metrics.json").read_text())
    assert set(rep) == set(MetricsReport.__dataclass_fields__) and rep["count"] == 2


def test_field_mode_mismatch_rejected(workspace, tmp_path, capsys):
    code, _, err = run(["eval", "--config", workspace / "tiny.json", "--checkpoint", workspace / "run" / "model.ckpt",
                        "--scenarios", workspace / "data", "--mode", "cf", "--out", tmp_path], capsys)
    assert code == 2 and "field mode" in err


def test_rollout_writes_record(workspace, tmp_path, capsys):
    scen = sorted((workspace / "data").glob("scenario_*.json"))[0]
    code, out, _ = run(["rollout", "--config", workspace / "tiny.json", "--checkpoint",
                        workspace / "run" / "model.ckpt", "--scenario", scen, "--out", tmp_path], capsys)
    assert code == 0
    rec = json.loads((tmp_path / "rollout.json").read_text())
    assert rec["replans"] == 10 and len(rec["executed"]) == 11


def test_plot_untrained_is_dots_and_well_formed(workspace, tmp_path, capsys):
    scen = sorted((workspace / "data").glob("scenario_*.json"))[0]
    code, _, _ = run(["plot", "--config", workspace / "tiny.json", "--scenario", scen,
                      "--out", tmp_path / "f.svg"], capsys)
    assert code == 0
    root = ET.parse(tmp_path / "f.svg").getroot()
    ns = "{http://www.w3.org/2000/svg}"
    arrows = [e for e in root.iter() if e.get("class") == "arrow"]
    assert arrows and all(e.tag == ns + "circle" for e in arrows)
    # arrow count is the lattice minus off-map points, in the ego frame
    from vfplan.encoder import context_features
    from vfplan.scenario import context_at
    from vfplan.encoder import EncoderConfig
    feats = context_features(context_at(load_scenario(scen)), EncoderConfig(**TINY["encoder"]))
    keep = on_map_mask(lattice_points(PlotConfig()), list(feats.local_map.values()))
    assert len(arrows) == int(keep.sum())
    assert any("m per m/s" in (e.text or "") for e in root.iter(ns + "text"))


def test_plot_trained_has_arrows(workspace, tmp_path, capsys):
    scen = sorted((workspace / "data").glob("scenario_*.json"))[0]
    code, _, _ = run(["plot", "--scenario", scen, "--checkpoint", workspace / "run" / "model.ckpt",
                      "--with-plan", "--out", tmp_path], capsys)
    assert code == 0
    root = ET.parse(tmp_path / "field.svg").getroot()
    assert any(e.get("class") == "plan" for e in root.iter())
    assert any(e.tag.endswith("line") and e.get("class") == "arrow" for e in root.iter())


@pytest.mark.parametrize("sub", ["gen-data", "train", "plan", "rollout", "eval", "plot"])
def test_commands_bit_identical_across_runs(workspace, tmp_path, capsys, sub):
    cfg, data, ckpt = workspace / "tiny.json", workspace / "data", workspace / "run" / "model.ckpt"
    scen = sorted(data.glob("scenario_*.json"))[0]
    argv = {
        "gen-data": ["--count", "3", "--seed", "9"],
        "train": ["--config", cfg, "--corpus", data, "--stage1-epochs", "1", "--stage2-epochs", "1"],
        "plan": ["--config", cfg, "--checkpoint", ckpt, "--scenario", scen],
        "rollout": ["--config", cfg, "--checkpoint", ckpt, "--scenario", scen],
        "eval": ["--config", cfg, "--checkpoint", ckpt, "--scenarios", data],
        "plot": ["--config", cfg, "--checkpoint", ckpt, "--scenario", scen],
    }[sub]
    outs = []
    for rep in ("a", "b"):
        code, out, _ = run([sub, *argv, "--threads", "1", "--out", tmp_path / rep], capsys)
        assert code == 0
        outs.append((out.replace(str(tmp_path / rep), ""), _files(tmp_path / rep)))
    assert outs[0] == outs[1]
