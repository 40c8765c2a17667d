"""Train a small model for a few minutes and compare planning modes open loop.

Run: python3 demos/train_small.py [out_dir]
Writes checkpoints, losses.csv and field.svg to out_dir (default runs/demo).
"""
import sys
from pathlib import Path

import numpy as np

from vfplan.config import RunConfig, TrainConfig
from vfplan.evaluation import field_alignment, open_loop_eval
from vfplan.plotting import render_svg
from vfplan.scenario import SCENARIO_KINDS, generate_corpus
from vfplan.training import train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
corpus = generate_corpus(SCENARIO_KINDS, 60, seed=1)
held = generate_corpus(SCENARIO_KINDS, 15, seed=2)

run = RunConfig(train=TrainConfig(stage1_epochs=40, stage2_epochs=3, lr=1e-3))
res = train(corpus, run, out, log=lambda row: print(
    f"stage {row['stage']} epoch {row['epoch']:3d}  total {row['total']:.3f}  il {row['il']:.3f}  "
    f"vf {row['vf']:.3f}  sele {row['sele']:.3f}", flush=True))
model = res.model

for mode in ("il", "eula", "vf"):
    rep = open_loop_eval(held, model, mode=mode)
    print(f"\n== {mode}\n{rep.to_table()}")

ang = field_alignment(held, model)
print(f"\nfield within 15 deg of the lane tangent at {np.mean(ang < np.radians(15)):.0%} of {len(ang)} probes")
(out / "field.svg").write_text(render_svg(held[0], model, t=2.0))
print("wrote", out / "field.svg")
