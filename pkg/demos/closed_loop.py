"""Closed-loop rollouts on a red-light scene: logged-expert replay versus the model.

Run: python3 demos/closed_loop.py [checkpoint]
Without a checkpoint the untrained model is used, which coasts through the line.
"""
import sys

from vfplan.dynamics import VehicleParams
from vfplan.evaluation import ExpertReplayPlanner, closed_loop_rollout, stop_line_outcome
from vfplan.model import PlanningModel
from vfplan.scenario import GeneratorParams, generate_synthetic

scene = generate_synthetic("red_light_stop", seed=4, params=GeneratorParams(future_steps=100))
vp = VehicleParams()
model = PlanningModel.load(sys.argv[1])[0] if len(sys.argv) > 1 else PlanningModel()

replay = closed_loop_rollout(scene, None, duration=10.0, planner=ExpertReplayPlanner(scene, vp), vehicle=vp)
print("expert replay:", replay.replans, "replans, events", replay.event_types() or "none",
      stop_line_outcome(scene, replay, vp))

for mode in ("il", "vf"):
    r = closed_loop_rollout(scene, model, mode=mode, duration=10.0)
    out = stop_line_outcome(scene, r, vp)
    print(f"{mode}: events {sorted(r.event_types()) or 'none'}, final speed {out['final_speed']:.2f} m/s, "
          f"bumper clearance {out['clearance']:.2f} m, progress {r.metrics['progress']:.1f} m")
