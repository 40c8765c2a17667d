"""Generate a scene, then plan on it three ways with an untrained model.

Run: python3 demos/quickstart.py
"""
from vfplan.dynamics import VehicleParams
from vfplan.encoder import Frame
from vfplan.evaluation import evaluate_plan
from vfplan.model import PlanningModel
from vfplan.planner import PlannerConfig, StubEvaluator, plan
from vfplan.scenario import context_at, generate_synthetic

scene = generate_synthetic("lead_follow", seed=3)
now = scene.current_index
print(f"{scene.kind}: {len(scene.agents)} agents, {len(scene.map)} map elements, "
      f"{scene.history_steps} history / {scene.future_steps} future steps")

model = PlanningModel()            # zero-initialised heads: the IL guess coasts, the field is flat
view = context_at(scene)

# A stub that scores squared distance to the logged expert shows the sampler at work.
cur = scene.ego.ego_states()[now]
log = scene.ego.ego_states()[now:now + 51]
stub = StubEvaluator(Frame(cur[0], cur[1], cur[2]).states_to_local(log))
for name, evaluator in (("stub", stub), ("eula", "eula"), ("il", "il")):
    res = plan(view, model, PlannerConfig(), evaluator)
    rec = evaluate_plan(scene, res.trajectory.states, now, VehicleParams())
    costs = res.diagnostics["best_costs"]
    trend = f"best cost {costs[0]:.1f} -> {costs[-1]:.1f}" if costs else "no search"
    print(f"{name:5s} L2@1s {rec['plan_l2_1s']:.2f} m  L2@5s {rec['plan_l2_5s']:.2f} m  "
          f"collision {rec['collision']}  {trend}  evaluations {res.diagnostics['evaluations']}  "
          f"winner {res.diagnostics['winner_provenance']}")
