"""Two ways to get the fractional score of dx = dw + dL.

The conditional law is Gaussian plus Levy, so the mixed-noise estimator
applies directly. Score-fPINN instead learns the vanilla score first and
then solves the Score-fPDE for the fractional one. Both feed the same LL
stage, and their LL predictions should agree.

Run:  python demos/basic_two_routes.py [epochs]
"""

import sys

from fracsde.diffnet import TrainPlan
from fracsde.llsolver import evaluate_ll, new_ll_model, train_ll
from fracsde.reference import make_report, mc_ll_oracle
from fracsde.scorematch import ScoreTrainTask, train_score
from fracsde.sde import exact_marginal, make_benchmark

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 400
spec = make_benchmark("basic", d=2)
plan = TrainPlan(epochs=epochs, batch_size=1000, width=32, depth=4,
                 decay_interval=max(1, epochs // 5))
ll_plan = plan.replace(lr0=3e-3, decay_rate=0.5)
X = exact_marginal(spec, spec.T, 1000, seed=1).points
ref = mc_ll_oracle(spec, spec.T, X, n_mc=200_000)

preds = {}
for route in ("mixed-fsm", "score-fpinn"):
    vanilla = None
    if route == "score-fpinn":
        vanilla, _ = train_score(ScoreTrainTask("ssm", spec, plan))
    score, _ = train_score(ScoreTrainTask(route, spec, plan, frozen_vanilla=vanilla))
    model, _ = train_ll(new_ll_model(spec, ll_plan), score, spec, ll_plan)
    preds[route], _ = evaluate_ll(model, X, spec.T)
    print(f"{route:>12}: LL rel L2 {make_report(preds[route], ref).ll_rel_l2:.3E}")

print(f"route agreement: {make_report(preds['mixed-fsm'], preds['score-fpinn']).ll_rel_l2:.3E}")
