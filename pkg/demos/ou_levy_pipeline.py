"""End-to-end on the OU process driven by Levy noise.

1. learn the fractional score by conditional fractional score matching,
2. solve the LL-PDE for q = log p with that score frozen,
3. compare against the Monte-Carlo oracle.

Run:  python demos/ou_levy_pipeline.py [epochs]
"""

import sys
import time

from fracsde.diffnet import TrainPlan
from fracsde.llsolver import evaluate_ll, new_ll_model, train_ll
from fracsde.reference import make_report, mc_ll_oracle
from fracsde.scorematch import ScoreTrainTask, train_score
from fracsde.sde import exact_marginal, make_benchmark

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 500
spec = make_benchmark("ou_levy", d=4, alpha=1.95)
plan = TrainPlan(epochs=epochs, batch_size=1000, width=64, depth=4,
                 decay_interval=max(1, epochs // 5))

t0 = time.perf_counter()
score, log = train_score(ScoreTrainTask("fsm", spec, plan))
print(f"FSM: final loss {log.losses[-1]:.3f} after {time.perf_counter() - t0:.0f}s")

# the LL stage only sees the frozen score net; the Levy term is gone from the PDE
ll_plan = plan.replace(lr0=3e-3, decay_rate=0.5)
t0 = time.perf_counter()
model, log = train_ll(new_ll_model(spec, ll_plan), score, spec, ll_plan)
print(f"LL:  final loss {log.losses[-1]:.3f} after {time.perf_counter() - t0:.0f}s")

X = exact_marginal(spec, spec.T, 1000, seed=1).points
ref = mc_ll_oracle(spec, spec.T, X, n_mc=200_000)
pred, _ = evaluate_ll(model, X, spec.T)
rep = make_report(pred, ref)
print(f"LL rel L2 {rep.ll_rel_l2:.3E}   PDF rel L2 {rep.pdf_rel_l2:.3E}")
