"""Short federated runs of every strategy on the synthetic domain-shifted task,
followed by an uncertainty check under Gaussian input noise.

A reduced setting (10 rounds, 1 seed) keeps this to a few minutes; the
acceptance suite runs the full 50-round, 5-seed version.

Run: python3 demos/strategies_at_a_glance.py [rounds]
"""
import sys
import time

from trfeddis import ExperimentConfig, evaluate, ood_separation, run_experiment
from trfeddis.data import corrupt_gaussian
from trfeddis.specfun import RngStream

rounds = int(sys.argv[1]) if len(sys.argv) > 1 else 10
base = ExperimentConfig(rounds=rounds, seeds=[0])

results = {}
for name in ("SingleSet", "FedAvg", "FedBN", "TrFedDis"):
    t0 = time.perf_counter()
    res = run_experiment(base.replace(strategy=name))
    results[name] = res
    print(f"{name:<10} fused test accuracy {res.final_accuracy(0):.3f}  ({time.perf_counter() - t0:.0f}s)")

# Noisy inputs should look less certain to the fused opinion.
res = results["TrFedDis"]
for c in res.clients[0]:
    test = c.dataset.test
    noisy = test.with_inputs(corrupt_gaussian(test.inputs, 1.5, RngStream.keyed(0, "ood", c.client_id)))
    clean_u = evaluate(c.model, test).u
    noisy_u = evaluate(c.model, noisy).u
    print(
        f"client {c.client_id}: mean u clean {clean_u.mean():.3f} noisy {noisy_u.mean():.3f}"
        f"  AUROC {ood_separation(clean_u, noisy_u):.3f}"
    )
