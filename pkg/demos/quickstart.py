"""Train NF and METcross on a synthetic city pair and compare test MAE.

Takes about two minutes on one core.
"""

from __future__ import annotations

from dataclasses import replace

from metcross import DESK_PROFILE, SynthSpec, boost, generate, mae_rmse, prepare_task, run_model

pair = generate(SynthSpec(seed=0))
task = prepare_task(pair.source.city, pair.target.city, 25, 5)
cfg = replace(DESK_PROFILE, seed=0)

cache: dict = {}
scores = {}
for key in ("nf", "metcross"):
    run = run_model(task, key, cfg, cache)
    scores[key] = mae_rmse(run.pred.T, run.actual.T)
    print(f"{key:<9} MAE {scores[key].mae:.4f}  RMSE {scores[key].rmse:.4f}")

print(f"boost over NF: {boost(scores['nf'].mae, scores['metcross'].mae):.2f}%")
