"""
The full unsupervised pipeline at desk scale
============================================

Runs every stage through the command line driver, exactly as

    python -m dyntraj pipeline --config demos/desk_scale.cfg -v

would, then repeats aggregation and evaluation without the heatmap channel
to show how much the learnt dynamic points add on top of optical flow.
"""

import json
import os
import shutil

from dyntraj import cli

here = os.path.dirname(os.path.abspath(__file__))
cfg = os.path.join(here, "desk_scale.cfg")

# synth, train-dpm, extract, aggregate, match, train-pred, predict, evaluate
assert cli.main(["pipeline", "--config", cfg, "-v"]) == 0
full = json.load(open(os.path.join("desk_run", cli.REPORT_JSON)))

# same frames, flow only
shutil.copytree("desk_run", "desk_run_flow", dirs_exist_ok=True)
for stage in ["aggregate", "match", "train-pred", "predict", "evaluate"]:
    assert cli.main([stage, "--config", cfg, "--workdir", "desk_run_flow", "--no-heatmaps"]) == 0
flow = json.load(open(os.path.join("desk_run_flow", cli.REPORT_JSON)))

for key in ("Ins-Precision", "Ins-Recall", "Gen-Precision", "Gen-Recall", "ADE", "ADE-baseline"):
    print(f"{key:14s} fused {full.get(key, float('nan')):.3f}   flow only {flow.get(key, float('nan')):.3f}")
