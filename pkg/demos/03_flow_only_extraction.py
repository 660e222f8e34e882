"""
Trajectories from optical flow alone
====================================

The cheapest unsupervised variant skips the dynamic-point network: dense flow
picks the moving pixels, mean-shift collapses them into instance points, and
the matcher chains those. The extracted tracks then train a small predictor.
"""

import numpy as np

from dyntraj.aggregation import AggregationConfig, aggregate_video
from dyntraj.evaluation import ade, instance_pr, trajectory_pr
from dyntraj.matching import assemble_tracks, filter_tracks, tracks_to_trajectory_file
from dyntraj.prediction import constant_position_baseline, evaluate_windows, make_windows, train_predictor
from dyntraj.scene_io import SyntheticSceneSpec, generate_synthetic_scene

spec = SyntheticSceneSpec(n_agents=3, n_frames=200, layout="lanes")
seq, gt, mask = generate_synthetic_scene(spec, seed=11)

# instance points for frames 1..T-1
sets = aggregate_video(seq.frames, None, mask, AggregationConfig(use_heatmaps=False))
ins = instance_pr({s.frame_id: s.points for s in sets}, gt.per_frame(), frames=[s.frame_id for s in sets])
print(f"Ins-Precision {ins.precision:.3f}  Ins-Recall {ins.recall:.3f}")

extracted = tracks_to_trajectory_file(filter_tracks(assemble_tracks(sets, 0.2, 6.0), 20))
gen = trajectory_pr(list(extracted.tracks().values()), list(gt.tracks().values()))
print(f"{len(extracted.agents())} tracks  Gen-Precision {gen.precision:.3f}  Gen-Recall {gen.recall:.3f}")

# observe 8 steps, predict 12; test on ground truth of a fresh scene
model, history = train_predictor(make_windows(extracted), epochs=50, seed=0)
print(f"predictor loss {history[0]:.3f} -> {history[-1]:.3f}")
_, test_gt, _ = generate_synthetic_scene(spec, seed=12)
test = make_windows(test_gt)
model_ade, model_fde = evaluate_windows(model, test)
base = np.mean([ade(constant_position_baseline(w.observed), w.target) for w in test])
print(f"ADE {model_ade:.3f}  FDE {model_fde:.3f}  (last-position baseline ADE {base:.3f})")
