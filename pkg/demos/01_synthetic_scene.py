"""
A synthetic scene with known trajectories
=========================================

Every test in this repository runs on generated video: coloured gaussian blobs
drifting over a smooth background, with the exact blob centres as ground truth.
"""

import numpy as np

from dyntraj.scene_io import SyntheticSceneSpec, generate_synthetic_scene, save_frames, write_trajectory_file

# two agents, 200 frames of 128x128 pixels, bouncing off the borders
spec = SyntheticSceneSpec(n_agents=2, n_frames=200, layout="random")
seq, gt, mask = generate_synthetic_scene(spec, seed=2)
print("frames:", seq.frames.shape, "interval:", seq.interval_s, "s")

# the ground truth is a plain `frame agent x y` table
for row in list(gt.rows())[:4]:
    print("gt row:", row)

# speed is constant between bounces
steps = np.linalg.norm(np.diff(gt.tracks()[0][1], axis=0), axis=1)
print("step length: min %.3f  max %.3f px" % (steps.min(), steps.max()))

# write it out in the layout the command line tool reads
save_frames(seq, "demo_scene/frames")
write_trajectory_file(gt, "demo_scene/gt.txt")
print("wrote demo_scene/")
