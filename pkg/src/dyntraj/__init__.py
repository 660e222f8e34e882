"""Label-free trajectory extraction and prediction from fixed-camera video.

Stages, each usable on its own:

* ``dynamic_points`` -- unsupervised point extractor trained by image
  reconstruction and forward/backward consistency
* ``aggregation`` -- optical flow + heatmaps -> mean-shift instance points
* ``matching`` -- Kuhn-Munkres frame-to-frame matching and track assembly
* ``prediction`` -- recurrent observe-8 / predict-12 predictor
* ``evaluation`` -- Ins/Gen precision-recall, ADE, FDE
* ``scene_io`` -- frames, homographies, masks, trajectory files, synthetic scenes
"""

__version__ = "0.1.0"
