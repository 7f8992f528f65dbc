"""panorf: lift noisy multi-view 2D panoptic labels into a 3D-consistent
panoptic radiance field, with TTA label fusion, scene-level panoptic quality
evaluation, and render-time scene editing."""

__version__ = "0.1.0"
