"""Stereo-teacher to monocular-student depth distillation on a numpy autodiff core."""

__version__ = "0.1.0"
