"""Self-calibration of visual-inertial sensor systems on informative motion
segments: synthetic data generation, segment information scoring, a bounded
database of informative segments, and a sparse maximum-likelihood
calibration over the selected segments."""

__version__ = "0.1.0"

from .sensor_models import CalibrationParams, NoiseSpec  # noqa: F401
