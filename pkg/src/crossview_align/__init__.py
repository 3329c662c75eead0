"""Learnable thin-plate-spline warping, prototype-mask alignment and a
desk-scale cross-view retrieval harness, all in float64 NumPy with
hand-written gradients."""
from .numeric_core import NumericalError, SingularSystemError, finite_diff_check, solve_linear
from .tps import (
    ControlPointSet,
    DegenerateConfigurationError,
    RotationHead,
    ltps_backward,
    ltps_forward,
    solve_tps,
)
from .dam import DamConfig, MaskGenerator, compute_prototypes, dam_training_step, generate_mask
from .objectives import LossBreakdown, LossConfig, SamplingError, total_loss
from .encoder import ConfigError, Encoder, EncoderConfig, placement_presets
from .metrics import RetrievalMetrics, evaluate, evaluate_embeddings

__version__ = "0.1.0"
