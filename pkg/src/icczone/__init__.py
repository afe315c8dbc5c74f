"""ICC feedback estimation and speech zone detection."""

from .acoustics import (
    Geometry, ImpulseResponse, default_geometry, estimate_t60, free_field_ir, image_source_ir,
    load_ir_wav, model_loudspeaker_irs, save_ir_wav, save_wav, sum_loudspeaker_ir,
)
from .ctf import (
    UNBOUNDED, Ctf, StabilityProfile, certify, ctf_convolve, ctf_error_db, identify_ctf,
    max_stable_gain,
)
from .estimator import EstimatorModel, FeedbackEstimator, build_model, limit_gain
from .experiment import ExperimentConfig, SweepResult, load_config
from .loop import (
    IccConfig, Scene, SimOutput, build_scene, calibrate_forward_gain, calibrate_mismatch,
    simulate,
)
from .signals import speech_shaped_noise
from .stft import STFT, StftConfig, analyze, synthesize
from .zones import (
    PsdTracker, ZoneDetector, broadband_spr, cross_term_diagnostic, detect_zone, direct_psd, spr,
    zone_detection_rate,
)

__all__ = [
    "Ctf",
    "EstimatorModel",
    "ExperimentConfig",
    "FeedbackEstimator",
    "Geometry",
    "IccConfig",
    "ImpulseResponse",
    "PsdTracker",
    "STFT",
    "Scene",
    "SimOutput",
    "StabilityProfile",
    "StftConfig",
    "SweepResult",
    "UNBOUNDED",
    "ZoneDetector",
    "analyze",
    "broadband_spr",
    "build_model",
    "build_scene",
    "calibrate_forward_gain",
    "calibrate_mismatch",
    "certify",
    "cross_term_diagnostic",
    "ctf_convolve",
    "ctf_error_db",
    "default_geometry",
    "detect_zone",
    "direct_psd",
    "estimate_t60",
    "free_field_ir",
    "identify_ctf",
    "image_source_ir",
    "limit_gain",
    "load_config",
    "load_ir_wav",
    "max_stable_gain",
    "model_loudspeaker_irs",
    "save_ir_wav",
    "save_wav",
    "simulate",
    "speech_shaped_noise",
    "spr",
    "sum_loudspeaker_ir",
    "synthesize",
    "zone_detection_rate",
]

__version__ = "0.1.0"
