"""Early-learning detection and adaptive label correction for noisy segmentation labels."""

from .consistency import ConsistencyConfig, consistency_loss, multiscale_forward
from .correct import AnnotationStore, CorrectionState, correct_labels
from .earlycurve import FitResult, check_trigger, curve, curve_derivative, fit_curve
from .synthgen import Dataset, NoiseConfig, SynthConfig, generate_dataset
from .trainer import TrainConfig, noise_sweep, run_experiment

__version__ = "0.1.0"
