"""Attacks on autoencoder, bounded-activation and preprocessing defenses, on a numpy autodiff core."""

from .attacks import (AttackConfig, AttackResult, cw_inner_loss, cw_l2, cw_l2_through_preprocessor, fgsm,
                      greybox_ensemble_attack)
from .data_io import Dataset, emit_image_grid, load_idx, load_model, save_model
from .defenses import (DefendedVerdict, DefensePipeline, Detector, NotCalibrated, calibrate_threshold,
                       defend_classify, detector_score, jsd, magnet_pipeline)
from .evaluation import (EvalProtocol, EvalReport, choose_targets, compute_metrics, run_greybox_eval,
                         run_preprocessor_eval, run_whitebox_eval)
from .models import Autoencoder, Classifier, Identity, LinearClassifier, Preprocessor
from .tensor import Tape, Tensor, backward, no_grad
from .training import AETrainConfig, TrainConfig, gaussian_augment, train_autoencoder, train_classifier, train_preprocessor

__version__ = "0.1.0"

__all__ = [
    "AETrainConfig", "AttackConfig", "AttackResult", "Autoencoder", "Classifier", "Dataset", "DefendedVerdict",
    "DefensePipeline", "Detector", "EvalProtocol", "EvalReport", "Identity", "LinearClassifier", "NotCalibrated",
    "Preprocessor", "Tape", "Tensor", "TrainConfig", "backward", "calibrate_threshold", "choose_targets",
    "compute_metrics", "cw_inner_loss", "cw_l2", "cw_l2_through_preprocessor", "defend_classify",
    "detector_score", "emit_image_grid", "fgsm", "gaussian_augment", "greybox_ensemble_attack", "jsd",
    "load_idx", "load_model", "magnet_pipeline", "no_grad", "run_greybox_eval", "run_preprocessor_eval",
    "run_whitebox_eval", "save_model", "train_autoencoder", "train_classifier", "train_preprocessor",
]
