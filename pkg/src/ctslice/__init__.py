"""1D-CNN regression of CT slice axial location from shape-context features."""

from .data import Dataset, Normalizer, fit_normalizer, apply_normalizer, load_dataset, make_patient_folds
from .evaluation import compute_metrics, cross_validate, knn_cross_validate, knn_predict
from .model import ModelConfig, ModelNet, build_model, count_parameters, model_gradients

__all__ = [
    "Dataset", "Normalizer", "fit_normalizer", "apply_normalizer", "load_dataset", "make_patient_folds",
    "compute_metrics", "cross_validate", "knn_cross_validate", "knn_predict",
    "ModelConfig", "ModelNet", "build_model", "count_parameters", "model_gradients",
]

__version__ = "0.1.0"
