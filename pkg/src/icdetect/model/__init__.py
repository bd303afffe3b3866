from .augment import AugmentConfig, augment
from .convnet import ShapeMismatch, backward, bce_loss, forward, init_params
from .forest import EmptyInput, ForestConfig, ForestModel, train_forest
from .hybrid import HybridModel, extract_features, ingest, predict_proba
from .io import ModelFormatError, ModelVersionError, load_model, save_model
from .optim import AdamState, adam_step
from .training import (DataRatioWarning, EmptyClass, TrainConfig, TrainingLog, calibrate,
                       fit_thresholds, train_cnn, train_master)

__all__ = [
    "AdamState", "AugmentConfig", "DataRatioWarning", "EmptyClass", "EmptyInput", "ForestConfig",
    "ForestModel", "HybridModel", "ModelFormatError", "ModelVersionError", "ShapeMismatch",
    "TrainConfig", "TrainingLog", "adam_step", "augment", "backward", "bce_loss", "calibrate",
    "extract_features", "fit_thresholds", "forward", "ingest", "init_params", "load_model",
    "predict_proba", "save_model", "train_cnn", "train_forest", "train_master",
]
