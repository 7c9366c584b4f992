"""Stability-certified GRU networks for nonlinear system identification."""

__version__ = "0.1.0"

from .bounds import (DeltaIssBound, EntryBound, IssBound, NotCertifiedError, deep_delta_iss_bound,
                     deep_entry_bounds, delta_iss_bound, entry_bound, iss_bound)
from .certificates import (StabilityReport, certify_deep, delta_iss_residual, iss_condition,
                           relaxed_delta_iss_residual, residuals)
from .gru import (AffineScaler, DeepGruModel, GruLayerParams, deep_step, layer_step, load_model,
                  save_model, simulate)
from .plant import Protocol, TankConfig, generate_dataset, load_dataset, save_dataset
from .training import TrainConfig, fit_index, train
from .verify import (VerificationPlan, verify_delta_iss_bound, verify_entry, verify_invariance,
                     verify_iss_bound)

__all__ = [
    "AffineScaler", "DeepGruModel", "DeltaIssBound", "EntryBound", "GruLayerParams", "IssBound",
    "NotCertifiedError", "Protocol", "StabilityReport", "TankConfig", "TrainConfig",
    "VerificationPlan", "certify_deep", "deep_delta_iss_bound", "deep_entry_bounds", "deep_step",
    "delta_iss_bound", "delta_iss_residual", "entry_bound", "fit_index", "generate_dataset",
    "iss_bound", "iss_condition", "layer_step", "load_dataset", "load_model",
    "relaxed_delta_iss_residual", "residuals", "save_dataset", "save_model", "simulate", "train",
    "verify_delta_iss_bound", "verify_entry", "verify_invariance", "verify_iss_bound",
]
