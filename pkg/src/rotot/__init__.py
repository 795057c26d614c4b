"""Robust tensor-on-tensor regression (ROTOT) with robust multilinear PCA of the predictors."""

from .estimator import (FitFailure, RototConfig, RototModel, cross_validate, fit_rotot, irls_fit,
                        predict)
from .robust import MScaleConfig, TanhRho, mscale
from .rompca import RompcaConfig, RompcaModel, rompca_fit, rompca_project_new
from .tensor import DenseTensor, KruskalOperator, contract, matricize, unmatricize, vec, unvec
from .tot import TotConfig, TotModel, tot_fit, tot_predict

__version__ = "0.1.0"

__all__ = [
    "DenseTensor", "KruskalOperator", "contract", "matricize", "unmatricize", "vec", "unvec",
    "TanhRho", "MScaleConfig", "mscale",
    "RompcaConfig", "RompcaModel", "rompca_fit", "rompca_project_new",
    "TotConfig", "TotModel", "tot_fit", "tot_predict",
    "RototConfig", "RototModel", "FitFailure", "fit_rotot", "irls_fit", "predict", "cross_validate",
]
