"""Exact energy ledgers for products of contractions and the algorithms built on them."""

from .errors import OpDefectError
from .hilbert import Projection, psd_sqrt, rank_one_projection, spectral_norm
from .rkhs import Kernel, RkhsFunction, gram, rkhs_inner
from .telescope import EnergyLedger, Schedule, defect_of, relaxed_step, run_product

__version__ = "0.1.0"

__all__ = [
    "OpDefectError", "Projection", "psd_sqrt", "rank_one_projection", "spectral_norm",
    "Kernel", "RkhsFunction", "gram", "rkhs_inner",
    "EnergyLedger", "Schedule", "defect_of", "relaxed_step", "run_product",
]
