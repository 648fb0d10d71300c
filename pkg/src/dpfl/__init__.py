"""Data-driven power flow linearization.

Synthesize AC power flow operating points, fit linear (and piecewise or
kernel) maps from measured grid quantities with a family of regression
trainers, and compare them against physics-based linearizations.

Modules
-------
grid, acpf
    Case files, admittance matrices, Newton-Raphson power flow, sampling,
    Taylor and DC reference models.
dataset, models
    Predictor/response schemas, datasets, fitted model containers.
ls, pls, ridge, svr
    Regression trainers.
tailored, qp
    Constrained and chance-constrained trainers and their QP solver.
supportive
    Variable transforms, bundle models, DC coefficient tuning, error correction.
harness, cli
    Experiment sweeps and reporting.
"""

from .errors import DPFLError
from .grid import GridCase, load_case
from .acpf import FluctuationSpec, solve_power_flow, sample_operating_points
from .dataset import Dataset, VariableSchema, assemble_xy, standard_schema
from .models import LinearModel, load_model, save_model
from .svr import BACKEND as SMO_BACKEND

__version__ = "0.1.0"

__all__ = [
    "DPFLError", "GridCase", "load_case", "FluctuationSpec", "solve_power_flow",
    "sample_operating_points", "Dataset", "VariableSchema", "assemble_xy",
    "standard_schema", "LinearModel", "load_model", "save_model", "SMO_BACKEND",
]
