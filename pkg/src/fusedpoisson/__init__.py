"""Penalized Poisson regression with network and hourly fused-Lasso penalties."""

from .admm import AdmmOptions, AdmmState, SolveReport, solve
from .complexity import FusionTolerance, model_complexity
from .cv import FoldPlan, GridSpec, grid_search, make_folds, mspr
from .data import CalendarDims, RentalPanel, StationRegistry, load_panel, planted_clusters, synth_panel
from .graph import ProximityGraph, build_proximity
from .model import ParamState, fit_unpenalized, neg_loglik
from .penalty import PenaltyConfig, objective
from .projection import ProjectionPlan, build_plan, project

__version__ = "0.1.0"

__all__ = [
    "AdmmOptions", "AdmmState", "CalendarDims", "FoldPlan", "FusionTolerance", "GridSpec",
    "ParamState", "PenaltyConfig", "ProjectionPlan", "ProximityGraph", "RentalPanel",
    "SolveReport", "StationRegistry", "build_plan", "build_proximity", "fit_unpenalized",
    "grid_search", "load_panel", "make_folds", "model_complexity", "mspr", "neg_loglik",
    "objective", "planted_clusters", "project", "solve", "synth_panel",
]
