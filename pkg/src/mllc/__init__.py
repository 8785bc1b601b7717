"""Pseudo-label correction with a semantic-level k-NN graph and a class-level
consistency graph, plus the desk-scale training loop around it."""
from .clg import build_clg_affinity, normalize_clg
from .refine import RefineConfig, aggregate_pseudo_labels, dynamic_thresholds, refine, refine_backward
from .slg import SlgParams, build_slg_affinity, normalize_symmetric
from .tensor_store import IGNORE, load_npy, save_npy

__version__ = "0.1.0"

__all__ = [
    "IGNORE", "RefineConfig", "SlgParams", "aggregate_pseudo_labels", "build_clg_affinity",
    "build_slg_affinity", "dynamic_thresholds", "load_npy", "normalize_clg", "normalize_symmetric",
    "refine", "refine_backward", "save_npy",
]
