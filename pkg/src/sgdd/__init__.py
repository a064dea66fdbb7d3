"""Graph condensation with structure matching by optimal transport over
Laplacian-derived Gaussians, plus LED spectral diagnostics."""

from .condense import CondenseConfig, CondenseReport, condense, init_condensed, threshold_structure
from .errors import InputError, NumericalError, ParseError, SgddError
from .graph import CondensedGraph, Graph, SbmSpec, build_graph, load_graph, save_graph, sbm_generate
from .ot import OtConfig, TransportPlan, got_objective, optimize_plan, sinkhorn_project, structure_loss
from .spectral import led, shift, shift_coefficient

__all__ = [
    "CondenseConfig",
    "CondenseReport",
    "CondensedGraph",
    "Graph",
    "InputError",
    "NumericalError",
    "OtConfig",
    "ParseError",
    "SbmSpec",
    "SgddError",
    "TransportPlan",
    "build_graph",
    "condense",
    "got_objective",
    "init_condensed",
    "led",
    "load_graph",
    "optimize_plan",
    "save_graph",
    "sbm_generate",
    "shift",
    "shift_coefficient",
    "sinkhorn_project",
    "structure_loss",
    "threshold_structure",
]
