"""Conditional front-door answer selection for knowledge-intensive QA."""

from .graph import (
    CausalDag,
    GraphPath,
    audit_cfd_derivation,
    check_conditional_frontdoor,
    check_standard_frontdoor,
    d_separated,
)
from .scm import DiscreteScm, cfd_estimate, interventional_truth
from .config import PipelineConfig
from .pipeline import Pipeline

__all__ = [
    "CausalDag",
    "DiscreteScm",
    "GraphPath",
    "Pipeline",
    "PipelineConfig",
    "audit_cfd_derivation",
    "cfd_estimate",
    "check_conditional_frontdoor",
    "check_standard_frontdoor",
    "d_separated",
    "interventional_truth",
]

__version__ = "0.1.0"
