"""Projected-time estimators: mean-derivative, hybrid SNSPD+sync, and PC1."""

from .base import TimeEstimator  # noqa: F401
from .derivative import (  # noqa: F401
    DerivativeEstimator,
    ProjectionBasis,
    build_basis,
    project_set,
    project_time,
)
from .hybrid import (  # noqa: F401
    HybridBasis,
    HybridEstimator,
    build_hybrid_basis,
    hybrid_project,
    hybrid_project_set,
)
from .principal import PrincipalEstimator  # noqa: F401
