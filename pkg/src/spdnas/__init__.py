"""SPD-manifold network layers and differentiable architecture search."""

__version__ = "0.1.0"

from . import (  # noqa: F401
    bilevel,
    checks,
    data,
    errors,
    frechet,
    layers,
    manifold,
    search_space,
    simplex,
    tape,
)
