"""Weighted Fréchet means on the SPD manifold.

Two solvers are provided: the Karcher flow (default; fixed-point iteration
in the tangent space) and the recursive geodesic mean (one pass, order
dependent).  These are the plain-numpy solvers used by data validation and
by the test oracles; the differentiable (unrolled) Karcher flow used inside
networks lives in :mod:`spdnas.tape`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .manifold import exp_map, log_map, sym_part

WEIGHT_TOL = 1e-10


@dataclass(frozen=True)
class WfmConfig:
    """Solver settings for weighted Fréchet means.

    ``solver`` selects karcher or recursive; ``max_iters``/``tol`` control
    the Karcher flow (tol bounds the Frobenius norm of the weighted
    tangent-space residual).
    """

    solver: str = "karcher"
    max_iters: int = 10
    tol: float = 1e-6

    def __post_init__(self):
        if self.solver not in ("karcher", "recursive"):
            raise ContractError(f"unknown wFM solver {self.solver!r}")
        if self.max_iters < 1:
            raise ContractError("WfmConfig.max_iters must be >= 1")
        if self.tol <= 0.0:
            raise ContractError("WfmConfig.tol must be positive")


class WfmResult(NamedTuple):
    """Result of a Fréchet-mean solve.

    ``residual`` is ||sum_i w_i log_mean(X_i)||_F at the returned iterate;
    ``converged`` is False when max_iters ran out before residual < tol.
    """

    mean: np.ndarray
    converged: bool
    n_iters: int
    residual: float


def check_weights(w: np.ndarray, n_points: int) -> np.ndarray:
    """Validate a simplex weight vector; returns it as a float64 array."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != n_points:
        raise ShapeError(f"weight vector has shape {w.shape}, expected ({n_points},)")
    if np.any(w < 0.0):
        raise ContractError(f"weights must be nonnegative, got min {w.min():.3e}")
    s = float(w.sum())
    if abs(s - 1.0) > WEIGHT_TOL:
        raise ContractError(f"weights must sum to 1 within {WEIGHT_TOL:.0e}, got {s!r}")
    return w


def _as_stack(points: Sequence[np.ndarray]) -> np.ndarray:
    if len(points) == 0:
        raise ContractError("Fréchet mean of an empty point list is undefined")
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in points])
    n = stack.shape[-1]
    if stack.shape[-2] != n:
        raise ShapeError(f"points must be square, got {stack.shape[-2:]}")
    return stack


def karcher_wfm(points: Sequence[np.ndarray], w: np.ndarray,
                cfg: WfmConfig | None = None) -> WfmResult:
    """Weighted Fréchet mean by Karcher flow.

    Starting from the weighted arithmetic mean (always SPD), iterates

        M <- exp_M( sum_i w_i log_M(X_i) )

    until the tangent residual drops below ``cfg.tol`` or ``cfg.max_iters``
    is exhausted.  Non-convergence returns the last iterate with
    ``converged=False`` rather than raising.
    """
    cfg = cfg or WfmConfig()
    stack = _as_stack(points)
    w = check_weights(w, stack.shape[0])
    M = np.einsum("k,kij->ij", w, stack)
    residual = np.inf
    for it in range(cfg.max_iters):
        tangents = log_map(np.broadcast_to(M, stack.shape), stack)
        step = np.einsum("k,kij->ij", w, tangents)
        residual = float(np.linalg.norm(step))
        if residual < cfg.tol:
            return WfmResult(M, True, it, residual)
        M = exp_map(M, step)
    tangents = log_map(np.broadcast_to(M, stack.shape), stack)
    residual = float(np.linalg.norm(np.einsum("k,kij->ij", w, tangents)))
    return WfmResult(M, residual < cfg.tol, cfg.max_iters, residual)


def recursive_wfm(points: Sequence[np.ndarray], w: np.ndarray) -> WfmResult:
    """Weighted Fréchet mean by the recursive geodesic pass.

    M_1 = X_1, then M_k walks from M_{k-1} toward X_k by the fraction
    t_k = w_k / sum_{j<=k} w_j.  One pass, no iteration; the result is
    order dependent for more than two points.
    """
    stack = _as_stack(points)
    w = check_weights(w, stack.shape[0])
    M = stack[0].copy()
    cum = w[0]
    for k in range(1, stack.shape[0]):
        cum += w[k]
        t = w[k] / cum if cum > 0.0 else 0.0
        if t > 0.0:
            M = exp_map(M, t * log_map(M, stack[k]))
    tangents = log_map(np.broadcast_to(M, stack.shape), stack)
    residual = float(np.linalg.norm(np.einsum("k,kij->ij", w, tangents)))
    return WfmResult(sym_part(M), True, stack.shape[0] - 1, residual)


def batch_barycenter(points: Sequence[np.ndarray],
                     cfg: WfmConfig | None = None) -> WfmResult:
    """Unweighted Riemannian barycenter: karcher_wfm with uniform weights."""
    n = len(points)
    if n == 0:
        raise ContractError("barycenter of an empty point list is undefined")
    w = np.full(n, 1.0 / n)
    w[-1] = 1.0 - w[:-1].sum()  # exact simplex sum regardless of n
    return karcher_wfm(points, w, cfg)


def wfm(points: Sequence[np.ndarray], w: np.ndarray,
        cfg: WfmConfig | None = None) -> WfmResult:
    """Dispatch on cfg.solver."""
    cfg = cfg or WfmConfig()
    if cfg.solver == "recursive":
        return recursive_wfm(points, w)
    return karcher_wfm(points, w, cfg)
