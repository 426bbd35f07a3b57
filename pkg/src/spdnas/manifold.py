"""Core primitives on the manifold of symmetric positive definite matrices.

All functions operate on plain float64 numpy arrays.  Matrices may be
stacked along leading axes, i.e. shape ``(..., n, n)``; scalar results then
have shape ``(...,)``.  The metric throughout is the affine-invariant one,
with the distance

    d(X1, X2) = 0.5 * ||log(X1^{-1/2} X2 X1^{-1/2})||_F

which is invariant under congruence X -> M X M^T by any invertible M.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractError, DomainError, ShapeError

# Tolerances shared across the package.
SYM_RTOL = 1e-10          # max|X - X^T| <= SYM_RTOL * max|X|
EIG_FLOOR = 1e-12         # eigenvalues below this are a domain error for log/invsqrt
RECON_RTOL = 1e-9


class EigDecomp(NamedTuple):
    """Eigendecomposition of a symmetric matrix.

    ``vectors`` has orthonormal columns, ``values`` is sorted descending,
    and ``vectors @ diag(values) @ vectors.T`` reconstructs the input.
    """

    vectors: np.ndarray
    values: np.ndarray


def sym_part(X: np.ndarray) -> np.ndarray:
    """Symmetric part (X + X^T)/2, exact for already-symmetric input."""
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def check_symmetric(X: np.ndarray, name: str = "matrix") -> None:
    """Raise ContractError unless X is symmetric within SYM_RTOL."""
    if X.ndim < 2 or X.shape[-1] != X.shape[-2]:
        raise ShapeError(f"{name} must be square, got shape {X.shape}")
    scale = np.max(np.abs(X)) if X.size else 0.0
    skew = np.max(np.abs(X - np.swapaxes(X, -1, -2)))
    if skew > SYM_RTOL * max(scale, 1e-300):
        raise ContractError(
            f"{name} is not symmetric: max|X - X^T| = {skew:.3e} "
            f"exceeds {SYM_RTOL:.0e} * max|X| = {SYM_RTOL * scale:.3e}"
        )


def check_spd(X: np.ndarray, name: str = "matrix") -> None:
    """Raise unless X is symmetric with strictly positive eigenvalues."""
    check_symmetric(X, name)
    lo = float(np.min(np.linalg.eigvalsh(X)))
    if lo <= 0.0:
        raise DomainError(f"{name} is not positive definite: min eigenvalue = {lo:.3e}")


def _fix_eigvec_signs(U: np.ndarray) -> np.ndarray:
    """Flip each eigenvector so its largest-magnitude entry is positive.

    Makes sym_eig deterministic up to the LAPACK output itself; ties in
    magnitude resolve to the lowest row index via argmax.
    """
    idx = np.argmax(np.abs(U), axis=-2)
    picked = np.take_along_axis(U, idx[..., None, :], axis=-2)[..., 0, :]
    signs = np.where(picked < 0.0, -1.0, 1.0)
    return U * signs[..., None, :]


def sym_eig(S: np.ndarray, check: bool = True) -> EigDecomp:
    """Eigendecomposition of a symmetric matrix, descending eigenvalues.

    The sign of each eigenvector is fixed (largest-magnitude entry
    positive) so repeated calls on bit-identical input are bit-identical.
    """
    if check:
        check_symmetric(S, "sym_eig input")
    vals, vecs = np.linalg.eigh(S)
    vals = vals[..., ::-1]
    vecs = vecs[..., ::-1]
    return EigDecomp(_fix_eigvec_signs(np.ascontiguousarray(vecs)),
                     np.ascontiguousarray(vals))


_SCALAR_FN = {
    "log": np.log,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "invsqrt": lambda x: 1.0 / np.sqrt(x),
}

_NEEDS_PD = frozenset({"log", "sqrt", "invsqrt"})


def spd_fn(X: np.ndarray, fn: str, p: float | None = None,
           check: bool = True) -> np.ndarray:
    """Apply a scalar function to the spectrum: U f(Lambda) U^T.

    ``fn`` is one of ``log``, ``exp``, ``sqrt``, ``invsqrt``, ``power``
    (the latter takes the exponent ``p``).  For log/sqrt/invsqrt the input
    must be positive definite; eigenvalues at or below 1e-12 raise
    DomainError rather than being clamped.
    """
    U, lam = sym_eig(X, check=check)
    if fn in _NEEDS_PD:
        lo = float(np.min(lam))
        if lo <= EIG_FLOOR:
            raise DomainError(
                f"spd_fn({fn!r}) requires eigenvalues > {EIG_FLOOR:.0e}, "
                f"found {lo:.6e}"
            )
    if fn == "power":
        if p is None:
            raise ContractError("spd_fn('power') requires the exponent p")
        flam = lam ** p
    else:
        try:
            flam = _SCALAR_FN[fn](lam)
        except KeyError:
            raise ContractError(f"unknown matrix function tag {fn!r}") from None
    return (U * flam[..., None, :]) @ np.swapaxes(U, -1, -2)


def _check_same_shape(A: np.ndarray, B: np.ndarray, what: str) -> None:
    if A.shape[-1] != B.shape[-1] or A.shape[-2] != B.shape[-2]:
        raise ShapeError(f"{what}: dimension mismatch {A.shape} vs {B.shape}")


def spd_distance(X1: np.ndarray, X2: np.ndarray) -> float | np.ndarray:
    """Affine-invariant distance 0.5*||log(X1^{-1/2} X2 X1^{-1/2})||_F."""
    _check_same_shape(X1, X2, "spd_distance")
    inv_sqrt = spd_fn(X1, "invsqrt")
    inner = inv_sqrt @ X2 @ inv_sqrt
    lam = np.linalg.eigvalsh(sym_part(inner))
    lo = np.min(lam)
    if lo <= 0.0:
        raise DomainError(f"spd_distance: whitened matrix has eigenvalue {lo:.3e} <= 0")
    out = 0.5 * np.sqrt(np.sum(np.log(lam) ** 2, axis=-1))
    return float(out) if out.ndim == 0 else out


def exp_map(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Riemannian exponential X^{1/2} exp(X^{-1/2} Y X^{-1/2}) X^{1/2}.

    Maps the symmetric tangent vector Y at base point X onto the manifold.
    """
    _check_same_shape(X, Y, "exp_map")
    U, lam = sym_eig(X)
    if np.min(lam) <= EIG_FLOOR:
        raise DomainError("exp_map base point is not positive definite")
    s = np.sqrt(lam)
    sq = (U * s[..., None, :]) @ np.swapaxes(U, -1, -2)
    isq = (U * (1.0 / s)[..., None, :]) @ np.swapaxes(U, -1, -2)
    inner = spd_fn(sym_part(isq @ Y @ isq), "exp", check=False)
    return sym_part(sq @ inner @ sq)


def log_map(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Riemannian logarithm X^{1/2} log(X^{-1/2} Z X^{-1/2}) X^{1/2}.

    Inverse of exp_map: returns the tangent vector at X pointing to Z.
    """
    _check_same_shape(X, Z, "log_map")
    U, lam = sym_eig(X)
    if np.min(lam) <= EIG_FLOOR:
        raise DomainError("log_map base point is not positive definite")
    s = np.sqrt(lam)
    sq = (U * s[..., None, :]) @ np.swapaxes(U, -1, -2)
    isq = (U * (1.0 / s)[..., None, :]) @ np.swapaxes(U, -1, -2)
    inner = spd_fn(sym_part(isq @ Z @ isq), "log", check=False)
    return sym_part(sq @ inner @ sq)


def congruence_transport(X: np.ndarray, A: np.ndarray,
                         direction: str = "toward_identity") -> np.ndarray:
    """Parallel transport by congruence with A^{+-1/2}.

    ``toward_identity`` computes A^{-1/2} X A^{-1/2} (centering at A),
    ``from_identity`` computes A^{1/2} X A^{1/2} (biasing toward A).
    SPD-ness of X is preserved either way.
    """
    _check_same_shape(X, A, "congruence_transport")
    if direction == "toward_identity":
        half = spd_fn(A, "invsqrt")
    elif direction == "from_identity":
        half = spd_fn(A, "sqrt")
    else:
        raise ContractError(f"unknown transport direction {direction!r}")
    return sym_part(half @ X @ half)


def random_spd(rng: np.random.Generator, n: int, stack: tuple[int, ...] = (),
               cond: float = 10.0, scale: float = 1.0) -> np.ndarray:
    """Random SPD matrices with a prescribed condition number.

    Eigenvalues are log-uniform in [scale/sqrt(cond), scale*sqrt(cond)]
    with the extremes pinned so the condition number is exactly ``cond``.
    """
    if n < 1:
        raise ShapeError("random_spd needs n >= 1")
    shape = stack + (n, n)
    G = rng.standard_normal(shape)
    Q, _ = np.linalg.qr(G)
    hi = scale * np.sqrt(cond)
    lo = scale / np.sqrt(cond)
    lam = np.exp(rng.uniform(np.log(lo), np.log(hi), stack + (n,)))
    if n >= 2:
        lam[..., 0] = hi
        lam[..., -1] = lo
    return sym_part((Q * lam[..., None, :]) @ np.swapaxes(Q, -1, -2))


def random_sym(rng: np.random.Generator, n: int, stack: tuple[int, ...] = (),
               scale: float = 1.0) -> np.ndarray:
    """Random symmetric matrices with N(0, scale^2)-ish entries."""
    G = rng.standard_normal(stack + (n, n)) * scale
    return sym_part(G)
