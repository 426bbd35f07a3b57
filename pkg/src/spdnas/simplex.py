"""Activations mapping unconstrained logits to simplex weight vectors.

sparsemax (the default) is the Euclidean projection onto the probability
simplex, computed by the sort-and-threshold closed form; softmax and the
normalized sigmoid are the ablation alternatives.  All three return valid
weight vectors (nonnegative, summing to 1 within 1e-10) so they can feed
weighted Fréchet means directly.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from . import tape as T


def _check_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ContractError(f"activation expects a nonempty vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ContractError("activation logits must be finite")
    return z


def sparsemax(z) -> np.ndarray:
    """Euclidean projection of z onto the probability simplex.

    Sort descending, keep the largest k with 1 + k*z_(k) > sum_{j<=k} z_(j)
    (strict, so exact boundary ties fall out of the support), set
    tau = (sum_{j<=k} z_(j) - 1)/k and return max(z - tau, 0).  The input
    is anchored at its maximum first, which changes nothing mathematically
    but makes translation invariance hold exactly whenever z + c*1 is
    computed without rounding.  Equal entries sort by original index.
    """
    z = _check_logits(z)
    d = z - z[np.argmax(z)]
    order = np.argsort(-d, kind="stable")
    zs = d[order]
    k_arange = np.arange(1, zs.size + 1)
    css = np.cumsum(zs)
    support = 1.0 + k_arange * zs > css
    k = int(np.nonzero(support)[0][-1]) + 1
    tau = (css[k - 1] - 1.0) / k
    return np.maximum(d - tau, 0.0)


def sparsemax_vjp(output: np.ndarray, adjoint: np.ndarray) -> np.ndarray:
    """Jacobian-transpose product of sparsemax at a point with the given output.

    On the support S (entries > 0) the projection is locally the centering
    map, so the gradient is the adjoint minus its mean over S; off-support
    coordinates get zero.
    """
    s = output > 0.0
    grad = np.zeros_like(adjoint)
    grad[s] = adjoint[s] - adjoint[s].mean()
    return grad


def softmax(z) -> np.ndarray:
    """Numerically stable softmax; strictly positive everywhere."""
    z = _check_logits(z)
    e = np.exp(z - z.max())
    return e / e.sum()


def normalized_sigmoid(z) -> np.ndarray:
    """sigma(z_i) / sum_j sigma(z_j).

    Plain sigmoid weights do not sum to one; the normalization restores
    the weight-vector contract required by Fréchet means.
    """
    z = _check_logits(z)
    s = 1.0 / (1.0 + np.exp(-z))
    return s / s.sum()


ACTIVATIONS = ("sparsemax", "softmax", "sigmoid")


def apply_activation(name: str, z) -> np.ndarray:
    if name == "sparsemax":
        return sparsemax(z)
    if name == "softmax":
        return softmax(z)
    if name == "sigmoid":
        return normalized_sigmoid(z)
    raise ContractError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# tape ops

def sparsemax_op(z: T.Var) -> T.Var:
    out = sparsemax(z.value)

    def vjp(g):
        return (sparsemax_vjp(out, g),)

    return z.tape.record("sparsemax", (z,), out, vjp)


def softmax_op(z: T.Var) -> T.Var:
    out = softmax(z.value)

    def vjp(g):
        return (out * (g - float(np.dot(g, out))),)

    return z.tape.record("softmax", (z,), out, vjp)


def normalized_sigmoid_op(z: T.Var) -> T.Var:
    s = 1.0 / (1.0 + np.exp(-_check_logits(z.value)))
    total = s.sum()
    out = s / total

    def vjp(g):
        return (s * (1.0 - s) / total * (g - float(np.dot(g, out))),)

    return z.tape.record("normalized_sigmoid", (z,), out, vjp)


def activation_op(name: str, z: T.Var) -> T.Var:
    if name == "sparsemax":
        return sparsemax_op(z)
    if name == "softmax":
        return softmax_op(z)
    if name == "sigmoid":
        return normalized_sigmoid_op(z)
    raise ContractError(f"unknown activation {name!r}")
