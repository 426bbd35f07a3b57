"""Define-by-run reverse-mode differentiation for dense matrix programs.

A :class:`Tape` records operations as they execute; :meth:`Tape.backward`
replays them in reverse, accumulating adjoints.  Values are float64 numpy
arrays, possibly stacked along leading axes, so a whole batch flows through
one node.  The tape is rebuilt on every forward pass; nothing is cached
across passes.

Matrix functions of symmetric matrices (log, exp, sqrt, invsqrt, eigenvalue
rectification) are primitives.  Their input adjoint for Y = U f(L) U^T is

    dX = U (P o (U^T G U)) U^T,   P_ij = (f(l_i)-f(l_j))/(l_i-l_j),
                                  P_ii = f'(l_i),

with the divided difference replaced by f'((l_i+l_j)/2) when
|l_i - l_j| < 1e-12.  Adjoints of symmetric-valued nodes are symmetrized
before use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError
from .manifold import EIG_FLOOR, sym_part

Array = np.ndarray


# ---------------------------------------------------------------------------
# parameters

@dataclass
class Parameter:
    """A named learnable tensor.

    ``kind`` is "stiefel" for column-orthonormal matrices updated by
    Riemannian SGD, "euclidean" otherwise.  ``sym`` marks symmetric-valued
    parameters (their adjoints are symmetrized and finite differences
    perturb entry pairs jointly).
    """

    name: str
    value: Array
    kind: str = "euclidean"
    sym: bool = False

    def copy(self) -> "Parameter":
        return Parameter(self.name, self.value.copy(), self.kind, self.sym)


# ---------------------------------------------------------------------------
# tape core

class Var:
    """A value on the tape."""

    __slots__ = ("value", "tape", "id", "sym", "requires_grad", "_eig")

    def __init__(self, value, tape, id, sym, requires_grad):
        self.value = value
        self.tape = tape
        self.id = id
        self.sym = sym
        self.requires_grad = requires_grad
        self._eig = None

    @property
    def shape(self):
        return self.value.shape


class GradientStore:
    """Accumulated adjoints keyed by tape node id."""

    def __init__(self, grads: dict[int, Array]):
        self._grads = grads

    def of(self, var: Var) -> Array:
        """Adjoint of ``var``; zeros for unreachable leaves."""
        g = self._grads.get(var.id)
        if g is None:
            return np.zeros_like(var.value)
        return sym_part(g) if var.sym else g


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self):
        self._recs: list[tuple[Var, tuple[Var, ...], Callable | None, str]] = []
        self._next_id = 0
        self.watched: list[tuple[Parameter, Var]] = []
        self._watch_map: dict[int, Var] = {}

    def _make(self, value, sym, requires_grad) -> Var:
        v = Var(np.asarray(value, dtype=np.float64), self, self._next_id,
                sym, requires_grad)
        self._next_id += 1
        return v

    def leaf(self, value, sym: bool = False, requires_grad: bool = True) -> Var:
        var = self._make(value, sym, requires_grad)
        self._recs.append((var, (), None, "leaf"))
        return var

    def const(self, value, sym: bool = False) -> Var:
        return self.leaf(value, sym=sym, requires_grad=False)

    def watch(self, param: Parameter, requires_grad: bool = True) -> Var:
        """Register a parameter as a leaf and remember the association.

        Watching the same parameter twice on one tape returns the existing
        leaf so adjoints from multiple uses accumulate on a single node.
        """
        cached = self._watch_map.get(id(param))
        if cached is not None:
            return cached
        var = self.leaf(param.value, sym=param.sym, requires_grad=requires_grad)
        self.watched.append((param, var))
        self._watch_map[id(param)] = var
        return var

    def record(self, tag: str, parents: Sequence[Var], value: Array,
               vjp: Callable | None, sym: bool = False) -> Var:
        """Append an operation node.

        ``vjp`` maps the output adjoint to a tuple of parent adjoints (None
        entries allowed).  Parents must already live on this tape.
        """
        for p in parents:
            if not isinstance(p, Var) or p.tape is not self:
                raise ContractError(
                    f"record({tag!r}): parent is not a node of this tape"
                )
        rg = any(p.requires_grad for p in parents)
        var = self._make(value, sym, rg)
        self._recs.append((var, tuple(parents), vjp if rg else None, tag))
        return var

    def backward(self, loss: Var) -> GradientStore:
        """Reverse sweep from a scalar loss node.

        Adjoints of symmetric-valued nodes are symmetrized before their
        vjp runs; unreachable leaves simply get zero gradient.
        """
        if loss.tape is not self:
            raise ContractError("backward: loss is not a node of this tape")
        if loss.value.shape != ():
            raise ContractError(
                f"backward: loss must be scalar, got shape {loss.value.shape}"
            )
        grads: dict[int, Array] = {loss.id: np.ones((), dtype=np.float64)}
        for var, parents, vjp, tag in reversed(self._recs):
            g = grads.get(var.id)
            if g is None or vjp is None:
                continue
            if var.sym:
                g = sym_part(g)
            parent_grads = vjp(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(p.id)
                grads[p.id] = pg if acc is None else acc + pg
        return GradientStore(grads)

    def grads_for_watched(self, loss: Var) -> dict[str, Array]:
        """Backward, then gather adjoints for all watched parameters."""
        store = self.backward(loss)
        return {p.name: store.of(v) for p, v in self.watched}

    def release(self) -> None:
        """Drop all records, breaking Var<->Tape reference cycles.

        Training loops call this after each step so large graphs are freed
        by reference counting instead of full garbage-collector scans.
        """
        self._recs.clear()
        self.watched.clear()
        self._watch_map.clear()


def _eig_of(x: Var):
    """Eigendecomposition of a symmetric-valued node, cached on the node."""
    if x._eig is None:
        lam, U = np.linalg.eigh(x.value)
        x._eig = (U, lam)
    return x._eig


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural primitives

def add(a: Var, b: Var) -> Var:
    val = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return a.tape.record("add", (a, b), val, vjp, sym=a.sym and b.sym)


def sub(a: Var, b: Var) -> Var:
    val = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return a.tape.record("sub", (a, b), val, vjp, sym=a.sym and b.sym)


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape.record("scale", (a,), c * a.value,
                         lambda g: (c * g,), sym=a.sym)


def matmul(a: Var, b: Var) -> Var:
    val = a.value @ b.value

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return a.tape.record("matmul", (a, b), val, vjp)


def transpose(a: Var) -> Var:
    return a.tape.record("transpose", (a,), np.swapaxes(a.value, -1, -2),
                         lambda g: (np.swapaxes(g, -1, -2),), sym=a.sym)


def sym(a: Var) -> Var:
    """Symmetric part; marks the node symmetric-valued."""
    return a.tape.record("sym", (a,), sym_part(a.value),
                         lambda g: (sym_part(g),), sym=True)


def stack(vars_: Sequence[Var]) -> Var:
    val = np.stack([v.value for v in vars_])

    def vjp(g):
        return tuple(g[k] for k in range(len(vars_)))

    return vars_[0].tape.record("stack", tuple(vars_), val, vjp,
                                sym=all(v.sym for v in vars_))


def concat(vars_: Sequence[Var], axis: int = -1) -> Var:
    val = np.concatenate([v.value for v in vars_], axis=axis)
    sizes = [v.value.shape[axis] for v in vars_]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return vars_[0].tape.record("concat", tuple(vars_), val, vjp)


def wsum(points: Var, w: Var) -> Var:
    """Weighted sum over the leading axis: sum_k w_k * points[k]."""
    if w.value.ndim != 1 or w.value.shape[0] != points.value.shape[0]:
        raise ShapeError(
            f"wsum: weights {w.value.shape} do not match stack of "
            f"{points.value.shape[0]}"
        )
    val = np.tensordot(w.value, points.value, axes=(0, 0))

    def vjp(g):
        gp = w.value.reshape((-1,) + (1,) * g.ndim) * g[None, ...]
        gw = np.tensordot(points.value, g, axes=(tuple(range(1, points.value.ndim)),
                                                 tuple(range(g.ndim))))
        return gp, gw

    return points.tape.record("wsum", (points, w), val, vjp, sym=points.sym)


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    src = a.value.shape

    def vjp(g):
        return (g.reshape(src),)

    return a.tape.record("reshape", (a,), a.value.reshape(shape), vjp)


def moveaxis(a: Var, src: int, dst: int) -> Var:
    def vjp(g):
        return (np.moveaxis(g, dst, src),)

    return a.tape.record("moveaxis", (a,), np.moveaxis(a.value, src, dst), vjp)


def index0(a: Var, k: int) -> Var:
    """Select index ``k`` along the leading axis."""
    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[k] = g
        return (ga,)

    return a.tape.record("index0", (a,), a.value[k], vjp, sym=a.sym)


def trace(a: Var) -> Var:
    val = np.trace(a.value, axis1=-2, axis2=-1)
    n = a.value.shape[-1]
    eye = np.eye(n)

    def vjp(g):
        return (np.asarray(g)[..., None, None] * eye,)

    return a.tape.record("trace", (a,), val, vjp)


def sum_all(a: Var) -> Var:
    def vjp(g):
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return a.tape.record("sum_all", (a,), np.sum(a.value), vjp)


def mean_all(a: Var) -> Var:
    inv = 1.0 / a.value.size

    def vjp(g):
        return (np.broadcast_to(g * inv, a.value.shape).copy(),)

    return a.tape.record("mean_all", (a,), np.mean(a.value), vjp)


def frob_sq(a: Var) -> Var:
    """Sum of squared entries over all axes (scalar output)."""
    def vjp(g):
        return (2.0 * g * a.value,)

    return a.tape.record("frob_sq", (a,), np.sum(a.value * a.value), vjp)


# ---------------------------------------------------------------------------
# spectral primitives

_FN_TABLE: dict[str, tuple[Callable, Callable, bool]] = {
    # tag -> (f, f', needs positive-definite input)
    "log": (np.log, lambda x: 1.0 / x, True),
    "exp": (np.exp, np.exp, False),
    "sqrt": (np.sqrt, lambda x: 0.5 / np.sqrt(x), True),
    "invsqrt": (lambda x: 1.0 / np.sqrt(x),
                lambda x: -0.5 * x ** (-1.5), True),
}

_DEGENERATE_GAP = 1e-12


def _loewner(lam: Array, f: Callable, df: Callable) -> Array:
    """Divided-difference matrix P with the repeated-eigenvalue limit."""
    li = lam[..., :, None]
    lj = lam[..., None, :]
    gap = li - lj
    near = np.abs(gap) < _DEGENERATE_GAP
    fl = f(lam)
    num = fl[..., :, None] - fl[..., None, :]
    P = np.where(near, df(0.5 * (li + lj)), num / np.where(near, 1.0, gap))
    return P


def sym_fn(x: Var, fn: str, eps: float | None = None) -> Var:
    """Spectral function U f(L) U^T of a symmetric-valued node.

    ``fn`` in {log, exp, sqrt, invsqrt, reeig}; ``reeig`` rectifies
    eigenvalues to max(eps, l) and requires ``eps``.  log/sqrt/invsqrt
    raise DomainError when an eigenvalue is at or below 1e-12.
    """
    if fn == "reeig":
        if eps is None or eps <= 0.0:
            raise ContractError("sym_fn('reeig') needs eps > 0")
        e = float(eps)
        f = lambda lam: np.maximum(lam, e)
        # ties (lam == eps) take the un-clamped branch
        df = lambda lam: np.where(lam >= e, 1.0, 0.0)
    else:
        try:
            f, df, needs_pd = _FN_TABLE[fn]
        except KeyError:
            raise ContractError(f"unknown spectral function {fn!r}") from None

    U, lam = _eig_of(x)
    if fn != "reeig" and needs_pd:
        lo = float(np.min(lam))
        if lo <= EIG_FLOOR:
            raise DomainError(
                f"sym_fn({fn!r}) requires eigenvalues > {EIG_FLOOR:.0e}, "
                f"found {lo:.6e}"
            )
    val = sym_part((U * f(lam)[..., None, :]) @ np.swapaxes(U, -1, -2))

    def vjp(g):
        P = _loewner(lam, f, df)
        Ut = np.swapaxes(U, -1, -2)
        inner = P * (Ut @ g @ U)
        return (sym_part(U @ inner @ Ut),)

    return x.tape.record(f"sym_fn:{fn}", (x,), val, vjp, sym=True)


# ---------------------------------------------------------------------------
# pooling and block structure

def _pad_to_multiple(p: int, k: int) -> int:
    return (p + k - 1) // k * k


def pool2d(x: Var, k: int, mode: str) -> Var:
    """2-D pooling with kernel and stride ``k`` on the last two axes.

    The input is zero-padded on the bottom/right to the next multiple of
    ``k``.  ``mode`` is "avg" or "max"; max ties route to the lowest
    (row, column) index within the window.
    """
    p, q = x.value.shape[-2:]
    P, Q = _pad_to_multiple(p, k), _pad_to_multiple(q, k)
    lead = x.value.shape[:-2]
    xp = x.value
    if (P, Q) != (p, q):
        pad = [(0, 0)] * len(lead) + [(0, P - p), (0, Q - q)]
        xp = np.pad(xp, pad)
    blocks = xp.reshape(lead + (P // k, k, Q // k, k))
    blocks = np.moveaxis(blocks, -3, -2)           # (..., P/k, Q/k, k, k)
    flat = blocks.reshape(lead + (P // k, Q // k, k * k))

    if mode == "avg":
        val = flat.mean(axis=-1)

        def vjp(g):
            gb = np.broadcast_to(g[..., None] / (k * k),
                                 flat.shape).reshape(blocks.shape)
            gx = np.moveaxis(gb, -2, -3).reshape(lead + (P, Q))
            return (gx[..., :p, :q],)

    elif mode == "max":
        arg = np.argmax(flat, axis=-1)             # first max = lowest (row, col)
        val = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def vjp(g):
            gf = np.zeros(flat.shape)
            np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
            gx = np.moveaxis(gf.reshape(blocks.shape), -2, -3).reshape(lead + (P, Q))
            return (gx[..., :p, :q],)

    else:
        raise ContractError(f"unknown pooling mode {mode!r}")

    return x.tape.record(f"pool2d:{mode}", (x,), val, vjp)


def block_diag2(a: Var, b: Var) -> Var:
    """Block-diagonal embedding diag(A, B) on the last two axes."""
    na, nb = a.value.shape[-1], b.value.shape[-1]
    lead = np.broadcast_shapes(a.value.shape[:-2], b.value.shape[:-2])
    val = np.zeros(lead + (na + nb, na + nb))
    val[..., :na, :na] = a.value
    val[..., na:, na:] = b.value

    def vjp(g):
        return (_unbroadcast(g[..., :na, :na], a.value.shape),
                _unbroadcast(g[..., na:, na:], b.value.shape))

    return a.tape.record("block_diag2", (a, b), val, vjp,
                         sym=a.sym and b.sym)


def uppertri(x: Var, offdiag_scale: float = math.sqrt(2.0)) -> Var:
    """Flatten the upper triangle of symmetric matrices to vectors.

    Off-diagonal entries are scaled (by sqrt(2) by default) so the
    Euclidean inner product of two flattened vectors equals the Frobenius
    inner product of the matrices.
    """
    n = x.value.shape[-1]
    iu = np.triu_indices(n)
    s = np.where(iu[0] == iu[1], 1.0, offdiag_scale)
    val = x.value[..., iu[0], iu[1]] * s

    def vjp(g):
        gx = np.zeros(x.value.shape)
        gx[..., iu[0], iu[1]] = g * s
        return (gx,)

    return x.tape.record("uppertri", (x,), val, vjp)


def cross_entropy(logits: Var, labels: Array) -> Var:
    """Mean cross-entropy of (B, C) logits against integer labels."""
    z = logits.value
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes), got {z.shape}")
    labels = np.asarray(labels)
    B = z.shape[0]
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(sez)
    val = -np.mean(logp[np.arange(B), labels])

    def vjp(g):
        p = ez / sez
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return logits.tape.record("cross_entropy", (logits,), np.float64(val), vjp)


# ---------------------------------------------------------------------------
# differentiable manifold composites

def spd_sqrt_invsqrt(x: Var) -> tuple[Var, Var]:
    """X^{1/2} and X^{-1/2} as two nodes sharing one eigendecomposition."""
    return sym_fn(x, "sqrt"), sym_fn(x, "invsqrt")


def exp_map(x: Var, y: Var) -> Var:
    """Differentiable X^{1/2} exp(X^{-1/2} Y X^{-1/2}) X^{1/2}."""
    sq, isq = spd_sqrt_invsqrt(x)
    inner = sym(matmul(matmul(isq, y), isq))
    return sym(matmul(matmul(sq, sym_fn(inner, "exp")), sq))


def log_map(x: Var, z: Var) -> Var:
    """Differentiable X^{1/2} log(X^{-1/2} Z X^{-1/2}) X^{1/2}."""
    sq, isq = spd_sqrt_invsqrt(x)
    inner = sym(matmul(matmul(isq, z), isq))
    return sym(matmul(matmul(sq, sym_fn(inner, "log")), sq))


def karcher_flow(points: Var, w: Var, max_iters: int = 10,
                 tol: float = 1e-6) -> Var:
    """Unrolled Karcher flow for the weighted Fréchet mean.

    ``points`` is a (K, ..., n, n) stack, ``w`` a (K,) weight node.  The
    iteration initializes at the weighted arithmetic mean and stops early
    once every per-matrix tangent residual is below ``tol``; the gradient
    is that of the iterations actually executed.
    """
    M = sym(wsum(points, w))
    for _ in range(max_iters):
        tangents = log_map(M, points)
        step = wsum(tangents, w)
        res = np.sqrt(np.sum(step.value ** 2, axis=(-2, -1)))
        if float(np.max(res)) < tol:
            break
        M = exp_map(M, step)
    return M


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class LeafCheck:
    name: str
    max_rel_err: float
    worst_coord: tuple
    n_coords: int


@dataclass
class GradcheckReport:
    """Per-leaf central-difference comparison results."""

    leaves: list[LeafCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((l.max_rel_err for l in self.leaves), default=0.0)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol

    def __str__(self) -> str:
        lines = [
            f"  {l.name}: max rel err {l.max_rel_err:.3e} at {l.worst_coord} "
            f"({l.n_coords} coords)"
            for l in self.leaves
        ]
        return "\n".join(lines)


def _leaf_directions(value: Array, symmetric: bool):
    """Admissible perturbation directions, one per free coordinate."""
    if symmetric:
        n = value.shape[-1]
        lead = value.shape[:-2]
        for idx in np.ndindex(*lead) if lead else [()]:
            for i in range(n):
                for j in range(i, n):
                    D = np.zeros(value.shape)
                    D[idx + (i, j)] = 1.0
                    if i != j:
                        D[idx + (j, i)] = 1.0
                    yield idx + (i, j), D
    else:
        for flat in range(value.size):
            idx = np.unravel_index(flat, value.shape)
            D = np.zeros(value.shape)
            D[idx] = 1.0
            yield idx, D


def gradcheck(fn: Callable, leaves: Sequence[Parameter], step: float = 1e-6,
              max_coords: int = 0, rng: np.random.Generator | None = None
              ) -> GradcheckReport:
    """Compare tape gradients against central finite differences.

    ``fn(tape, vars) -> Var`` must build a deterministic scalar loss from
    the leaf nodes.  Symmetric leaves are perturbed with symmetric entry
    pairs; the analytic directional derivative <grad, D> is compared with
    (f(x+hD) - f(x-hD)) / 2h.  With ``max_coords > 0`` a seeded random
    subset of coordinates is checked per leaf.  Never raises; returns the
    report with the worst coordinate per leaf.
    """
    if step <= 0.0:
        raise ContractError("gradcheck step must be positive")
    tape = Tape()
    vars_ = [tape.leaf(l.value, sym=l.sym, requires_grad=True) for l in leaves]
    loss = fn(tape, vars_)
    store = tape.backward(loss)
    analytic = [store.of(v) for v in vars_]

    def value_at(leaf_idx: int, replacement: Array) -> float:
        t = Tape()
        vs = []
        for i, l in enumerate(leaves):
            arr = replacement if i == leaf_idx else l.value
            vs.append(t.leaf(arr, sym=l.sym, requires_grad=False))
        return float(fn(t, vs).value)

    report = GradcheckReport()
    for i, leaf in enumerate(leaves):
        dirs = list(_leaf_directions(leaf.value, leaf.sym))
        if max_coords and len(dirs) > max_coords:
            picker = rng if rng is not None else np.random.default_rng(0)
            keep = picker.choice(len(dirs), size=max_coords, replace=False)
            dirs = [dirs[k] for k in sorted(keep)]
        worst = (0.0, ())
        for coord, D in dirs:
            fp = value_at(i, leaf.value + step * D)
            fm = value_at(i, leaf.value - step * D)
            num = (fp - fm) / (2.0 * step)
            ana = float(np.sum(analytic[i] * D))
            rel = abs(num - ana) / max(abs(num), abs(ana), 1.0)
            if rel > worst[0]:
                worst = (rel, coord)
        report.leaves.append(LeafCheck(leaf.name, worst[0], worst[1], len(dirs)))
    return report
