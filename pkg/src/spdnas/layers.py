"""SPD network layers: BiMap, batch normalization, eigenvalue rectification,
log/exp eigenvalue maps, Riemannian poolings, and the skip/none connections.

Layer classes own their parameters and build tape nodes in ``forward``;
module-level ``*_forward`` functions are plain-numpy conveniences for
stateless use (they run the same tape code on constant leaves).  Node
values flowing between layers are stacked as (channels, batch, n, n).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import frechet, manifold, simplex
from . import tape as T
from .errors import ConfigError, ContractError, ShapeError
from .tape import Parameter, Tape, Var

DEFAULT_REEIG_EPS = 1e-4
DEFAULT_BN_MOMENTUM = 0.9


@dataclass
class Ctx:
    """Per-forward context: the tape plus mode flags and wFM settings.

    ``wfm_iters``/``wfm_tol`` govern every unrolled Karcher flow built by
    layers on this pass (mixtures, aggregation, batch normalization);
    ``wfm_tol = 0`` disables early stopping for a fixed unroll length.
    """

    tape: Tape
    training: bool = True
    update_running: bool = False
    wfm_iters: int = 10
    wfm_tol: float = 1e-6
    collect_nodes: list | None = None


def uniform_weights(m: int) -> np.ndarray:
    """Uniform simplex weights with an exactly unit sum."""
    w = np.full(m, 1.0 / m)
    w[-1] = 1.0 - float(w[:-1].sum())
    return w


def orthonormal_init(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    """Random n x m matrix with orthonormal columns (sign-fixed QR)."""
    if m > n:
        raise ShapeError(f"orthonormal_init needs m <= n, got {n}x{m}")
    Q, R = np.linalg.qr(rng.standard_normal((n, m)))
    s = np.sign(np.diag(R))
    s[s == 0.0] = 1.0
    return Q * s


# ---------------------------------------------------------------------------
# stateless pieces

def bimap_var(x: Var, w: Var) -> Var:
    """W^T X W on the tape; output marked symmetric."""
    return T.sym(T.matmul(T.matmul(T.transpose(w), x), w))


def reeig_var(x: Var, eps: float = DEFAULT_REEIG_EPS) -> Var:
    return T.sym_fn(x, "reeig", eps=eps)


def logeig_var(x: Var) -> Var:
    return T.sym_fn(x, "log")


def expeig_var(x: Var) -> Var:
    return T.sym_fn(x, "exp")


def bimap_forward(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Numpy W^T X W with shape validation."""
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or X.shape[-1] != X.shape[-2]:
        raise ShapeError(f"bimap_forward: bad shapes X{X.shape}, W{W.shape}")
    if X.shape[-1] != W.shape[0]:
        raise ShapeError(
            f"bimap_forward: X is {X.shape[-1]}x{X.shape[-1]} but W is "
            f"{W.shape[0]}x{W.shape[1]}"
        )
    return manifold.sym_part(W.T @ X @ W)


def reeig_forward(X: np.ndarray, eps: float = DEFAULT_REEIG_EPS) -> np.ndarray:
    if eps <= 0.0:
        raise ConfigError("ReEig threshold must be positive")
    U, lam = manifold.sym_eig(np.asarray(X, dtype=np.float64))
    lam = np.maximum(lam, eps)
    return manifold.sym_part((U * lam[..., None, :]) @ np.swapaxes(U, -1, -2))


def logeig_forward(X: np.ndarray) -> np.ndarray:
    return manifold.spd_fn(X, "log")


def expeig_forward(S: np.ndarray) -> np.ndarray:
    return manifold.spd_fn(S, "exp")


def skip_normal(X):
    """Identity connection: the input object itself."""
    return X


def none_normal(X: np.ndarray) -> np.ndarray:
    """The zero of the SPD space: an identity matrix of matching size."""
    X = np.asarray(X)
    return np.broadcast_to(np.eye(X.shape[-1]), X.shape).copy()


def _scratch_pool(X: np.ndarray, k: int, mode: str) -> np.ndarray:
    if k not in (2, 4):
        raise ConfigError(f"pooling kernel must be 2 or 4, got {k}")
    t = Tape()
    x = t.const(np.asarray(X, dtype=np.float64), sym=True)
    return expeig_var(T.sym(T.pool2d(logeig_var(x), k, mode))).value


def avg_pool_reduced(X: np.ndarray, k: int) -> np.ndarray:
    """LogEig -> average pooling (kernel=stride=k) -> ExpEig."""
    return _scratch_pool(X, k, "avg")


def max_pool_reduced(X: np.ndarray, k: int) -> np.ndarray:
    """LogEig -> max pooling (kernel=stride=k) -> ExpEig."""
    return _scratch_pool(X, k, "max")


def skip_reduced_forward(X: np.ndarray, W1: np.ndarray, W2: np.ndarray) -> np.ndarray:
    """Block-diagonal of the two half-width bilinear maps.

    With C_i = W_i^T X W_i and C_i = U_i D_i U_i^T, the block assembly
    diag(U_1,U_2) diag(D_1,D_2) diag(U_1,U_2)^T reconstructs diag(C_1,C_2)
    exactly, so that is what gets computed.
    """
    C1 = bimap_forward(X, W1)
    C2 = bimap_forward(X, W2)
    m = C1.shape[-1] + C2.shape[-1]
    out = np.zeros(C1.shape[:-2] + (m, m))
    out[..., : C1.shape[-1], : C1.shape[-1]] = C1
    out[..., C1.shape[-1]:, C1.shape[-1]:] = C2
    return out


def weighted_riem_pooling(channels, weights, cfg: frechet.WfmConfig | None = None):
    """Numpy weighted Riemannian pooling: one wFM per weight row."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[1] != len(channels):
        raise ShapeError(
            f"pooling weights {weights.shape} do not match {len(channels)} channels"
        )
    return [frechet.karcher_wfm(channels, w, cfg).mean for w in weights]


# ---------------------------------------------------------------------------
# parameterized layers

class BiMap:
    """Bilinear dense layer W^T X W with a column-orthonormal weight."""

    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator):
        if n_out > n_in:
            raise ConfigError(f"BiMap cannot expand dimension ({n_in} -> {n_out})")
        self.n_in, self.n_out = n_in, n_out
        self.W = Parameter(f"{name}.W", orthonormal_init(rng, n_in, n_out),
                           kind="stiefel")

    def params(self):
        return [self.W]

    def forward(self, ctx: Ctx, x: Var) -> Var:
        if x.value.shape[-1] != self.n_in:
            raise ShapeError(
                f"BiMap expects {self.n_in}x{self.n_in} input, got {x.value.shape}"
            )
        return bimap_var(x, ctx.tape.watch(self.W))


class ReEig:
    """Eigenvalue rectification U max(eps I, L) U^T."""

    def __init__(self, eps: float = DEFAULT_REEIG_EPS):
        if eps <= 0.0:
            raise ConfigError("ReEig threshold must be positive")
        self.eps = eps

    def params(self):
        return []

    def forward(self, ctx: Ctx, x: Var) -> Var:
        return reeig_var(x, self.eps)


class SpdBatchNorm:
    """Riemannian batch normalization with a learnable SPD bias.

    The bias G is parameterized as exp(S) of an unconstrained symmetric S,
    so it stays SPD under plain gradient updates.  The running mean is
    updated outside the tape as wfm({batch_mean, running}, (1-theta, theta))
    and is treated as a constant during backward.
    """

    def __init__(self, name: str, n: int, momentum: float = DEFAULT_BN_MOMENTUM):
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError("batchnorm momentum must lie in [0, 1]")
        self.name = name
        self.n = n
        self.momentum = momentum
        self.S = Parameter(f"{name}.bias_log", np.zeros((n, n)), sym=True)
        self.running_mean = np.eye(n)

    def params(self):
        return [self.S]

    @property
    def bias(self) -> np.ndarray:
        return manifold.spd_fn(self.S.value, "exp")

    def set_bias(self, G: np.ndarray) -> None:
        self.S.value = manifold.spd_fn(np.asarray(G, dtype=np.float64), "log")

    def forward(self, ctx: Ctx, x: Var) -> Var:
        if x.value.ndim < 3:
            raise ShapeError("SpdBatchNorm expects a stacked (..., n, n) input")
        if ctx.training:
            nb = int(np.prod(x.value.shape[:-2]))
            if nb == 0:
                raise ContractError("batch normalization of an empty batch")
            flat = T.reshape(x, (nb, self.n, self.n)) if x.value.ndim > 3 else x
            w = ctx.tape.const(uniform_weights(nb))
            base = T.karcher_flow(flat, w, ctx.wfm_iters, ctx.wfm_tol)
            if ctx.update_running:
                upd = frechet.karcher_wfm(
                    [base.value, self.running_mean],
                    np.array([1.0 - self.momentum, self.momentum]),
                    frechet.WfmConfig(max_iters=20, tol=1e-10),
                )
                self.running_mean = upd.mean
        else:
            base = ctx.tape.const(self.running_mean, sym=True)
        isq = T.sym_fn(base, "invsqrt")
        centered = T.sym(T.matmul(T.matmul(isq, x), isq))
        sq_bias = T.sym_fn(T.scale(ctx.tape.watch(self.S), 0.5), "exp")
        return T.sym(T.matmul(T.matmul(sq_bias, centered), sq_bias))

    def forward_arrays(self, batch: np.ndarray, mode: str = "train",
                       wfm_iters: int = 10, wfm_tol: float = 1e-6) -> np.ndarray:
        """Numpy convenience: run forward on a (B, n, n) batch."""
        t = Tape()
        ctx = Ctx(t, training=(mode == "train"), update_running=(mode == "train"),
                  wfm_iters=wfm_iters, wfm_tol=wfm_tol)
        return self.forward(ctx, t.const(batch, sym=True)).value


class WeightedRiemPooling:
    """Channel-mixing pooling: each output channel is a wFM of all input
    channels, with learnable logits mapped through a simplex activation."""

    def __init__(self, name: str, channels: int, rng: np.random.Generator,
                 activation: str = "softmax"):
        if channels < 1:
            raise ConfigError("WeightedRiemPooling needs at least one channel")
        self.channels = channels
        self.activation = activation
        self.logits = Parameter(f"{name}.logits",
                                0.01 * rng.standard_normal((channels, channels)))

    def params(self):
        return [self.logits]

    def forward(self, ctx: Ctx, x: Var) -> Var:
        if x.value.shape[0] != self.channels:
            raise ShapeError(
                f"pooling built for {self.channels} channels, got {x.value.shape[0]}"
            )
        logits = ctx.tape.watch(self.logits)
        outs = []
        for j in range(self.channels):
            wj = simplex.activation_op(self.activation, T.index0(logits, j))
            outs.append(T.karcher_flow(x, wj, ctx.wfm_iters, ctx.wfm_tol))
        return T.stack(outs)


class PoolReduced:
    """LogEig -> 2D avg/max pooling -> ExpEig, with an optional fixed BiMap
    down to the exact target dimension when the kernel does not divide it."""

    def __init__(self, name: str, mode: str, n_in: int, n_out: int,
                 rng: np.random.Generator, k: int | None = None):
        if mode not in ("avg", "max"):
            raise ConfigError(f"unknown pooling mode {mode!r}")
        if k is None:
            k = 4 if n_in >= 4 * n_out else 2
        if k not in (2, 4):
            raise ConfigError(f"pooling kernel must be 2 or 4, got {k}")
        self.mode, self.k, self.n_in, self.n_out = mode, k, n_in, n_out
        pooled = (n_in + k - 1) // k
        self.proj = None
        if pooled != n_out:
            self.proj = BiMap(f"{name}.proj", pooled, n_out, rng)

    def params(self):
        return self.proj.params() if self.proj else []

    def forward(self, ctx: Ctx, x: Var) -> Var:
        out = expeig_var(T.sym(T.pool2d(logeig_var(x), self.k, self.mode)))
        if self.proj is not None:
            out = self.proj.forward(ctx, out)
        return out


class SkipReduced:
    """Two half-width bilinear maps assembled block-diagonally."""

    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator):
        if n_out % 2 != 0:
            raise ConfigError(f"Skip_reduced needs an even output dim, got {n_out}")
        half = n_out // 2
        if half > n_in:
            raise ConfigError(f"Skip_reduced: {n_out}//2 exceeds input dim {n_in}")
        self.n_in, self.n_out = n_in, n_out
        self.W1 = BiMap(f"{name}.half0", n_in, half, rng)
        self.W2 = BiMap(f"{name}.half1", n_in, half, rng)

    def params(self):
        return self.W1.params() + self.W2.params()

    def forward(self, ctx: Ctx, x: Var) -> Var:
        return T.block_diag2(self.W1.forward(ctx, x), self.W2.forward(ctx, x))
