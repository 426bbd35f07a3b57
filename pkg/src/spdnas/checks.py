"""Built-in gradient verification suite.

Each entry builds a small random instance (n <= 8) of one differentiable
operation, or a whole supernet, and compares tape gradients against central
finite differences.  Used by the ``gradcheck`` CLI command and the test
suite; deterministic for a fixed seed.
"""

from __future__ import annotations

import numpy as np

from . import data, manifold, search_space as ss
from . import tape as T
from .layers import (BiMap, Ctx, SkipReduced, SpdBatchNorm,
                     WeightedRiemPooling)
from .simplex import activation_op
from .tape import Parameter, gradcheck

DEFAULT_TOL = 1e-4
DEFAULT_STEP = 1e-6

# spectra are kept away from the ReEig threshold and from degeneracy so the
# finite differences do not straddle a kink
_REEIG_EPS = 0.05


def _spd_leaf(rng, n, stack=(), cond=20.0):
    return Parameter("X", manifold.random_spd(rng, n, stack=stack, cond=cond),
                     sym=True)


def _ctx(tape, iters=3):
    # tol=0 fixes the unroll length so perturbed runs stay comparable
    return Ctx(tape, training=True, update_running=False,
               wfm_iters=iters, wfm_tol=0.0)


def _check_bimap(rng):
    layer = BiMap("op", 6, 3, rng)
    x = _spd_leaf(rng, 6, stack=(2,))

    def fn(tape, vs):
        xv, wv = vs
        return T.frob_sq(T.sym_fn(T.sym(T.matmul(T.matmul(T.transpose(wv), xv), wv)), "log"))

    return fn, [x, Parameter("W", layer.W.value, kind="stiefel")]


def _check_reeig(rng):
    # spectrum straddles the threshold with a safe margin on each side
    U = manifold.random_spd(rng, 5)
    vecs, _ = manifold.sym_eig(U)
    lam = np.array([1.3, 0.9, 0.4, 0.011, 0.002])
    X = (vecs * lam) @ vecs.T
    x = Parameter("X", manifold.sym_part(X), sym=True)

    def fn(tape, vs):
        return T.frob_sq(T.sym_fn(vs[0], "reeig", eps=_REEIG_EPS))

    return fn, [x]


def _check_logeig(rng):
    x = _spd_leaf(rng, 5)

    def fn(tape, vs):
        return T.frob_sq(T.sym_fn(vs[0], "log"))

    return fn, [x]


def _check_expeig(rng):
    s = Parameter("S", manifold.random_sym(rng, 5, scale=0.5), sym=True)

    def fn(tape, vs):
        return T.frob_sq(T.sym_fn(vs[0], "exp"))

    return fn, [s]


def _check_chain(rng):
    """BiMap -> ReEig -> LogEig -> Frobenius norm."""
    W = Parameter("W", np.asarray(BiMap("c", 6, 4, rng).W.value), kind="stiefel")
    x = _spd_leaf(rng, 6, stack=(2,))

    def fn(tape, vs):
        xv, wv = vs
        y = T.sym(T.matmul(T.matmul(T.transpose(wv), xv), wv))
        y = T.sym_fn(y, "reeig", eps=_REEIG_EPS)
        return T.frob_sq(T.sym_fn(y, "log"))

    return fn, [x, W]


def _bind_watch(tape, leaves, vars_):
    """Route ``tape.watch`` of model parameters onto gradcheck leaf nodes,
    matched by name; unchecked parameters become constants."""
    by_name = {l.name: v for l, v in zip(leaves, vars_)}
    real = tape.watch

    def watch(param, requires_grad=True):
        hit = by_name.get(param.name)
        if hit is not None:
            return hit
        return real(param, False)

    tape.watch = watch


def _check_batchnorm(rng):
    bn = SpdBatchNorm("op.bn", 4)
    bn.S.value = manifold.random_sym(rng, 4, scale=0.3)
    x = _spd_leaf(rng, 4, stack=(3,))
    sp = Parameter(bn.S.name, bn.S.value.copy(), sym=True)

    def fn(tape, vs):
        _bind_watch(tape, [x, sp], vs)
        out = bn.forward(_ctx(tape), vs[0])
        return T.frob_sq(T.sym_fn(out, "log"))

    return fn, [x, sp]


def _check_wrp(rng):
    pool = WeightedRiemPooling("op.wrp", 2, rng)
    x = _spd_leaf(rng, 4, stack=(2, 2))
    logits = Parameter(pool.logits.name, pool.logits.value.copy())

    def fn(tape, vs):
        _bind_watch(tape, [x, logits], vs)
        out = pool.forward(_ctx(tape), vs[0])
        return T.frob_sq(T.sym_fn(out, "log"))

    return fn, [x, logits]


def _check_avg_pool(rng):
    x = _spd_leaf(rng, 6, stack=(2,))

    def fn(tape, vs):
        y = T.sym(T.pool2d(T.sym_fn(vs[0], "log"), 2, "avg"))
        return T.frob_sq(T.sym_fn(y, "exp"))

    return fn, [x]


def _check_max_pool(rng):
    x = _spd_leaf(rng, 6, stack=(2,))

    def fn(tape, vs):
        y = T.sym(T.pool2d(T.sym_fn(vs[0], "log"), 2, "max"))
        return T.frob_sq(T.sym_fn(y, "exp"))

    return fn, [x]


def _check_skip_reduced(rng):
    block = SkipReduced("op.skipr", 6, 4, rng)
    x = _spd_leaf(rng, 6, stack=(2,))
    w1 = Parameter("W1", block.W1.W.value.copy(), kind="stiefel")
    w2 = Parameter("W2", block.W2.W.value.copy(), kind="stiefel")

    def fn(tape, vs):
        xv, a, b = vs
        c1 = T.sym(T.matmul(T.matmul(T.transpose(a), xv), a))
        c2 = T.sym(T.matmul(T.matmul(T.transpose(b), xv), b))
        return T.frob_sq(T.sym_fn(T.block_diag2(c1, c2), "log"))

    return fn, [x, w1, w2]


def _check_karcher_weights(rng):
    pts = Parameter("points", manifold.random_spd(rng, 4, stack=(4,)), sym=True)
    w = Parameter("w", np.array([0.4, 0.3, 0.2, 0.1]))

    def fn(tape, vs):
        return T.frob_sq(T.sym_fn(T.karcher_flow(vs[0], vs[1], 5, 0.0), "log"))

    return fn, [pts, w]


def _check_mixed_edge(rng):
    """A full Fréchet mixture over the normal candidate catalogue."""
    spec = ss.CellSpec("normal", 4, 4, channels_in=1, node_count=4)
    cell = ss.SearchCell("cell", spec, rng, eps=_REEIG_EPS, momentum=0.9,
                         wrp_activation="softmax")
    ops = cell.ops[(0, 2)]
    x = _spd_leaf(rng, 4, stack=(1, 2))
    logits = Parameter("alpha", 0.1 * rng.standard_normal(len(ops)))
    leaves = [x, logits]
    for op in ops:
        leaves.extend(Parameter(p.name, p.value.copy(), p.kind, p.sym)
                      for p in op.params())

    def fn(tape, vs):
        _bind_watch(tape, leaves, vs)
        w = activation_op("softmax", vs[1])
        out = ss.mixed_edge_forward(_ctx(tape), vs[0], ops, w)
        return T.frob_sq(T.sym_fn(out, "log"))

    return fn, leaves


def _check_node_aggregate(rng):
    a = Parameter("A", manifold.random_spd(rng, 4, stack=(1, 2)), sym=True)
    b = Parameter("B", manifold.random_spd(rng, 4, stack=(1, 2)), sym=True)
    c = Parameter("C", manifold.random_spd(rng, 4, stack=(1, 2)), sym=True)

    def fn(tape, vs):
        out = ss.node_aggregate(_ctx(tape), list(vs))
        return T.frob_sq(T.sym_fn(out, "log"))

    return fn, [a, b, c]


def _check_supernet(rng):
    """Loss gradient of a full 5-node supernet (n=8) w.r.t. every Stiefel
    parameter and architecture logit."""
    cfg = ss.ModelConfig(input_dim=8, stem_dim=8, classes=3,
                         cells=("reduction", "normal"))
    net = ss.Supernet(cfg, rng, activation="softmax")
    for plist in net.alphas.values():
        for p in plist:
            p.value = 0.1 * rng.standard_normal(p.value.shape)
    X = manifold.random_spd(rng, 8, stack=(2,), cond=10.0)
    y = np.array([0, 2])
    checked = [Parameter(p.name, p.value.copy(), p.kind, p.sym)
               for p in net.all_params()
               if p.kind == "stiefel" or p.name.startswith("alpha.")]

    def fn(tape, vs):
        _bind_watch(tape, checked, vs)
        logits = net.forward(_ctx(tape, iters=2), X)
        return T.cross_entropy(logits, y)

    return fn, checked


SUITE = [
    ("bimap", _check_bimap),
    ("reeig", _check_reeig),
    ("logeig", _check_logeig),
    ("expeig", _check_expeig),
    ("bimap_reeig_logeig_chain", _check_chain),
    ("batchnorm", _check_batchnorm),
    ("weighted_riem_pooling", _check_wrp),
    ("avg_pool_reduced", _check_avg_pool),
    ("max_pool_reduced", _check_max_pool),
    ("skip_reduced", _check_skip_reduced),
    ("karcher_wfm_weights", _check_karcher_weights),
    ("mixed_edge", _check_mixed_edge),
    ("node_aggregate", _check_node_aggregate),
    ("supernet_5node", _check_supernet),
]


def run_suite(seed: int = 0, tol: float = DEFAULT_TOL, step: float = DEFAULT_STEP,
              max_coords: int = 4, names=None):
    """Run the gradient suite; returns (all_ok, list of (name, report))."""
    results = []
    ok = True
    for name, builder in SUITE:
        if names and name not in names:
            continue
        rng = data.substream(seed, f"gradcheck.{name}")
        fn, leaves = builder(rng)
        report = gradcheck(fn, leaves, step=step, max_coords=max_coords,
                           rng=data.substream(seed, f"gradcheck.coords.{name}"))
        results.append((name, report))
        ok = ok and report.ok(tol)
    return ok, results
