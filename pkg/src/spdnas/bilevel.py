"""Alternating bi-level optimization of architecture logits and weights.

Step 1 updates the architecture logits on a validation batch, either with
the plain validation gradient (first order) or with the finite-difference
hypergradient correction (second order): a virtual weight step on a model
clone, then

    grad_alpha E_val(w~) - eta * (grad_alpha E_train(w+) - grad_alpha
    E_train(w-)) / (2 delta),    w+- = retract(w +- delta * g~),

where g~ is the validation weight gradient tangent-projected at w and
delta = 0.01 / ||g~||.  Step 2 updates the weights on a training batch:
Riemannian SGD with QR retraction on Stiefel parameters, SGD with momentum
on unconstrained ones.
"""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import tape as T
from .errors import (ConfigError, ContractError, DataError, NumericError,
                     ShapeError)
from .layers import Ctx
from .manifold import sym_part
from .tape import Tape

log = logging.getLogger("spdnas")


# ---------------------------------------------------------------------------
# configs and optimizer state

@dataclass
class SearchConfig:
    """Hyperparameters consumed by the search loop.

    ``eta`` is the inner (weight) learning rate; eta = 0 is allowed and
    makes the second-order update coincide with the first-order one.
    """

    eta: float = 0.025
    alpha_lr: float = 3e-4
    alpha_betas: tuple = (0.5, 0.999)
    alpha_weight_decay: float = 1e-3
    order: str = "second"
    epochs: int = 10
    batch_size: int = 30
    topk: int = 2
    activation: str = "sparsemax"
    seed: int = 0
    wfm_iters: int = 2
    wfm_tol: float = 1e-6
    momentum: float = 0.9
    delta_norm: str = "tangent"
    workers: int = 1

    def __post_init__(self):
        problems = []
        if self.eta < 0.0:
            problems.append("eta must be >= 0")
        if self.alpha_lr <= 0.0:
            problems.append("alpha_lr must be positive")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.topk < 1:
            problems.append("topk must be >= 1")
        if self.order not in ("first", "second"):
            problems.append(f"order must be first|second, got {self.order!r}")
        if self.activation not in ("sparsemax", "softmax", "sigmoid"):
            problems.append(f"unknown activation {self.activation!r}")
        if self.delta_norm not in ("tangent", "ambient"):
            problems.append(f"delta_norm must be tangent|ambient, got {self.delta_norm!r}")
        if self.wfm_iters < 1:
            problems.append("wfm_iters must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class TrainConfig:
    """Hyperparameters for training a discrete genotype from scratch."""

    lr: float = 0.025
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 30
    seed: int = 0
    wfm_iters: int = 2
    wfm_tol: float = 1e-6
    workers: int = 1

    def __post_init__(self):
        problems = []
        if self.lr <= 0.0:
            problems.append("lr must be positive")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class AdamState:
    """Moment buffers for the architecture-logit optimizer."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class OptState:
    """All mutable optimizer state of one run."""

    alpha: AdamState = field(default_factory=AdamState)
    momentum_buf: dict = field(default_factory=dict)
    step: int = 0


# ---------------------------------------------------------------------------
# Stiefel updates

def stiefel_tangent(W: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Project an ambient gradient onto the tangent space at W:
    G - W sym(W^T G)."""
    if W.shape != G.shape:
        raise ShapeError(f"tangent projection: {W.shape} vs {G.shape}")
    return G - W @ sym_part(W.T @ G)


def qr_retract(A: np.ndarray) -> np.ndarray:
    """Thin-QR retraction with the R-diagonal sign fixed positive."""
    Q, R = np.linalg.qr(A)
    d = np.diag(R)
    if np.any(d == 0.0):
        raise NumericError("QR retraction hit a rank-deficient factor")
    s = np.where(d < 0.0, -1.0, 1.0)
    return Q * s


def riem_sgd_step(W: np.ndarray, euclid_grad: np.ndarray, eta: float) -> np.ndarray:
    """One Riemannian SGD step on the Stiefel manifold.

    An exactly-zero tangent step returns W bitwise unchanged; otherwise the
    result is the QR retraction of W - eta * tangent_grad.
    """
    xi = stiefel_tangent(W, euclid_grad)
    if eta == 0.0 or not np.any(xi):
        return W.copy()
    return qr_retract(W - eta * xi)


def stiefel_error(W: np.ndarray) -> float:
    return float(np.linalg.norm(W.T @ W - np.eye(W.shape[1])))


# ---------------------------------------------------------------------------
# loss evaluation

def network_loss_eval(model, batch, cfg, *, grad_filter=None,
                      update_running=False, training=True):
    """Forward + backward of cross-entropy on one batch.

    Returns (loss value, accuracy, grads dict).  ``grad_filter`` restricts
    which parameters receive gradients (by name set); None means all.
    """
    X, y = batch
    tape = Tape()
    if grad_filter is not None:
        names = grad_filter
        original_watch = tape.watch

        def filtered_watch(param, requires_grad=True):
            return original_watch(param, requires_grad and param.name in names)

        tape.watch = filtered_watch
    ctx = Ctx(tape, training=training, update_running=update_running,
              wfm_iters=cfg.wfm_iters, wfm_tol=cfg.wfm_tol)
    logits = model.forward(ctx, X)
    loss = T.cross_entropy(logits, y)
    value = float(loss.value)
    acc = float(np.mean(np.argmax(logits.value, axis=1) == y))
    grads = tape.grads_for_watched(loss)
    tape.release()
    return value, acc, grads


def evaluate(model, samples, cfg, batch_size: int = 64, workers: int = 1):
    """Eval-mode loss and accuracy over a list of samples.

    ``workers > 1`` fans the batches out across a thread pool (forward
    passes are pure); per-batch results are reduced in batch order, so the
    output is bitwise independent of the worker count.
    """
    if not samples:
        raise ContractError("evaluate needs at least one sample")

    def eval_chunk(chunk):
        X = np.stack([s.matrix for s in chunk])
        y = np.array([s.label for s in chunk])
        tape = Tape()
        ctx = Ctx(tape, training=False, update_running=False,
                  wfm_iters=cfg.wfm_iters, wfm_tol=cfg.wfm_tol)
        logits = model.forward(ctx, X)
        loss = float(T.cross_entropy(logits, y).value) * len(chunk)
        hits = int(np.sum(np.argmax(logits.value, axis=1) == y))
        tape.release()
        return loss, hits

    chunks = [samples[lo:lo + batch_size]
              for lo in range(0, len(samples), batch_size)]
    if workers > 1 and len(chunks) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(eval_chunk, chunks))
    else:
        results = [eval_chunk(c) for c in chunks]
    total_loss = sum(r[0] for r in results)
    hits = sum(r[1] for r in results)
    n = len(samples)
    return total_loss / n, hits / n


# ---------------------------------------------------------------------------
# parameter updates

def adam_step(params, grads, state: AdamState, lr, betas, weight_decay):
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        g = g + weight_decay * p.value
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[p.name] = m
        state.v[p.name] = v
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)


def weight_step(params, grads, opt: OptState, lr, momentum):
    """SGD with momentum on unconstrained params, Riemannian SGD on Stiefel."""
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        if p.kind == "stiefel":
            p.value = riem_sgd_step(p.value, g, lr)
        else:
            buf = opt.momentum_buf.get(p.name)
            buf = g if buf is None else momentum * buf + g
            opt.momentum_buf[p.name] = buf
            p.value = p.value - lr * buf


# ---------------------------------------------------------------------------
# alpha updates

def _apply_virtual_step(model, grads, eta):
    """Plain first-order weight step (retraction for Stiefel params)."""
    for p in model.weight_params():
        g = grads.get(p.name)
        if g is None:
            continue
        if p.kind == "stiefel":
            p.value = riem_sgd_step(p.value, g, eta)
        else:
            p.value = p.value - eta * g


def alpha_step_first_order(model, loss_eval, val_batch, cfg: SearchConfig,
                           opt: OptState):
    """Adam step on the logits from the plain validation gradient."""
    alpha_names = {p.name for p in model.alpha_params()}
    loss, _, grads = loss_eval(model, val_batch, cfg, grad_filter=alpha_names)
    adam_step(model.alpha_params(), grads, opt.alpha, cfg.alpha_lr,
              cfg.alpha_betas, cfg.alpha_weight_decay)
    return loss


def finite_diff_alpha_term(model, loss_eval, train_batch, g_w: dict,
                           cfg: SearchConfig):
    """(grad_alpha E_train(w+) - grad_alpha E_train(w-)) / (2 delta).

    ``g_w`` is the validation weight gradient at the virtual point.  The
    perturbation direction is its tangent projection at the current w; the
    step is delta = 0.01 / ||direction||, with the norm taken over Stiefel
    parameters ("tangent" mode) or over all weight entries ("ambient").
    Returns (term, delta); term is None when the norm underflows 1e-12
    (delta undefined, second-order correction skipped).
    """
    alpha_names = {p.name for p in model.alpha_params()}
    directions, sq = {}, 0.0
    sq_all = 0.0
    for p in model.weight_params():
        g = g_w.get(p.name)
        if g is None:
            continue
        d = stiefel_tangent(p.value, g) if p.kind == "stiefel" else g
        directions[p.name] = d
        sq_all += float(np.sum(d * d))
        if p.kind == "stiefel":
            sq += float(np.sum(d * d))
    norm = np.sqrt(sq if cfg.delta_norm == "tangent" else sq_all)
    if norm < 1e-12:
        log.info("second-order term skipped: validation gradient norm %.3e", norm)
        return None, None
    delta = 0.01 / norm

    def perturbed(sign):
        m = copy.deepcopy(model)
        for p in m.weight_params():
            d = directions.get(p.name)
            if d is None:
                continue
            if p.kind == "stiefel":
                p.value = qr_retract(p.value + sign * delta * d)
            else:
                p.value = p.value + sign * delta * d
        _, _, grads = loss_eval(m, train_batch, cfg, grad_filter=alpha_names)
        return grads

    ga_plus = perturbed(+1.0)
    ga_minus = perturbed(-1.0)
    return ({name: (ga_plus[name] - ga_minus[name]) / (2.0 * delta)
             for name in ga_plus}, delta)


def alpha_step_second_order(model, loss_eval, train_batch, val_batch,
                            cfg: SearchConfig, opt: OptState):
    """Adam step on the logits from the finite-difference hypergradient."""
    if cfg.eta == 0.0:
        # the second term scales with eta; this reduces exactly to first order
        return alpha_step_first_order(model, loss_eval, val_batch, cfg, opt)
    weight_names = {p.name for p in model.weight_params()}
    _, _, g_train = loss_eval(model, train_batch, cfg, grad_filter=weight_names)

    virtual = copy.deepcopy(model)
    _apply_virtual_step(virtual, g_train, cfg.eta)

    val_loss, _, g_val = loss_eval(virtual, val_batch, cfg)
    first = {p.name: g_val[p.name] for p in virtual.alpha_params()}
    fd, _ = finite_diff_alpha_term(model, loss_eval, train_batch, g_val, cfg)

    hyper = dict(first)
    if fd is not None:
        for name in hyper:
            hyper[name] = hyper[name] - cfg.eta * fd[name]
    adam_step(model.alpha_params(), hyper, opt.alpha, cfg.alpha_lr,
              cfg.alpha_betas, cfg.alpha_weight_decay)
    return val_loss


# ---------------------------------------------------------------------------
# loops

def _check_finite(value: float, where: str):
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at {where}")


def spd_spot_check(model, X: np.ndarray, cfg) -> float:
    """Forward one batch collecting every cell node; returns the smallest
    eigenvalue seen (must be > 0)."""
    tape = Tape()
    ctx = Ctx(tape, training=True, update_running=False,
              wfm_iters=cfg.wfm_iters, wfm_tol=cfg.wfm_tol)
    ctx.collect_nodes = []
    model.forward(ctx, X)
    lo = np.inf
    for node in ctx.collect_nodes:
        lo = min(lo, float(np.min(np.linalg.eigvalsh(node.value))))
    tape.release()
    if lo <= 0.0:
        raise NumericError(f"SPD spot check failed: min eigenvalue {lo:.3e}")
    return lo


def search_loop(splits, model, cfg: SearchConfig):
    """Algorithm: alternate logit updates (validation) and weight updates
    (training); derive the genotype from the final logits.

    Returns (genotype, alpha_history, metrics) where alpha_history is a
    list of per-epoch logit snapshots and metrics is one dict per epoch.
    """
    train, val = splits.train, splits.val
    if cfg.epochs > 0 and (not train or not val):
        raise ContractError("search needs nonempty train and validation splits")
    rng_tr = data_mod.substream(cfg.seed, "search.shuffle.train")
    rng_val = data_mod.substream(cfg.seed, "search.shuffle.val")
    opt = OptState()
    weight_names = {p.name for p in model.weight_params()}
    history = [_alpha_snapshot(model, 0)]
    metrics = []
    for epoch in range(cfg.epochs):
        tr_batches = data_mod.batches(train, cfg.batch_size, rng_tr)
        va_batches = data_mod.batches(val, cfg.batch_size, rng_val)
        ep_loss, ep_hits, ep_count = 0.0, 0, 0
        for i, tb in enumerate(tr_batches):
            vb = va_batches[i % len(va_batches)]
            tb_arrays = data_mod.batch_arrays(tb)
            vb_arrays = data_mod.batch_arrays(vb)
            if cfg.order == "second":
                v_loss = alpha_step_second_order(
                    model, network_loss_eval, tb_arrays, vb_arrays, cfg, opt)
            else:
                v_loss = alpha_step_first_order(
                    model, network_loss_eval, vb_arrays, cfg, opt)
            _check_finite(v_loss, f"epoch {epoch} step {i} (alpha step)")
            t_loss, t_acc, g = network_loss_eval(
                model, tb_arrays, cfg, grad_filter=weight_names,
                update_running=True)
            _check_finite(t_loss, f"epoch {epoch} step {i} (weight step)")
            weight_step(model.weight_params(), g, opt, cfg.eta, cfg.momentum)
            opt.step += 1
            ep_loss += t_loss * len(tb)
            ep_hits += int(round(t_acc * len(tb)))
            ep_count += len(tb)
        spot = spd_spot_check(model, data_mod.batch_arrays(tr_batches[0])[0], cfg)
        val_loss, val_acc = evaluate(model, val, cfg, workers=cfg.workers)
        metrics.append({
            "epoch": epoch,
            "train_loss": ep_loss / ep_count,
            "train_acc": ep_hits / ep_count,
            "val_loss": val_loss,
            "val_acc": val_acc,
        })
        history.append(_alpha_snapshot(model, epoch + 1))
        log.info("search epoch %d: train %.4f/%.3f val %.4f/%.3f min-eig %.2e",
                 epoch, metrics[-1]["train_loss"], metrics[-1]["train_acc"],
                 val_loss, val_acc, spot)
    genotype = model.derive_genotype(cfg.topk, cfg.activation)
    return genotype, history, metrics


def _alpha_snapshot(model, epoch: int):
    return {
        "epoch": epoch,
        "alphas": {kind: [p.value.copy() for p in plist]
                   for kind, plist in model.alphas.items()},
    }


def train_loop(splits, model, cfg: TrainConfig):
    """Cross-entropy training of a discrete model; returns per-epoch
    metrics and the final test accuracy."""
    train, val, test = splits.train, splits.val, splits.test
    if cfg.epochs > 0 and not train:
        raise ContractError("training needs a nonempty train split")
    rng = data_mod.substream(cfg.seed, "train.shuffle")
    opt = OptState()
    names = {p.name for p in model.weight_params()}
    metrics = []
    for epoch in range(cfg.epochs):
        ep_loss, ep_hits, ep_count = 0.0, 0, 0
        for i, tb in enumerate(data_mod.batches(train, cfg.batch_size, rng)):
            X, y = data_mod.batch_arrays(tb)
            loss, acc, g = network_loss_eval(
                model, (X, y), cfg, grad_filter=names, update_running=True)
            _check_finite(loss, f"epoch {epoch} step {i} (train)")
            weight_step(model.weight_params(), g, opt, cfg.lr, cfg.momentum)
            opt.step += 1
            ep_loss += loss * len(tb)
            ep_hits += int(round(acc * len(tb)))
            ep_count += len(tb)
        val_loss, val_acc = (evaluate(model, val, cfg, workers=cfg.workers)
                             if val else (float("nan"), float("nan")))
        metrics.append({
            "epoch": epoch,
            "train_loss": ep_loss / ep_count,
            "train_acc": ep_hits / ep_count,
            "val_loss": val_loss,
            "val_acc": val_acc,
        })
        log.info("train epoch %d: train %.4f/%.3f val %.4f/%.3f",
                 epoch, metrics[-1]["train_loss"], metrics[-1]["train_acc"],
                 val_loss, val_acc)
    test_loss, test_acc = (evaluate(model, test, cfg, workers=cfg.workers)
                           if test else (float("nan"), float("nan")))
    return metrics, test_loss, test_acc


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"SPDCKPT1"


def model_state(model) -> dict[str, np.ndarray]:
    """All named tensors needed to restore a model: parameters plus batch
    normalization running means."""
    out = {name: p.value for name, p in model.named_params().items()}
    for bn in model.batchnorms():
        out[f"{bn.name}.running_mean"] = bn.running_mean
    return out


def load_model_state(model, tensors: dict[str, np.ndarray]) -> None:
    params = model.named_params()
    running = {f"{bn.name}.running_mean": bn for bn in model.batchnorms()}
    for name, arr in tensors.items():
        if name in params:
            if params[name].value.shape != arr.shape:
                raise ShapeError(f"checkpoint tensor {name!r} has shape "
                                 f"{arr.shape}, expected {params[name].value.shape}")
            params[name].value = arr.copy()
        elif name in running:
            running[name].running_mean = arr.copy()
        else:
            raise ConfigError(f"checkpoint tensor {name!r} not in model")
    missing = (set(params) | set(running)) - set(tensors)
    if missing:
        raise ConfigError(f"checkpoint missing tensors: {sorted(missing)[:5]}")


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Binary checkpoint: magic, count, then (name, dims, float64 LE data)."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            raw = name.encode("utf-8")
            # note: ascontiguousarray would promote 0-d arrays to 1-d
            arr = np.asarray(tensors[name], dtype="<f8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:8] != _CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    off = 8
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off)
        off += 8 * size
        out[name] = arr.reshape(shape).astype(np.float64)
    return out
