"""The searched SPD cell: candidate-operation catalogue, mixed edges,
node aggregation, supernet assembly, and genotype derivation/export.

A cell is a DAG over ``node_count`` nodes: two inputs, ``node_count - 3``
intermediates, one output.  Every intermediate node receives one edge from
each earlier node; during search each edge carries a Fréchet mixture of
candidate operations weighted by activated architecture logits, and the
node value is the unweighted barycenter of its incoming edges.  The output
node concatenates the intermediate channels.  Node values are stacked
(channels, batch, n, n) arrays.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import simplex
from . import tape as T
from .errors import ConfigError, ContractError, ShapeError
from .layers import (
    BiMap,
    Ctx,
    PoolReduced,
    ReEig,
    SkipReduced,
    SpdBatchNorm,
    WeightedRiemPooling,
    uniform_weights,
)
from .tape import Parameter, Var

NORMAL_OPS = (
    "BiMap_0",
    "BiMap_1",
    "BiMap_2",
    "Skip_normal",
    "None_normal",
    "WeightedRiemannPooling_normal",
)
REDUCED_OPS = (
    "BiMap_0",
    "BiMap_1",
    "BiMap_2",
    "AveragePooling_reduced",
    "MaxPooling_reduced",
    "Skip_reduced",
    "None_normal",
)


# ---------------------------------------------------------------------------
# candidate operations

class _BiMapBlock:
    """BiMap/BN convolution block, optionally with pre or post rectification."""

    def __init__(self, tag, name, n_in, n_out, channels, rng, eps, momentum):
        self.tag = tag
        self.n_in, self.n_out = n_in, n_out
        self.pre_act = ReEig(eps) if tag == "BiMap_2" else None
        self.post_act = ReEig(eps) if tag == "BiMap_1" else None
        self.bimap = BiMap(f"{name}.bimap", n_in, n_out, rng)
        self.bn = SpdBatchNorm(f"{name}.bn", n_out, momentum)

    def params(self):
        return self.bimap.params() + self.bn.params()

    def forward(self, ctx: Ctx, x: Var) -> Var:
        if self.pre_act:
            x = self.pre_act.forward(ctx, x)
        x = self.bn.forward(ctx, self.bimap.forward(ctx, x))
        if self.post_act:
            x = self.post_act.forward(ctx, x)
        return x


class _SkipOp:
    tag = "Skip_normal"

    def __init__(self, n):
        self.n_in = self.n_out = n

    def params(self):
        return []

    def forward(self, ctx: Ctx, x: Var) -> Var:
        return x


class _NoneOp:
    """The zero of SPD space: identity output, no gradient to the input."""

    tag = "None_normal"

    def __init__(self, n_in, n_out):
        self.n_in, self.n_out = n_in, n_out

    def params(self):
        return []

    def forward(self, ctx: Ctx, x: Var) -> Var:
        shape = x.value.shape[:-2] + (self.n_out, self.n_out)
        return ctx.tape.const(np.broadcast_to(np.eye(self.n_out), shape).copy(),
                              sym=True)


class _WrpOp:
    tag = "WeightedRiemannPooling_normal"

    def __init__(self, name, n, channels, rng, activation):
        self.n_in = self.n_out = n
        self.pool = WeightedRiemPooling(name, channels, rng, activation)

    def params(self):
        return self.pool.params()

    def forward(self, ctx: Ctx, x: Var) -> Var:
        return self.pool.forward(ctx, x)


class _PoolOp:
    def __init__(self, tag, name, n_in, n_out, rng):
        self.tag = tag
        self.n_in, self.n_out = n_in, n_out
        mode = "avg" if tag.startswith("Average") else "max"
        self.pool = PoolReduced(name, mode, n_in, n_out, rng)

    def params(self):
        return self.pool.params()

    def forward(self, ctx: Ctx, x: Var) -> Var:
        return self.pool.forward(ctx, x)


class _SkipReducedOp:
    tag = "Skip_reduced"

    def __init__(self, name, n_in, n_out, rng):
        self.n_in, self.n_out = n_in, n_out
        self.block = SkipReduced(name, n_in, n_out, rng)

    def params(self):
        return self.block.params()

    def forward(self, ctx: Ctx, x: Var) -> Var:
        return self.block.forward(ctx, x)


def make_candidate(tag: str, name: str, n_in: int, n_out: int, channels: int,
                   rng: np.random.Generator, eps: float, momentum: float,
                   wrp_activation: str):
    """Instantiate one candidate operation with freshly initialized params."""
    if tag in ("BiMap_0", "BiMap_1", "BiMap_2"):
        return _BiMapBlock(tag, name, n_in, n_out, channels, rng, eps, momentum)
    if tag == "Skip_normal":
        if n_in != n_out:
            raise ConfigError("Skip_normal cannot change dimension")
        return _SkipOp(n_in)
    if tag == "None_normal":
        return _NoneOp(n_in, n_out)
    if tag == "WeightedRiemannPooling_normal":
        if n_in != n_out:
            raise ConfigError("WeightedRiemannPooling_normal cannot change dimension")
        return _WrpOp(name, n_in, channels, rng, wrp_activation)
    if tag in ("AveragePooling_reduced", "MaxPooling_reduced"):
        return _PoolOp(tag, name, n_in, n_out, rng)
    if tag == "Skip_reduced":
        return _SkipReducedOp(name, n_in, n_out, rng)
    raise ConfigError(f"unknown candidate operation {tag!r}")


# ---------------------------------------------------------------------------
# cell structure

@dataclass(frozen=True)
class CellSpec:
    """Static shape of one cell: kind, dimensions, channel width, node count."""

    kind: str
    n_in: int
    n_out: int
    channels_in: int = 1
    node_count: int = 5

    def __post_init__(self):
        if self.kind not in ("normal", "reduction"):
            raise ConfigError(f"unknown cell kind {self.kind!r}")
        if self.node_count < 4:
            raise ConfigError("a cell needs at least 4 nodes (2 in, 1 mid, 1 out)")
        if self.kind == "normal" and self.n_in != self.n_out:
            raise ConfigError("normal cells preserve dimension")
        if self.kind == "reduction" and self.n_out >= self.n_in:
            raise ConfigError("reduction cells must shrink dimension")

    @property
    def intermediates(self) -> int:
        return self.node_count - 3

    @property
    def channels_out(self) -> int:
        return self.intermediates * self.channels_in

    def edges(self) -> list[tuple[int, int]]:
        """(source, target) pairs, every i < j into each intermediate node."""
        return [(i, j) for j in range(2, 2 + self.intermediates) for i in range(j)]

    def edge_candidates(self, i: int, j: int) -> tuple[str, ...]:
        """Reducing edges (from input nodes of a reduction cell) draw from
        the reduced catalogue; everything else from the normal catalogue."""
        if self.kind == "reduction" and i < 2:
            return REDUCED_OPS
        return NORMAL_OPS

    def edge_dims(self, i: int, j: int) -> tuple[int, int]:
        src = self.n_in if i < 2 else self.n_out
        return src, self.n_out


def alpha_parameters(spec: CellSpec) -> list[Parameter]:
    """Zero-initialized architecture logits, one vector per edge.

    Zeros give a uniform mixture under any of the simplex activations.
    """
    params = []
    for i, j in spec.edges():
        k = len(spec.edge_candidates(i, j))
        params.append(Parameter(f"alpha.{spec.kind}.e{i}_{j}", np.zeros(k)))
    return params


def mixed_edge_forward(ctx: Ctx, x: Var, ops, alpha_w: Var) -> Var:
    """Fréchet mixture of candidate outputs with shared channel weights."""
    if alpha_w.value.shape != (len(ops),):
        raise ShapeError(
            f"mixed edge got {alpha_w.value.shape[0]} weights for {len(ops)} ops"
        )
    outs = []
    for op in ops:
        y = op.forward(ctx, x)
        if y.value.shape[-1] != ops[0].n_out:
            raise ShapeError(f"candidate {op.tag} produced dimension "
                             f"{y.value.shape[-1]}, expected {ops[0].n_out}")
        outs.append(y)
    return T.karcher_flow(T.stack(outs), alpha_w, ctx.wfm_iters, ctx.wfm_tol)


def node_aggregate(ctx: Ctx, edge_outs: list[Var]) -> Var:
    """Unweighted barycenter of the incoming edge values, channel-wise."""
    if not edge_outs:
        raise ContractError("node aggregation needs at least one edge")
    shapes = {v.value.shape for v in edge_outs}
    if len(shapes) > 1:
        raise ShapeError(f"edge outputs disagree in shape: {sorted(shapes)}")
    if len(edge_outs) == 1:
        return edge_outs[0]
    w = ctx.tape.const(uniform_weights(len(edge_outs)))
    return T.karcher_flow(T.stack(edge_outs), w, ctx.wfm_iters, ctx.wfm_tol)


class SearchCell:
    """A cell carrying the full candidate mixture on every edge."""

    def __init__(self, name: str, spec: CellSpec, rng: np.random.Generator,
                 eps: float, momentum: float, wrp_activation: str):
        self.name = name
        self.spec = spec
        self.ops: dict[tuple[int, int], list] = {}
        for i, j in spec.edges():
            src, dst = spec.edge_dims(i, j)
            self.ops[(i, j)] = [
                make_candidate(tag, f"{name}.e{i}_{j}.{tag}", src, dst,
                               spec.channels_in, rng, eps, momentum, wrp_activation)
                for tag in spec.edge_candidates(i, j)
            ]

    def params(self):
        out = []
        for key in sorted(self.ops):
            for op in self.ops[key]:
                out.extend(op.params())
        return out

    def forward(self, ctx: Ctx, in0: Var, in1: Var,
                alpha_ws: list[Var]) -> Var:
        spec = self.spec
        nodes = [in0, in1]
        for j in range(2, 2 + spec.intermediates):
            edge_outs = []
            for i in range(j):
                e_idx = spec.edges().index((i, j))
                edge_outs.append(
                    mixed_edge_forward(ctx, nodes[i], self.ops[(i, j)],
                                       alpha_ws[e_idx])
                )
            nodes.append(node_aggregate(ctx, edge_outs))
            if ctx.collect_nodes is not None:
                ctx.collect_nodes.append(nodes[-1])
        return T.concat(nodes[2:], axis=0)


class DiscreteCell:
    """A pruned cell: retained edges carry their chosen operation, dropped
    edges contribute the None operation (identity, the SPD zero) so node
    aggregation runs over the same predecessor set as during search."""

    def __init__(self, name: str, spec: CellSpec, nodes: list[list[tuple[int, str]]],
                 rng: np.random.Generator | None, eps: float, momentum: float,
                 wrp_activation: str, reuse_from: SearchCell | None = None):
        self.name = name
        self.spec = spec
        self.genotype_nodes = [list(n) for n in nodes]
        if len(nodes) != spec.intermediates:
            raise ConfigError(
                f"genotype has {len(nodes)} nodes, cell expects {spec.intermediates}"
            )
        chosen = {}
        for j, picks in enumerate(nodes, start=2):
            for pred, tag in picks:
                if not (0 <= pred < j):
                    raise ConfigError(f"genotype predecessor {pred} invalid for node {j}")
                if tag == "None_normal":
                    raise ConfigError("genotypes never retain None_normal")
                if tag not in spec.edge_candidates(pred, j):
                    raise ConfigError(
                        f"op {tag!r} not available on edge ({pred}->{j}) "
                        f"of a {spec.kind} cell"
                    )
                chosen[(pred, j)] = tag
        self.ops = {}
        for i, j in spec.edges():
            src, dst = spec.edge_dims(i, j)
            tag = chosen.get((i, j), "None_normal")
            if reuse_from is not None:
                cands = spec.edge_candidates(i, j)
                self.ops[(i, j)] = reuse_from.ops[(i, j)][cands.index(tag)]
            else:
                self.ops[(i, j)] = make_candidate(
                    tag, f"{name}.e{i}_{j}.{tag}", src, dst,
                    spec.channels_in, rng, eps, momentum, wrp_activation)

    def params(self):
        out = []
        for key in sorted(self.ops):
            out.extend(self.ops[key].params())
        return out

    def forward(self, ctx: Ctx, in0: Var, in1: Var) -> Var:
        spec = self.spec
        nodes = [in0, in1]
        for j in range(2, 2 + spec.intermediates):
            edge_outs = [self.ops[(i, j)].forward(ctx, nodes[i]) for i in range(j)]
            nodes.append(node_aggregate(ctx, edge_outs))
            if ctx.collect_nodes is not None:
                ctx.collect_nodes.append(nodes[-1])
        return T.concat(nodes[2:], axis=0)


# ---------------------------------------------------------------------------
# genotype

@dataclass
class Genotype:
    """Pruned architecture: per cell, per intermediate node, the retained
    (predecessor, operation) pairs, plus the dimension bookkeeping needed
    to rebuild the network."""

    cells: list[dict]
    dims: dict

    def to_json_dict(self) -> dict:
        return {"cells": self.cells, "dims": self.dims}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Genotype":
        if "cells" not in d or "dims" not in d:
            raise ConfigError("genotype JSON needs 'cells' and 'dims'")
        return cls(cells=d["cells"], dims=d["dims"])

    def nodes_of(self, cell_idx: int) -> list[list[tuple[int, str]]]:
        return [[(e["pred"], e["op"]) for e in node]
                for node in self.cells[cell_idx]["nodes"]]


def derive_cell_nodes(alpha: list[Parameter], spec: CellSpec, activation: str,
                      k: int) -> list[list[tuple[int, str]]]:
    """Pick the discrete structure for one cell kind from its logits.

    Per edge the activation is applied and None_normal masked out; per node
    the k incoming edges with the largest best-op weight survive, each with
    its argmax operation.  Ties break to the lowest predecessor index and
    then catalogue order.
    """
    edges = spec.edges()
    if len(alpha) != len(edges):
        raise ConfigError(f"{len(alpha)} logit vectors for {len(edges)} edges")
    nodes = []
    for j in range(2, 2 + spec.intermediates):
        scored = []
        for i in range(j):
            e_idx = edges.index((i, j))
            cands = spec.edge_candidates(i, j)
            w = simplex.apply_activation(activation, alpha[e_idx].value)
            best_tag, best_w = None, -np.inf
            for t, tag in enumerate(cands):
                if tag == "None_normal":
                    continue
                if w[t] > best_w:
                    best_tag, best_w = tag, float(w[t])
            scored.append((i, best_tag, best_w))
        if len(scored) < k:
            raise ContractError(
                f"node {j} has {len(scored)} candidate predecessors, need {k}"
            )
        order = sorted(range(len(scored)),
                       key=lambda idx: (-scored[idx][2], scored[idx][0]))
        picks = sorted(order[:k])
        nodes.append([(scored[p][0], scored[p][1]) for p in picks])
    return nodes


def export_dot(genotype: Genotype) -> str:
    """Render the genotype as a DOT digraph, one subgraph per cell."""
    out = io.StringIO()
    out.write("digraph genotype {\n  rankdir=LR;\n")
    for ci, cell in enumerate(genotype.cells):
        out.write(f'  subgraph cluster_{ci} {{\n    label="cell {ci} ({cell["kind"]})";\n')
        names = {0: f"c{ci}_in0", 1: f"c{ci}_in1"}
        out.write(f'    {names[0]} [label="in0"];\n    {names[1]} [label="in1"];\n')
        for ni in range(len(cell["nodes"])):
            names[2 + ni] = f"c{ci}_n{2 + ni}"
            out.write(f'    {names[2 + ni]} [label="node {2 + ni}"];\n')
        out.write(f'    c{ci}_out [label="out"];\n')
        for ni, node in enumerate(cell["nodes"]):
            for e in node:
                out.write(f'    {names[e["pred"]]} -> {names[2 + ni]} '
                          f'[label="{e["op"]}"];\n')
            out.write(f'    {names[2 + ni]} -> c{ci}_out [label="concat"];\n')
        out.write("  }\n")
    out.write("}\n")
    return out.getvalue()


def param_report(params) -> dict:
    """Learnable-real count and the 32-bit storage footprint in MiB."""
    count = int(sum(p.value.size for p in params))
    return {"count": count, "megabytes": count * 4 / 2 ** 20}


# ---------------------------------------------------------------------------
# full networks

@dataclass(frozen=True)
class ModelConfig:
    """Static architecture hyперparameters shared by search and training."""

    input_dim: int = 20
    stem_dim: int = 20
    classes: int = 3
    channels: int = 1
    node_count: int = 5
    cells: tuple = ("reduction", "normal")
    reduction_factor: int = 2
    reeig_eps: float = 1e-4
    bn_momentum: float = 0.9
    wrp_activation: str = "softmax"

    def cell_dims(self) -> list[tuple[int, int]]:
        dims, cur = [], self.stem_dim
        for kind in self.cells:
            if kind == "reduction":
                out = max(2, cur // self.reduction_factor)
            elif kind == "normal":
                out = cur
            else:
                raise ConfigError(f"unknown cell kind {kind!r}")
            dims.append((cur, out))
            cur = out
        return dims


class _NetBase:
    """Stem, cell chain, and classifier head shared by both network modes."""

    def _build_common(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stem_act = ReEig(cfg.reeig_eps)
        self.stem_bimap = BiMap("stem.bimap", cfg.input_dim, cfg.stem_dim, rng)
        self.stem_bn = SpdBatchNorm("stem.bn", cfg.stem_dim, cfg.bn_momentum)
        self.cell_specs = []
        ch = cfg.channels
        for (n_in, n_out), kind in zip(cfg.cell_dims(), cfg.cells):
            spec = CellSpec(kind, n_in, n_out, channels_in=ch,
                            node_count=cfg.node_count)
            self.cell_specs.append(spec)
            ch = spec.channels_out
        self.final_channels = ch
        self.final_dim = cfg.cell_dims()[-1][1] if cfg.cells else cfg.stem_dim
        feat = self.final_channels * self.final_dim * (self.final_dim + 1) // 2
        self.head_W = Parameter("head.W", 0.01 * rng.standard_normal((feat, cfg.classes)))
        self.head_b = Parameter("head.b", np.zeros(cfg.classes))

    def _stem_and_head_params(self):
        return (self.stem_bimap.params() + self.stem_bn.params()
                + [self.head_W, self.head_b])

    def _forward_stem(self, ctx: Ctx, X: np.ndarray) -> Var:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[-1] != self.cfg.input_dim:
            raise ShapeError(
                f"expected a (batch, {self.cfg.input_dim}, {self.cfg.input_dim}) "
                f"input, got {X.shape}"
            )
        x = ctx.tape.const(
            np.broadcast_to(X, (self.cfg.channels,) + X.shape).copy(), sym=True)
        x = self.stem_act.forward(ctx, x)
        x = self.stem_bimap.forward(ctx, x)
        return self.stem_bn.forward(ctx, x)

    def _forward_head(self, ctx: Ctx, x: Var) -> Var:
        feats = T.uppertri(T.sym_fn(x, "log"))        # (C, B, F)
        feats = T.moveaxis(feats, 0, 1)               # (B, C, F)
        b = feats.value.shape[0]
        feats = T.reshape(feats, (b, -1))
        logits = T.matmul(feats, ctx.tape.watch(self.head_W))
        return T.add(logits, ctx.tape.watch(self.head_b))

    def weight_params(self) -> list[Parameter]:
        out = self._stem_and_head_params()
        for cell in self.cells:
            out.extend(cell.params())
        return out

    def named_params(self) -> dict[str, Parameter]:
        m = {}
        for p in self.all_params():
            if p.name in m:
                raise ConfigError(f"duplicate parameter name {p.name!r}")
            m[p.name] = p
        return m

    def batchnorms(self):
        bns = [self.stem_bn]
        for cell in self.cells:
            ops = (op for key in sorted(cell.ops)
                   for op in (cell.ops[key] if isinstance(cell.ops[key], list)
                              else [cell.ops[key]]))
            for op in ops:
                bn = getattr(op, "bn", None)
                if bn is not None:
                    bns.append(bn)
        return bns


class Supernet(_NetBase):
    """The over-parameterized search network with per-kind shared logits."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 activation: str = "sparsemax"):
        self._build_common(cfg, rng)
        self.activation = activation
        self.alphas: dict[str, list[Parameter]] = {}
        self.cells = []
        for idx, spec in enumerate(self.cell_specs):
            if spec.kind not in self.alphas:
                self.alphas[spec.kind] = alpha_parameters(spec)
            self.cells.append(SearchCell(f"cells.{idx}", spec, rng, cfg.reeig_eps,
                                         cfg.bn_momentum, cfg.wrp_activation))

    def alpha_params(self) -> list[Parameter]:
        return [p for kind in sorted(self.alphas) for p in self.alphas[kind]]

    def all_params(self) -> list[Parameter]:
        return self.weight_params() + self.alpha_params()

    def forward(self, ctx: Ctx, X: np.ndarray) -> Var:
        x = self._forward_stem(ctx, X)
        for cell in self.cells:
            ws = [simplex.activation_op(self.activation, ctx.tape.watch(p))
                  for p in self.alphas[cell.spec.kind]]
            x = cell.forward(ctx, x, x, ws)
        return self._forward_head(ctx, x)

    def derive_genotype(self, k: int = 2, activation: str | None = None) -> Genotype:
        activation = activation or self.activation
        per_kind = {
            kind: derive_cell_nodes(self.alphas[kind],
                                    next(s for s in self.cell_specs if s.kind == kind),
                                    activation, k)
            for kind in self.alphas
        }
        cells = [{
            "kind": spec.kind,
            "nodes": [[{"pred": p, "op": op} for p, op in node]
                      for node in per_kind[spec.kind]],
        } for spec in self.cell_specs]
        dims = {
            "input": self.cfg.input_dim,
            "stem": self.cfg.stem_dim,
            "classes": self.cfg.classes,
            "channels": self.cfg.channels,
            "node_count": self.cfg.node_count,
            "cell_dims": [list(d) for d in self.cfg.cell_dims()],
            "topk": k,
        }
        return Genotype(cells=cells, dims=dims)

    def to_discrete(self, genotype: Genotype) -> "DiscreteNet":
        """Discrete network sharing this supernet's parameter objects."""
        return DiscreteNet(self.cfg, genotype, rng=None, reuse_from=self)


class DiscreteNet(_NetBase):
    """A pruned network built from a genotype."""

    def __init__(self, cfg: ModelConfig, genotype: Genotype,
                 rng: np.random.Generator | None,
                 reuse_from: Supernet | None = None):
        if len(genotype.cells) != len(cfg.cells):
            raise ConfigError(
                f"genotype has {len(genotype.cells)} cells, config expects "
                f"{len(cfg.cells)}"
            )
        if reuse_from is not None:
            self.cfg = cfg
            self.stem_act = reuse_from.stem_act
            self.stem_bimap = reuse_from.stem_bimap
            self.stem_bn = reuse_from.stem_bn
            self.cell_specs = reuse_from.cell_specs
            self.final_channels = reuse_from.final_channels
            self.final_dim = reuse_from.final_dim
            self.head_W = reuse_from.head_W
            self.head_b = reuse_from.head_b
        else:
            self._build_common(cfg, rng)
        self.cells = []
        for idx, spec in enumerate(self.cell_specs):
            if genotype.cells[idx]["kind"] != spec.kind:
                raise ConfigError(
                    f"cell {idx}: genotype kind {genotype.cells[idx]['kind']!r} "
                    f"!= config kind {spec.kind!r}"
                )
            self.cells.append(DiscreteCell(
                f"cells.{idx}", spec, genotype.nodes_of(idx), rng,
                cfg.reeig_eps, cfg.bn_momentum, cfg.wrp_activation,
                reuse_from=reuse_from.cells[idx] if reuse_from else None))

    def all_params(self) -> list[Parameter]:
        return self.weight_params()

    def forward(self, ctx: Ctx, X: np.ndarray) -> Var:
        x = self._forward_stem(ctx, X)
        for cell in self.cells:
            x = cell.forward(ctx, x, x)
        return self._forward_head(ctx, x)


def model_config_from_genotype(genotype: Genotype, **overrides) -> ModelConfig:
    """Rebuild the ModelConfig recorded in a genotype's dims block."""
    d = genotype.dims
    cell_dims = [tuple(c) for c in d["cell_dims"]]
    kinds = tuple(c["kind"] for c in genotype.cells)
    factor = 1
    for (n_in, n_out), kind in zip(cell_dims, kinds):
        if kind == "reduction":
            factor = max(factor, round(n_in / n_out))
    base = dict(
        input_dim=d["input"], stem_dim=d["stem"], classes=d["classes"],
        channels=d["channels"], node_count=d["node_count"], cells=kinds,
        reduction_factor=factor,
    )
    base.update(overrides)
    return ModelConfig(**base)
