import json

import numpy as np
import pytest

from spdnas import data, manifold as M, search_space as ss, simplex
from spdnas import tape as T
from spdnas.errors import ConfigError, ContractError, ShapeError
from spdnas.layers import Ctx
from spdnas.tape import Parameter, Tape


def make_ctx(training=True, iters=30, tol=1e-10):
    return Ctx(Tape(), training=training, update_running=False,
               wfm_iters=iters, wfm_tol=tol)


def spd_stack(rng, n, channels=1, batch=2, cond=10.0):
    return M.random_spd(rng, n, stack=(channels, batch), cond=cond)


class TestCellSpec:
    def test_default_edges(self):
        spec = ss.CellSpec("normal", 6, 6)
        assert spec.edges() == [(0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]
        assert spec.intermediates == 2
        assert spec.channels_out == 2

    def test_catalogues(self):
        spec = ss.CellSpec("reduction", 8, 4)
        assert spec.edge_candidates(0, 2) == ss.REDUCED_OPS
        assert spec.edge_candidates(2, 3) == ss.NORMAL_OPS
        normal = ss.CellSpec("normal", 4, 4)
        assert normal.edge_candidates(0, 2) == ss.NORMAL_OPS

    def test_edge_dims(self):
        spec = ss.CellSpec("reduction", 8, 4)
        assert spec.edge_dims(0, 2) == (8, 4)
        assert spec.edge_dims(2, 3) == (4, 4)

    def test_validation(self):
        with pytest.raises(ConfigError):
            ss.CellSpec("normal", 6, 4)
        with pytest.raises(ConfigError):
            ss.CellSpec("reduction", 4, 4)
        with pytest.raises(ConfigError):
            ss.CellSpec("funky", 4, 4)
        with pytest.raises(ConfigError):
            ss.CellSpec("normal", 4, 4, node_count=3)

    def test_six_node_cell(self):
        spec = ss.CellSpec("normal", 4, 4, node_count=6)
        assert spec.intermediates == 3
        assert len(spec.edges()) == 2 + 3 + 4


class TestMixedEdge:
    def test_one_hot_skip_returns_input(self, rng):
        spec = ss.CellSpec("normal", 4, 4, node_count=4)
        cell = ss.SearchCell("c", spec, rng, 1e-4, 0.9, "softmax")
        ops = cell.ops[(0, 2)]
        skip_idx = ss.NORMAL_OPS.index("Skip_normal")
        w = np.zeros(len(ops)); w[skip_idx] = 1.0
        ctx = make_ctx(iters=5, tol=1e-6)
        x = ctx.tape.const(spd_stack(rng, 4), sym=True)
        out = ss.mixed_edge_forward(ctx, x, ops, ctx.tape.const(w))
        np.testing.assert_allclose(out.value, x.value, atol=1e-9)

    def test_one_hot_none_returns_identity(self, rng):
        spec = ss.CellSpec("normal", 4, 4, node_count=4)
        cell = ss.SearchCell("c", spec, rng, 1e-4, 0.9, "softmax")
        ops = cell.ops[(0, 2)]
        w = np.zeros(len(ops)); w[ss.NORMAL_OPS.index("None_normal")] = 1.0
        ctx = make_ctx()
        x = ctx.tape.const(spd_stack(rng, 4), sym=True)
        out = ss.mixed_edge_forward(ctx, x, ops, ctx.tape.const(w))
        np.testing.assert_array_equal(
            out.value, np.broadcast_to(np.eye(4), out.value.shape))

    def test_skip_none_mixture_is_geodesic_point(self, rng):
        # candidates {Skip, None}: the wFM sits on the geodesic toward I
        ctx = make_ctx(iters=60, tol=1e-12)
        X = M.random_spd(rng, 4)
        x = ctx.tape.const(X[None, None], sym=True)
        ops = [ss._SkipOp(4), ss._NoneOp(4, 4)]
        wgt = 0.7
        out = ss.mixed_edge_forward(ctx, x, ops,
                                    ctx.tape.const(np.array([wgt, 1 - wgt])))
        expect = M.exp_map(X, (1 - wgt) * M.log_map(X, np.eye(4)))
        np.testing.assert_allclose(out.value[0, 0], expect, atol=1e-6)

    def test_weight_count_mismatch(self, rng):
        ctx = make_ctx()
        x = ctx.tape.const(spd_stack(rng, 4), sym=True)
        with pytest.raises(ShapeError):
            ss.mixed_edge_forward(ctx, x, [ss._SkipOp(4)],
                                  ctx.tape.const(np.array([0.5, 0.5])))


class TestNodeAggregate:
    def test_single_edge_passthrough(self, rng):
        ctx = make_ctx()
        x = ctx.tape.const(spd_stack(rng, 3), sym=True)
        assert ss.node_aggregate(ctx, [x]) is x

    def test_identical_edges(self, rng):
        ctx = make_ctx()
        X = spd_stack(rng, 3)
        a = ctx.tape.const(X, sym=True)
        b = ctx.tape.const(X.copy(), sym=True)
        out = ss.node_aggregate(ctx, [a, b])
        np.testing.assert_allclose(out.value, X, atol=1e-9)

    def test_two_point_midpoint(self):
        ctx = make_ctx(iters=60, tol=1e-12)
        a = ctx.tape.const(np.diag([4.0, 1.0])[None, None], sym=True)
        b = ctx.tape.const(np.diag([1.0, 4.0])[None, None], sym=True)
        out = ss.node_aggregate(ctx, [a, b])
        np.testing.assert_allclose(out.value[0, 0], np.diag([2.0, 2.0]), atol=1e-10)

    def test_shape_mismatch(self, rng):
        ctx = make_ctx()
        a = ctx.tape.const(spd_stack(rng, 3), sym=True)
        b = ctx.tape.const(spd_stack(rng, 4), sym=True)
        with pytest.raises(ShapeError):
            ss.node_aggregate(ctx, [a, b])

    def test_empty(self):
        with pytest.raises(ContractError):
            ss.node_aggregate(make_ctx(), [])


class TestCellForward:
    def test_channel_bookkeeping(self, rng):
        spec = ss.CellSpec("normal", 4, 4, channels_in=1, node_count=5)
        cell = ss.SearchCell("c", spec, rng, 1e-4, 0.9, "softmax")
        alphas = ss.alpha_parameters(spec)
        ctx = make_ctx(iters=2, tol=1e-6)
        x = ctx.tape.const(spd_stack(rng, 4, channels=1, batch=3), sym=True)
        ws = [simplex.activation_op("softmax", ctx.tape.watch(p)) for p in alphas]
        out = cell.forward(ctx, x, x, ws)
        assert out.value.shape == (2, 3, 4, 4)  # 2 intermediate nodes x 1 channel

    def test_all_skip_identical_inputs_fixed_point(self, rng):
        spec = ss.CellSpec("normal", 4, 4, channels_in=1, node_count=5)
        cell = ss.SearchCell("c", spec, rng, 1e-4, 0.9, "softmax")
        skip = ss.NORMAL_OPS.index("Skip_normal")
        ctx = make_ctx(iters=10, tol=1e-8)
        X = M.random_spd(rng, 4)
        x = ctx.tape.const(X[None, None], sym=True)
        ws = []
        for _ in spec.edges():
            w = np.zeros(len(ss.NORMAL_OPS)); w[skip] = 1.0
            ws.append(ctx.tape.const(w))
        out = cell.forward(ctx, x, x, ws)
        for c in range(out.value.shape[0]):
            np.testing.assert_allclose(out.value[c, 0], X, atol=1e-9)

    def test_reduction_cell_output_dims(self, rng):
        spec = ss.CellSpec("reduction", 20, 10, channels_in=1, node_count=5)
        cell = ss.SearchCell("c", spec, rng, 1e-4, 0.9, "softmax")
        alphas = ss.alpha_parameters(spec)
        ctx = make_ctx(iters=1, tol=1e-6)
        x = ctx.tape.const(spd_stack(rng, 20, batch=2), sym=True)
        ws = [simplex.activation_op("softmax", ctx.tape.watch(p)) for p in alphas]
        out = cell.forward(ctx, x, x, ws)
        assert out.value.shape == (2, 2, 10, 10)
        assert np.min(np.linalg.eigvalsh(out.value)) > 0


class TestSupernet:
    @pytest.fixture
    def small_net(self, rng):
        cfg = ss.ModelConfig(input_dim=8, stem_dim=8, classes=3,
                             cells=("reduction", "normal"))
        return ss.Supernet(cfg, rng, activation="sparsemax"), cfg

    def test_logit_shape(self, small_net, rng):
        net, _ = small_net
        X = M.random_spd(rng, 8, stack=(30,))
        ctx = make_ctx(iters=1, tol=1e-6)
        logits = net.forward(ctx, X)
        assert logits.value.shape == (30, 3)

    def test_identical_samples_identical_logits(self, small_net, rng):
        net, _ = small_net
        x = M.random_spd(rng, 8)
        X = np.stack([x, x.copy(), M.random_spd(rng, 8)])
        ctx = make_ctx(training=False, iters=2, tol=1e-6)
        logits = net.forward(ctx, X).value
        np.testing.assert_array_equal(logits[0], logits[1])

    def test_batch_permutation_invariance(self, small_net, rng):
        net, _ = small_net
        X = M.random_spd(rng, 8, stack=(6,))
        perm = np.array([4, 2, 0, 5, 1, 3])
        ctx1, ctx2 = make_ctx(training=False, iters=2), make_ctx(training=False, iters=2)
        a = net.forward(ctx1, X).value
        b = net.forward(ctx2, X[perm]).value
        np.testing.assert_allclose(a[perm], b, atol=1e-12)

    def test_wrong_input_dim(self, small_net, rng):
        net, _ = small_net
        with pytest.raises(ShapeError):
            net.forward(make_ctx(), M.random_spd(rng, 5, stack=(2,)))

    def test_collect_nodes(self, small_net, rng):
        net, _ = small_net
        ctx = make_ctx(iters=1, tol=1e-6)
        ctx.collect_nodes = []
        net.forward(ctx, M.random_spd(rng, 8, stack=(2,)))
        assert len(ctx.collect_nodes) == 4  # 2 intermediate nodes x 2 cells
        for node in ctx.collect_nodes:
            assert np.min(np.linalg.eigvalsh(node.value)) > 0


class TestDeriveGenotype:
    def _alphas(self, spec):
        return ss.alpha_parameters(spec)

    def test_argmax_single_edge(self):
        spec = ss.CellSpec("normal", 4, 4, node_count=4)
        alphas = self._alphas(spec)
        # edge (0,2): favour BiMap_0; edge (1,2): favour Skip_normal
        alphas[0].value[ss.NORMAL_OPS.index("BiMap_0")] = 0.7
        alphas[0].value[ss.NORMAL_OPS.index("Skip_normal")] = 0.3
        alphas[1].value[ss.NORMAL_OPS.index("Skip_normal")] = 1.0
        nodes = ss.derive_cell_nodes(alphas, spec, "sparsemax", k=2)
        assert nodes == [[(0, "BiMap_0"), (1, "Skip_normal")]]

    def test_top_k_selection(self):
        spec = ss.CellSpec("normal", 4, 4, node_count=5)
        alphas = self._alphas(spec)
        edges = spec.edges()
        # node 3 predecessors 0,1,2 with best-op weights 0.9, 0.5, 0.2
        for pred, wgt in ((0, 0.9), (1, 0.5), (2, 0.2)):
            e = edges.index((pred, 3))
            alphas[e].value[ss.NORMAL_OPS.index("BiMap_1")] = wgt
        nodes = ss.derive_cell_nodes(alphas, spec, "sparsemax", k=2)
        assert [p for p, _ in nodes[1]] == [0, 1]

    def test_uniform_tie_break(self):
        # all-zero logits: argmax falls to catalogue order (BiMap_0), top-k
        # to the lowest predecessor indices
        spec = ss.CellSpec("normal", 4, 4, node_count=5)
        nodes = ss.derive_cell_nodes(self._alphas(spec), spec, "sparsemax", k=2)
        assert nodes == [[(0, "BiMap_0"), (1, "BiMap_0")],
                         [(0, "BiMap_0"), (1, "BiMap_0")]]

    def test_none_never_retained(self):
        spec = ss.CellSpec("normal", 4, 4, node_count=4)
        alphas = self._alphas(spec)
        for p in alphas:
            p.value[ss.NORMAL_OPS.index("None_normal")] = 5.0
        nodes = ss.derive_cell_nodes(alphas, spec, "sparsemax", k=2)
        for node in nodes:
            assert all(op != "None_normal" for _, op in node)

    def test_too_few_predecessors(self):
        spec = ss.CellSpec("normal", 4, 4, node_count=4)  # node 2 has 2 preds
        with pytest.raises(ContractError):
            ss.derive_cell_nodes(self._alphas(spec), spec, "sparsemax", k=3)

    def test_translation_invariance_per_edge(self, rng):
        spec = ss.CellSpec("normal", 4, 4, node_count=5)
        alphas = self._alphas(spec)
        for p in alphas:
            p.value = rng.normal(0.0, 1.0, p.value.shape)
        before = ss.derive_cell_nodes(alphas, spec, "sparsemax", k=2)
        alphas[2].value = alphas[2].value + 3.25  # shift one edge's logits
        after = ss.derive_cell_nodes(alphas, spec, "sparsemax", k=2)
        assert before == after

    def test_monotone_transform_keeps_argmax(self, rng):
        spec = ss.CellSpec("normal", 4, 4, node_count=5)
        alphas = self._alphas(spec)
        for p in alphas:
            p.value = rng.normal(0.0, 1.0, p.value.shape)
        before = ss.derive_cell_nodes(alphas, spec, "softmax", k=2)
        alphas_t = [Parameter(p.name, np.exp(0.5 * p.value)) for p in alphas]
        after = ss.derive_cell_nodes(alphas_t, spec, "softmax", k=2)
        # the chosen operation on every retained edge is transform-invariant
        assert [[op for _, op in node] for node in before] == \
               [[op for _, op in node] for node in after]


class TestGenotypeSerialization:
    def test_json_roundtrip(self, rng):
        cfg = ss.ModelConfig(input_dim=8, stem_dim=8, classes=3)
        net = ss.Supernet(cfg, rng)
        g = net.derive_genotype(2)
        blob = json.dumps(g.to_json_dict())
        g2 = ss.Genotype.from_json_dict(json.loads(blob))
        assert g2.to_json_dict() == g.to_json_dict()

    def test_missing_keys_rejected(self):
        with pytest.raises(ConfigError):
            ss.Genotype.from_json_dict({"cells": []})

    def test_model_config_roundtrip(self, rng):
        cfg = ss.ModelConfig(input_dim=20, stem_dim=20, classes=3)
        net = ss.Supernet(cfg, rng)
        g = net.derive_genotype(2)
        cfg2 = ss.model_config_from_genotype(g)
        assert cfg2.cell_dims() == cfg.cell_dims()
        assert cfg2.cells == cfg.cells


class TestExportDot:
    def test_empty_intermediate_set(self):
        g = ss.Genotype(cells=[{"kind": "normal", "nodes": []}], dims={})
        text = ss.export_dot(g)
        assert "in0" in text and "out" in text and "node" not in text

    def test_edges_labelled(self, rng):
        cfg = ss.ModelConfig(input_dim=8, stem_dim=8, classes=2)
        g = ss.Supernet(cfg, rng).derive_genotype(2)
        text = ss.export_dot(g)
        assert text.count("subgraph") == 2
        assert 'label="BiMap_0"' in text
        assert text.startswith("digraph")


class TestParamReport:
    def test_single_bimap_count(self, rng):
        from spdnas.layers import BiMap
        layer = BiMap("b", 20, 10, rng)
        rep = ss.param_report(layer.params())
        assert rep["count"] == 200
        assert abs(rep["megabytes"] - 200 * 4 / 2 ** 20) < 1e-15

    def test_radar_scale_footprint_of_uniform_derivation(self, rng):
        cfg = ss.ModelConfig()  # 20 -> 10 reduction + normal
        net = ss.Supernet(cfg, rng)
        g = net.derive_genotype(2)
        disc = ss.DiscreteNet(cfg, g, rng)
        mb = ss.param_report(disc.weight_params())["megabytes"]
        assert 0.01 <= mb <= 0.05


class TestDiscreteNet:
    def test_invalid_genotype_op(self, rng):
        cfg = ss.ModelConfig(input_dim=8, stem_dim=8, classes=2)
        g = ss.Supernet(cfg, rng).derive_genotype(2)
        g.cells[0]["nodes"][0][0]["op"] = "AveragePooling_reduced"
        g.cells[1]["nodes"][0][0]["op"] = "AveragePooling_reduced"  # invalid in normal cell
        with pytest.raises(ConfigError):
            ss.DiscreteNet(cfg, g, rng)

    def test_cell_count_mismatch(self, rng):
        cfg = ss.ModelConfig(input_dim=8, stem_dim=8, classes=2)
        g = ss.Supernet(cfg, rng).derive_genotype(2)
        cfg2 = ss.ModelConfig(input_dim=8, stem_dim=8, classes=2,
                              cells=("reduction",))
        with pytest.raises(ConfigError):
            ss.DiscreteNet(cfg2, g, rng)

    def test_consistency_one_hot(self, rng):
        # search-mode forward with one-hot logits equals the discrete
        # forward built from the corresponding genotype
        cfg = ss.ModelConfig(input_dim=8, stem_dim=8, classes=3)
        net = ss.Supernet(cfg, rng, activation="sparsemax")
        pick = np.random.default_rng(3)
        for kind, plist in net.alphas.items():
            spec = next(s for s in net.cell_specs if s.kind == kind)
            edges = spec.edges()
            for j in range(2, 2 + spec.intermediates):
                incoming = [k for k, (i, jj) in enumerate(edges) if jj == j]
                keep = set(pick.choice(incoming, size=2, replace=False).tolist())
                for k in incoming:
                    cands = spec.edge_candidates(*edges[k])
                    plist[k].value[:] = 0.0
                    if k in keep:
                        real = [t for t, tag in enumerate(cands)
                                if tag != "None_normal"]
                        plist[k].value[int(pick.choice(real))] = 4.0
                    else:
                        plist[k].value[cands.index("None_normal")] = 4.0
        g = net.derive_genotype(2)
        disc = net.to_discrete(g)
        X = M.random_spd(rng, 8, stack=(4,))
        for training in (False, True):
            c1 = make_ctx(training=training, iters=3, tol=1e-6)
            c2 = make_ctx(training=training, iters=3, tol=1e-6)
            a = net.forward(c1, X).value
            b = disc.forward(c2, X).value
            assert np.max(np.abs(a - b)) <= 1e-6


class TestDeeperConfigurations:
    def test_multi_cell_stacking(self, rng):
        # reduction-normal-reduction-normal chain with doubling channels
        cfg = ss.ModelConfig(input_dim=16, stem_dim=16, classes=3,
                             cells=("reduction", "normal", "reduction", "normal"))
        net = ss.Supernet(cfg, rng, activation="sparsemax")
        dims = cfg.cell_dims()
        assert dims == [(16, 8), (8, 8), (8, 4), (4, 4)]
        assert net.final_channels == 16  # 1 -> 2 -> 4 -> 8 -> 16
        X = M.random_spd(rng, 16, stack=(2,))
        ctx = make_ctx(iters=1, tol=1e-6)
        logits = net.forward(ctx, X)
        assert logits.value.shape == (2, 3)
        # alphas shared per kind: one set for reduction, one for normal
        assert set(net.alphas) == {"reduction", "normal"}

    def test_six_node_supernet(self, rng):
        cfg = ss.ModelConfig(input_dim=8, stem_dim=8, classes=2,
                             cells=("normal",), node_count=6)
        net = ss.Supernet(cfg, rng, activation="softmax")
        assert net.final_channels == 3  # 3 intermediate nodes
        X = M.random_spd(rng, 8, stack=(2,))
        ctx = make_ctx(iters=1, tol=1e-6)
        assert net.forward(ctx, X).value.shape == (2, 2)
        g = net.derive_genotype(2)
        assert all(len(node) == 2 for node in g.nodes_of(0))
        disc = ss.DiscreteNet(cfg, g, np.random.default_rng(0))
        ctx2 = make_ctx(iters=1, tol=1e-6)
        assert disc.forward(ctx2, X).value.shape == (2, 2)
