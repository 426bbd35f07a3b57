import numpy as np
import pytest

from spdnas import frechet as F
from spdnas import layers as L
from spdnas import manifold as M
from spdnas import tape as T
from spdnas.errors import ConfigError, ContractError, ShapeError
from spdnas.layers import Ctx
from spdnas.tape import Tape


def make_ctx(training=True, iters=30, tol=1e-10, update_running=False):
    return Ctx(Tape(), training=training, update_running=update_running,
               wfm_iters=iters, wfm_tol=tol)


class TestBiMap:
    def test_identity_transform(self, rng):
        X = M.random_spd(rng, 5)
        np.testing.assert_array_equal(L.bimap_forward(X, np.eye(5)), M.sym_part(X))

    def test_radar_scale_reduction(self, rng):
        X = M.random_spd(rng, 20)
        W = L.orthonormal_init(rng, 20, 10)
        out = L.bimap_forward(X, W)
        assert out.shape == (10, 10)
        assert np.min(np.linalg.eigvalsh(out)) > 0

    def test_hdm05_scale_reduction(self, rng):
        X = M.random_spd(rng, 93)
        W = L.orthonormal_init(rng, 93, 30)
        out = L.bimap_forward(X, W)
        assert out.shape == (30, 30)
        assert np.min(np.linalg.eigvalsh(out)) > 0

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            L.bimap_forward(np.eye(4), L.orthonormal_init(rng, 5, 3))

    def test_cannot_expand(self, rng):
        with pytest.raises(ConfigError):
            L.BiMap("b", 3, 5, rng)

    def test_condition_number_not_worsened(self, rng):
        for _ in range(10):
            X = M.random_spd(rng, 8, cond=100.0)
            W = L.orthonormal_init(rng, 8, 4)
            out = L.bimap_forward(X, W)
            cin = np.linalg.cond(X)
            cout = np.linalg.cond(out)
            assert cout <= cin * (1.0 + 1e-10)

    def test_orthonormal_init_contract(self, rng):
        W = L.orthonormal_init(rng, 9, 4)
        assert np.linalg.norm(W.T @ W - np.eye(4)) <= 1e-8


class TestReEig:
    def test_thresholding(self):
        out = L.reeig_forward(np.diag([1.0, 1e-6]), eps=1e-4)
        np.testing.assert_allclose(out, np.diag([1.0, 1e-4]), atol=1e-15)

    def test_inactive_above_threshold(self, rng):
        X = M.random_spd(rng, 5, cond=10.0)  # eigenvalues well above 1e-4
        np.testing.assert_allclose(L.reeig_forward(X), X, atol=1e-10)

    def test_floor_on_random_input(self, rng):
        X = M.random_spd(rng, 6, cond=1e8, scale=1e-2)
        out = L.reeig_forward(X, eps=1e-4)
        assert np.min(np.linalg.eigvalsh(out)) >= 1e-4 - 1e-12

    def test_bad_epsilon(self):
        with pytest.raises(ConfigError):
            L.ReEig(eps=0.0)


class TestLogExpEig:
    def test_logeig_identity(self):
        np.testing.assert_allclose(L.logeig_forward(np.eye(3)), np.zeros((3, 3)),
                                   atol=1e-12)

    def test_logeig_diagonal(self):
        np.testing.assert_allclose(L.logeig_forward(np.diag([np.e, 1.0])),
                                   np.diag([1.0, 0.0]), atol=1e-12)

    def test_expeig_zero(self):
        np.testing.assert_allclose(L.expeig_forward(np.zeros((3, 3))), np.eye(3),
                                   atol=1e-15)

    def test_roundtrips(self, rng):
        X = M.random_spd(rng, 5, cond=100.0)
        np.testing.assert_allclose(L.expeig_forward(L.logeig_forward(X)), X,
                                   atol=1e-9 * np.max(np.abs(X)))
        S = M.random_sym(rng, 5)
        np.testing.assert_allclose(L.logeig_forward(L.expeig_forward(S)), S,
                                   atol=1e-9)

    def test_logeig_near_singular(self):
        from spdnas.errors import DomainError
        with pytest.raises(DomainError):
            L.logeig_forward(np.diag([1.0, 1e-13]))


class TestBatchNorm:
    def test_single_sample_with_identity_bias(self, rng):
        bn = L.SpdBatchNorm("bn", 4)
        X = M.random_spd(rng, 4)[None]
        out = bn.forward_arrays(X, "train", wfm_iters=30, wfm_tol=1e-12)
        np.testing.assert_allclose(out[0], np.eye(4), atol=1e-10)

    def test_bias_equal_to_mean_restores_inputs(self, rng):
        batch = M.random_spd(rng, 4, stack=(6,))
        mean = F.batch_barycenter(list(batch), F.WfmConfig(max_iters=60, tol=1e-12)).mean
        bn = L.SpdBatchNorm("bn", 4)
        bn.set_bias(mean)
        out = bn.forward_arrays(batch, "train", wfm_iters=60, wfm_tol=1e-12)
        np.testing.assert_allclose(out, batch, atol=1e-8)

    def test_centered_batch_has_identity_barycenter(self, rng):
        batch = M.random_spd(rng, 4, stack=(6,))
        bn = L.SpdBatchNorm("bn", 4)
        out = bn.forward_arrays(batch, "train", wfm_iters=60, wfm_tol=1e-12)
        bary = F.batch_barycenter(list(out), F.WfmConfig(max_iters=60, tol=1e-12)).mean
        np.testing.assert_allclose(bary, np.eye(4), atol=1e-6)

    def test_running_mean_update(self, rng):
        bn = L.SpdBatchNorm("bn", 3, momentum=0.9)
        batch = M.random_spd(rng, 3, stack=(5,))
        before = bn.running_mean.copy()
        ctx = make_ctx(training=True, update_running=True)
        bn.forward(ctx, ctx.tape.const(batch, sym=True))
        assert np.max(np.abs(bn.running_mean - before)) > 0
        assert np.min(np.linalg.eigvalsh(bn.running_mean)) > 0
        mean = F.batch_barycenter(list(batch), F.WfmConfig(max_iters=60, tol=1e-12)).mean
        expect = F.karcher_wfm([mean, before], np.array([0.1, 0.9]),
                               F.WfmConfig(max_iters=20, tol=1e-10)).mean
        np.testing.assert_allclose(bn.running_mean, expect, atol=1e-6)

    def test_eval_deterministic_bitwise(self, rng):
        bn = L.SpdBatchNorm("bn", 4)
        bn.set_bias(M.random_spd(rng, 4))
        bn.running_mean = M.random_spd(rng, 4)
        batch = M.random_spd(rng, 4, stack=(3,))
        a = bn.forward_arrays(batch, "eval")
        b = bn.forward_arrays(batch.copy(), "eval")
        assert np.array_equal(a, b)

    def test_empty_batch_rejected(self):
        bn = L.SpdBatchNorm("bn", 3)
        ctx = make_ctx(training=True)
        with pytest.raises(ContractError):
            bn.forward(ctx, ctx.tape.const(np.zeros((0, 3, 3)), sym=True))

    def test_bias_stays_spd(self, rng):
        bn = L.SpdBatchNorm("bn", 3)
        bn.S.value = M.random_sym(rng, 3, scale=2.0)
        assert np.min(np.linalg.eigvalsh(bn.bias)) > 0

    def test_bad_momentum(self):
        with pytest.raises(ConfigError):
            L.SpdBatchNorm("bn", 3, momentum=1.5)


class TestWeightedRiemPooling:
    def test_one_hot_row_selects_channel(self, rng):
        chans = [M.random_spd(rng, 3) for _ in range(3)]
        out = L.weighted_riem_pooling(chans, np.array([[0.0, 1.0, 0.0]]))
        np.testing.assert_array_equal(out[0], chans[1])

    def test_identical_channels(self, rng):
        X = M.random_spd(rng, 3)
        out = L.weighted_riem_pooling([X, X.copy()], np.array([[0.3, 0.7]]))
        np.testing.assert_allclose(out[0], X, atol=1e-12)

    def test_two_diagonal_channels(self):
        out = L.weighted_riem_pooling(
            [np.diag([4.0, 1.0]), np.diag([1.0, 4.0])],
            np.array([[0.5, 0.5]]), F.WfmConfig(max_iters=60, tol=1e-12))
        np.testing.assert_allclose(out[0], np.diag([2.0, 2.0]), atol=1e-10)

    def test_row_length_mismatch(self, rng):
        with pytest.raises(ShapeError):
            L.weighted_riem_pooling([np.eye(2)], np.array([[0.5, 0.5]]))

    def test_layer_forward_shape(self, rng):
        pool = L.WeightedRiemPooling("wrp", 3, rng)
        x = M.random_spd(rng, 4, stack=(3, 2))
        ctx = make_ctx(iters=5, tol=1e-8)
        out = pool.forward(ctx, ctx.tape.const(x, sym=True))
        assert out.value.shape == (3, 2, 4, 4)


class TestPooling:
    def test_avg_example(self):
        X = np.diag([np.e ** 2, np.e ** 2, np.e ** 4, np.e ** 4])
        out = L.avg_pool_reduced(X, 2)
        np.testing.assert_allclose(out, np.diag([np.e, np.e ** 2]), rtol=1e-12)

    def test_max_example(self):
        X = np.diag([np.e ** 2, np.e ** 2, np.e ** 4, np.e ** 4])
        out = L.max_pool_reduced(X, 2)
        np.testing.assert_allclose(out, np.diag([np.e ** 2, np.e ** 4]), rtol=1e-12)

    def test_scaled_identity(self):
        c = 7.0
        out = L.avg_pool_reduced(c * np.eye(4), 2)
        np.testing.assert_allclose(out, np.sqrt(c) * np.eye(2), rtol=1e-12)

    def test_bad_kernel(self):
        with pytest.raises(ConfigError):
            L.avg_pool_reduced(np.eye(4), 3)

    def test_layer_exact_target_projection(self, rng):
        # 9 -> 3: pooled dim ceil(9/2)=5, then a fixed BiMap to 3
        pool = L.PoolReduced("p", "avg", 9, 3, rng)
        assert pool.k == 2 and pool.proj is not None
        x = M.random_spd(rng, 9, stack=(2,))
        ctx = make_ctx()
        out = pool.forward(ctx, ctx.tape.const(x, sym=True))
        assert out.value.shape == (2, 3, 3)
        assert np.min(np.linalg.eigvalsh(out.value)) > 0

    def test_kernel_choice_large_factor(self, rng):
        pool = L.PoolReduced("p", "max", 16, 4, rng)
        assert pool.k == 4 and pool.proj is None


class TestSkipReduced:
    def test_identity_input(self, rng):
        W1 = L.orthonormal_init(rng, 6, 2)
        W2 = L.orthonormal_init(rng, 6, 2)
        out = L.skip_reduced_forward(np.eye(6), W1, W2)
        np.testing.assert_allclose(out, np.eye(4), atol=1e-12)

    def test_eigenvalue_union(self, rng):
        X = M.random_spd(rng, 6)
        W1 = L.orthonormal_init(rng, 6, 2)
        W2 = L.orthonormal_init(rng, 6, 2)
        out = L.skip_reduced_forward(X, W1, W2)
        got = np.sort(np.linalg.eigvalsh(out))
        expect = np.sort(np.concatenate([
            np.linalg.eigvalsh(L.bimap_forward(X, W1)),
            np.linalg.eigvalsh(L.bimap_forward(X, W2))]))
        np.testing.assert_allclose(got, expect, atol=1e-10)

    def test_coordinate_selector(self, rng):
        X = M.random_spd(rng, 4)
        W1 = np.zeros((4, 1)); W1[0, 0] = 1.0
        W2 = np.zeros((4, 1)); W2[2, 0] = 1.0
        out = L.skip_reduced_forward(X, W1, W2)
        np.testing.assert_allclose(out, np.diag([X[0, 0], X[2, 2]]), atol=1e-14)

    def test_odd_output_rejected(self, rng):
        with pytest.raises(ConfigError):
            L.SkipReduced("s", 6, 3, rng)


class TestSkipNone:
    def test_skip_is_input_object(self, rng):
        X = M.random_spd(rng, 4)
        assert L.skip_normal(X) is X

    def test_none_is_identity(self, rng):
        X = M.random_spd(rng, 5)
        np.testing.assert_array_equal(L.none_normal(X), np.eye(5))

    def test_none_is_wfm_fixed_point(self, rng):
        X = M.random_spd(rng, 3)
        res = F.karcher_wfm([X, np.eye(3)], np.array([0.0, 1.0]))
        np.testing.assert_array_equal(res.mean, np.eye(3))


class TestSpdPreservation:
    def test_all_layers_preserve_spd(self, rng):
        # condition numbers up to 1e4 through each layer's tape path
        x = M.random_spd(rng, 8, stack=(4,), cond=1e4)
        ctx = make_ctx(iters=3, tol=1e-8)
        xv = ctx.tape.const(x[None], sym=True)   # (1, 4, 8, 8)
        outs = {
            "bimap": L.BiMap("b", 8, 4, rng).forward(ctx, xv),
            "reeig": L.ReEig().forward(ctx, xv),
            "bn": L.SpdBatchNorm("n", 8).forward(ctx, xv),
            "avg": L.PoolReduced("a", "avg", 8, 4, rng).forward(ctx, xv),
            "max": L.PoolReduced("m", "max", 8, 4, rng).forward(ctx, xv),
            "skipr": L.SkipReduced("s", 8, 4, rng).forward(ctx, xv),
        }
        for name, out in outs.items():
            lo = np.min(np.linalg.eigvalsh(out.value))
            assert lo > 0, f"{name} lost positive definiteness ({lo})"
