import numpy as np
import pytest

from dfanet.autodiff import Tensor, finite_difference_check, mul, reduce_sum
from dfanet.dfa import (
    DfaConfig,
    DfaLayer,
    aggregate,
    attention_weights,
    dfa_forward,
    edge_feature,
    layer_graph,
    relative_position_raw,
    semantic_feature_encode,
)
from dfanet.knn import NeighborGraph, build_graph
from dfanet.nn import Linear


def weighted_sum(y, seed=7):
    return reduce_sum(mul(y, np.random.default_rng(seed).normal(size=y.shape)))


def make_layer(d_in=3, d_out=8, k=4, seed=0, dtype=np.float64, **kw):
    cfg = DfaConfig(d_in=d_in, d_out=d_out, k=k, pos_dim=kw.pop("pos_dim", 6), **kw)
    return cfg, DfaLayer(cfg, np.random.default_rng(seed), dtype)


def distinct_cloud(n, d=3, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


class TestSemanticEncoding:
    def test_direct_substitution(self):
        F = Tensor([[1.0, 2.0], [3.0, 5.0]])
        g = NeighborGraph(np.array([[0, 1], [1, 0]]), 2)
        out = semantic_feature_encode(F, g).data
        np.testing.assert_array_equal(out[0, 1], [1, 2, -2, -3])
        np.testing.assert_array_equal(out[0, 0], [1, 2, 0, 0])

    def test_matches_loop_oracle(self):
        F = Tensor(distinct_cloud(16, 4, 1))
        g = build_graph(F.data, 5)
        out = semantic_feature_encode(F, g).data
        expected = np.zeros((16, 5, 8))
        for i in range(16):
            for m, j in enumerate(g.indices[i]):
                expected[i, m] = np.concatenate([F.data[i], F.data[i] - F.data[j]])
        np.testing.assert_array_equal(out, expected)
        assert np.all(out[:, :, :4] == out[:, :1, :4])

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            semantic_feature_encode(Tensor(np.zeros((3, 2))), NeighborGraph(np.zeros((4, 1), int), 1))


class TestPositionEncoding:
    def test_raw_vector(self):
        X = Tensor([[0.0, 0, 0], [1.0, 0, 0]])
        g = NeighborGraph(np.array([[0, 1], [1, 0]]), 2)
        raw = relative_position_raw(X, g).data
        np.testing.assert_array_equal(raw[0, 1], [0, 0, 0, 1, 0, 0, -1, 0, 0, 1])
        np.testing.assert_array_equal(raw[0, 0], [0, 0, 0, 0, 0, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(raw[1, 0], [1, 0, 0, 1, 0, 0, 0, 0, 0, 0])

    def test_matches_loop_oracle(self):
        X = Tensor(distinct_cloud(12, 3, 2))
        g = build_graph(X.data, 4)
        raw = relative_position_raw(X, g).data
        for i in range(12):
            for m, j in enumerate(g.indices[i]):
                xi, xj = X.data[i], X.data[j]
                ref = np.concatenate([xi, xj, xi - xj, [np.sqrt(np.sum((xi - xj) ** 2))]])
                np.testing.assert_array_equal(raw[i, m], ref)

    def test_missing_coordinates(self):
        with pytest.raises(ValueError):
            relative_position_raw(None, NeighborGraph(np.zeros((2, 1), int), 1))

    def test_mlp_gradcheck(self):
        cfg, layer = make_layer()
        X = Tensor(distinct_cloud(10, 3, 3))
        g = build_graph(X.data, 4)
        for name, p in layer.pos_mlp.named_parameters():
            # batch norm cancels the bias exactly: its gradient is 0, compare absolutely
            floor = 1.0 if name == "linear.bias" else None
            err = finite_difference_check(
                lambda _: weighted_sum(layer.pos_mlp(relative_position_raw(X, g), True)), p, floor=floor)
            assert err < 1e-6, name
        err = finite_difference_check(lambda t: weighted_sum(layer.pos_mlp(relative_position_raw(t, g), True)), X)
        assert err < 1e-6


class TestEdgeFeature:
    def test_widths(self):
        assert DfaConfig(d_in=64, pos_dim=64).edge_in == 192
        assert DfaConfig(d_in=64, use_position_encoding=False).edge_in == 128

    def test_presence_mismatch(self):
        cfg, layer = make_layer()
        h_f = Tensor(np.zeros((5, 4, 6)))
        with pytest.raises(ValueError):
            edge_feature(None, h_f, layer, True)

    def test_width_mismatch(self):
        cfg, layer = make_layer(use_position_encoding=False)
        with pytest.raises(ValueError, match="width"):
            edge_feature(None, Tensor(np.zeros((5, 4, 7))), layer, True)


class TestAggregate:
    h = Tensor(np.array([[[1.0, 5.0], [3.0, 2.0]]]))

    def test_max(self):
        np.testing.assert_array_equal(aggregate(self.h, "max").data, [[3, 5]])

    def test_mean_and_sum(self):
        np.testing.assert_array_equal(aggregate(self.h, "mean").data, [[2, 3.5]])
        np.testing.assert_array_equal(aggregate(self.h, "sum").data, [[4, 7]])

    def test_attention_equal_scores_is_mean(self):
        scorer = Linear(2, 1, np.random.default_rng(0), np.float64, bias=False)
        scorer.weight.data[:] = 0.0
        np.testing.assert_allclose(aggregate(self.h, "attn", scorer).data, [[2, 3.5]], rtol=1e-15)

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown aggregation"):
            aggregate(self.h, "median")
        with pytest.raises(ValueError):
            DfaConfig(d_in=3, aggregation="median")

    def test_attention_weights_sum_to_one(self):
        scorer = Linear(6, 1, np.random.default_rng(1), np.float64, bias=False)
        h = Tensor(np.random.default_rng(2).normal(size=(2, 7, 5, 6)))
        w = attention_weights(h, scorer).data
        np.testing.assert_allclose(w.sum(axis=-2), 1.0, atol=1e-12)

    def test_max_dominates_mean(self):
        h = Tensor(np.random.default_rng(3).normal(size=(9, 6, 4)))
        assert np.all(aggregate(h, "max").data >= aggregate(h, "mean").data)

    def test_alias(self):
        assert DfaConfig(d_in=3, aggregation="attention-sum").aggregation == "attn"


class TestDfaForward:
    def test_single_point_is_self_loop_mlp(self):
        cfg, layer = make_layer(k=5)
        F = Tensor([[0.3, -0.2, 0.5]])
        out = dfa_forward(F, F, cfg, layer, training=False).data
        xi = F.data[0]
        h_x = layer.pos_mlp(Tensor(np.concatenate([xi, xi, np.zeros(4)])[None]), False)
        h = layer.edge_mlp(Tensor(np.concatenate([h_x.data[0], xi, np.zeros(3)])[None]), False)
        np.testing.assert_allclose(out, h.data, rtol=1e-14)

    def test_default_first_layer_shape(self):
        cfg = DfaConfig(d_in=3, d_out=64, k=20)
        layer = DfaLayer(cfg, np.random.default_rng(0))
        X = Tensor(distinct_cloud(32).astype(np.float32))
        assert dfa_forward(X, X, cfg, layer, training=True).shape == (32, 64)
        assert cfg.edge_in == 64 + 6

    def test_batched_matches_single(self):
        cfg, layer = make_layer()
        X = np.stack([distinct_cloud(10, seed=s) for s in range(3)])
        out = dfa_forward(Tensor(X), Tensor(X), cfg, layer, training=False).data
        for b in range(3):
            single = dfa_forward(Tensor(X[b]), Tensor(X[b]), cfg, layer, training=False).data
            np.testing.assert_allclose(out[b], single, rtol=1e-12)

    @pytest.mark.parametrize("agg", ["max", "sum", "mean", "attn"])
    def test_full_layer_gradcheck(self, agg):
        cfg, layer = make_layer(aggregation=agg)
        X = Tensor(distinct_cloud(32, seed=4))
        F = Tensor(np.random.default_rng(5).normal(size=(32, 3)))
        fn = lambda _: weighted_sum(dfa_forward(F, X, cfg, layer, training=True))  # noqa: E731
        for name, p in layer.named_parameters():
            if p is not None:
                assert finite_difference_check(fn, p, coords=20) < 1e-4, name
        assert finite_difference_check(fn, X, coords=20) < 1e-4
        assert finite_difference_check(fn, F, coords=20) < 1e-4

    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-5)])
    def test_permutation_equivariance(self, dtype, tol):
        cfg, layer = make_layer(k=6, dtype=dtype)
        X = distinct_cloud(40, seed=6).astype(dtype)
        perm = np.random.default_rng(7).permutation(40)
        out = dfa_forward(Tensor(X), Tensor(X), cfg, layer, training=False).data
        outp = dfa_forward(Tensor(X[perm]), Tensor(X[perm]), cfg, layer, training=False).data
        np.testing.assert_allclose(outp, out[perm], rtol=tol, atol=tol)

    def test_locality(self):
        cfg, layer = make_layer(k=4)
        X = distinct_cloud(20, seed=8)
        g = layer_graph(Tensor(X), Tensor(X), cfg)
        i = 0
        far = [j for j in range(20) if j not in g.indices[i]]
        j = far[0]
        Xp = X.copy()
        Xp[j] += 1e-7
        gp = layer_graph(Tensor(Xp), Tensor(Xp), cfg)
        assert np.array_equal(gp.indices[i], g.indices[i])
        a = dfa_forward(Tensor(X), Tensor(X), cfg, layer, training=False).data
        b = dfa_forward(Tensor(Xp), Tensor(Xp), cfg, layer, training=False).data
        assert a[i].tobytes() == b[i].tobytes()

    def test_k_one_is_pointwise(self):
        cfg, layer = make_layer(k=1)
        X = distinct_cloud(6, seed=9)
        out = dfa_forward(Tensor(X), Tensor(X), cfg, layer, training=False).data
        for i in range(6):
            single = dfa_forward(Tensor(X[i:i + 1]), Tensor(X[i:i + 1]), cfg, layer, training=False).data
            np.testing.assert_allclose(out[i], single[0], rtol=1e-14)

    def test_spatial_domain_uses_coordinates(self):
        cfg, layer = make_layer(d_in=2, graph_domain="spatial")
        X = Tensor(distinct_cloud(15, seed=10))
        F = Tensor(np.random.default_rng(11).normal(size=(15, 2)))
        g = layer_graph(F, X, cfg)
        np.testing.assert_array_equal(g.indices, build_graph(X.data, 4).indices)

    def test_no_position_encoding(self):
        cfg, layer = make_layer(use_position_encoding=False)
        assert layer.pos_mlp is None
        X = Tensor(distinct_cloud(10, seed=12))
        assert dfa_forward(X, X, cfg, layer, training=True).shape == (10, 8)

    def test_wrong_input_width(self):
        cfg, layer = make_layer(d_in=3)
        with pytest.raises(ValueError, match="3 input channels"):
            dfa_forward(Tensor(np.zeros((5, 4))), Tensor(np.zeros((5, 3))), cfg, layer, False)
