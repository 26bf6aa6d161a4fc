import io

import numpy as np
import pytest

from dfanet.autodiff import Tape, Tensor, backward, cross_entropy, finite_difference_check
from dfanet.checkpoint import CheckpointError, load_model, read_checkpoint, write_checkpoint
from dfanet.models import (
    ModelConfig,
    build_model,
    count_parameters,
    estimate_flops,
)
from dfanet.nn import Linear


def cloud(n, seed=0, dtype=np.float64, batch=None):
    shape = (n, 3) if batch is None else (batch, n, 3)
    return np.random.default_rng(seed).normal(size=shape).astype(dtype)


def tiny(task="cls", **kw):
    base = dict(task=task, k=4, width_scale=1 / 16, precision=64, num_classes=3, num_parts=4,
                num_categories=2)
    base.update(kw)
    return ModelConfig(**base)


class TestConfig:
    def test_default_widths(self):
        c = ModelConfig()
        assert len(c.dfa_widths) == 4 and c.concat_width == 320
        s = ModelConfig(task="part-segmentation")
        assert len(s.dfa_widths) == 3 and s.global_width == 1088
        assert ModelConfig(task="semseg", input_dim=9).global_width == 1024

    def test_no_global_branch_width(self):
        assert ModelConfig(use_low_dim_global=False).concat_width == 256

    def test_json_round_trip(self):
        c = ModelConfig(task="partseg", k=8, width_scale=0.25, dfa_overrides=({"aggregation": "mean"},))
        assert ModelConfig.from_json(c.to_json()) == c
        assert c.to_json() == ModelConfig.from_json(c.to_json()).to_json()

    def test_invalid(self):
        with pytest.raises(ValueError):
            ModelConfig(task="detection")
        with pytest.raises(ValueError):
            ModelConfig(task="semseg", use_category_vector=True)
        with pytest.raises(ValueError):
            ModelConfig.from_json('{"bogus": 1}')

    def test_override_applies_to_one_layer(self):
        cfgs = ModelConfig(dfa_overrides=({}, {"aggregation": "mean"})).dfa_configs()
        assert [c.aggregation for c in cfgs] == ["max", "mean", "max", "max"]
        assert [c.d_in for c in cfgs] == [3, 64, 64, 64]


class TestSpatialTransform:
    def test_identity_at_init(self):
        m = build_model(tiny())
        X = Tensor(cloud(6, batch=2))
        out, T = m.transform(X, training=True)
        np.testing.assert_array_equal(T.data, np.broadcast_to(np.eye(3), (2, 3, 3)))
        np.testing.assert_array_equal(out.data, X.data)

    def test_shapes_and_gradcheck(self):
        m = build_model(tiny())
        rng = np.random.default_rng(1)
        m.transform.out.weight.data[:] = rng.normal(scale=0.1, size=m.transform.out.weight.shape)
        X = Tensor(cloud(6, seed=2, batch=2))
        out, T = m.transform(X, training=True)
        assert out.shape == (2, 6, 3) and T.shape == (2, 3, 3)
        w = rng.normal(size=out.shape)

        def fn(t):
            from dfanet.autodiff import mul, reduce_sum
            return reduce_sum(mul(m.transform(t, True)[0], w))

        assert finite_difference_check(fn, X) < 1e-6
        for name, p in m.transform.named_parameters():
            assert finite_difference_check(lambda _: fn(X), p, coords=20) < 1e-4, name


class TestGlobalBranch:
    def test_single_point_and_duplicates(self):
        m = build_model(tiny())
        X = cloud(5, seed=3, batch=1)
        gb = m.global_branch
        a = gb(Tensor(X), training=False).data
        b = gb(Tensor(np.concatenate([X, X], axis=1)), training=False).data
        np.testing.assert_array_equal(a, b)
        one = gb(Tensor(X[:, :1]), training=False).data
        np.testing.assert_array_equal(one[0], gb.mlp(Tensor(X[:, :1]), False).data[0, 0])

    def test_default_width(self):
        assert build_model(ModelConfig()).global_branch.mlp.d_out == 64


class TestClassifier:
    def test_default_shape_contract(self):
        c = ModelConfig(num_points=1024)
        m = build_model(c)
        assert m.embed.d_in == 320
        logits = m(cloud(1024, dtype=np.float32, batch=2), training=True, rng=np.random.default_rng(0))
        assert logits.shape == (2, 40)

    def test_unbatched(self):
        m = build_model(tiny())
        assert m(cloud(10)).shape == (3,)

    def test_eval_deterministic(self):
        m = build_model(tiny())
        X = cloud(12, seed=4)
        assert m(X).data.tobytes() == m(X).data.tobytes()

    def test_eval_does_not_touch_running_stats(self):
        m = build_model(tiny())
        before = [(s.mean.copy(), s.var.copy()) for _, s in m.named_states()]
        m(cloud(12, seed=5))
        for (mu, var), (_, s) in zip(before, m.named_states()):
            assert np.array_equal(mu, s.mean) and np.array_equal(var, s.var)

    def test_wrong_input_dim(self):
        with pytest.raises(ValueError, match="3 input channels"):
            build_model(tiny())(np.zeros((5, 4)))

    @pytest.mark.parametrize("dtype,precision,tol", [(np.float32, 32, 1e-4), (np.float64, 64, 1e-10)])
    def test_permutation_invariance(self, dtype, precision, tol):
        c = ModelConfig(k=6, width_scale=0.25, num_classes=5, precision=precision)
        m = build_model(c, seed=1)
        X = cloud(48, seed=6, dtype=dtype)
        ref = m(X).data
        for s in range(3):
            perm = np.random.default_rng(s).permutation(48)
            assert np.max(np.abs(m(X[perm]).data - ref)) < tol

    def test_full_gradcheck(self):
        """Every parameter tensor against central differences on 8-point clouds."""
        c = tiny(num_classes=2)
        m = build_model(c, seed=2)
        for _, p in m.named_parameters():
            p.data += np.random.default_rng(3).normal(scale=0.05, size=p.shape)
        X = cloud(8, seed=7, batch=2)
        labels = np.array([0, 1])

        def fn(_):
            return cross_entropy(m(X, training=True, rng=np.random.default_rng(0)), labels)

        for name, p in m.named_parameters():
            assert finite_difference_check(fn, p, coords=20) < 1e-4, name


class TestSegmenter:
    def test_part_seg_shape(self):
        c = tiny("partseg")
        m = build_model(c)
        out = m(cloud(10, batch=2), categories=np.array([0, 1]), training=True, rng=np.random.default_rng(0))
        assert out.shape == (2, 10, 4)

    def test_default_head_widths(self):
        m = build_model(ModelConfig(task="partseg"))
        assert m.head[0].d_in == 1088 + 192
        assert m.category.d_in == 16 and m.category.d_out == 64

    def test_semantic_mode(self):
        c = tiny("semseg", input_dim=9)
        m = build_model(c)
        X = np.random.default_rng(0).normal(size=(12, 9))
        assert m(X).shape == (12, 4)
        assert m.head[0].d_in == c.w(1024) + c.local_width
        with pytest.raises(ValueError, match="no category"):
            m(X, categories=0)

    def test_category_required(self):
        with pytest.raises(ValueError, match="category"):
            build_model(tiny("partseg"))(cloud(10))

    @pytest.mark.parametrize("dtype,precision,tol", [(np.float32, 32, 1e-4), (np.float64, 64, 1e-10)])
    def test_permutation_equivariance(self, dtype, precision, tol):
        c = ModelConfig(task="partseg", k=6, width_scale=0.25, num_parts=4, num_categories=2,
                        precision=precision)
        m = build_model(c, seed=3)
        X = cloud(40, seed=8, dtype=dtype)
        ref = m(X, categories=1).data
        perm = np.random.default_rng(9).permutation(40)
        assert np.max(np.abs(m(X[perm], categories=1).data - ref[perm])) < tol

    def test_gradcheck(self):
        m = build_model(tiny("partseg"), seed=4)
        X = cloud(8, seed=10, batch=2)
        labels = np.random.default_rng(0).integers(0, 4, size=(2, 8))

        def fn(_):
            return cross_entropy(m(X, np.array([0, 1]), True, np.random.default_rng(0)), labels)

        for name, p in list(m.named_parameters())[::3]:
            assert finite_difference_check(fn, p, coords=10) < 1e-4, name


class TestAccounting:
    def test_single_linear(self):
        lin = Linear(3, 64, np.random.default_rng(0))
        assert lin.weight.data.size + lin.bias.data.size == 256

    def test_default_classifier_in_band(self):
        n = count_parameters(ModelConfig())
        assert 900_000 <= n <= 1_300_000

    def test_independent_of_points(self):
        assert count_parameters(ModelConfig(num_points=512)) == count_parameters(ModelConfig(num_points=2048))

    def test_width_scale_quadratic(self):
        full = count_parameters(ModelConfig())
        for s in (0.25, 0.5):
            ratio = count_parameters(ModelConfig(width_scale=s)) / full
            assert 0.6 * s * s < ratio < 1.6 * s * s

    def test_excludes_running_stats(self):
        m = build_model(tiny())
        n_bn = sum(s.mean.size for _, s in m.named_states())
        assert n_bn > 0
        assert m.num_parameters() == sum(p.data.size for _, p in m.named_parameters())

    def test_flops_single_linear_formula(self):
        from dfanet.models import _linear_flops

        assert _linear_flops(Linear(3, 64, np.random.default_rng(0)), 1024) == 393_216

    def test_flops_superlinear(self):
        c = ModelConfig()
        assert estimate_flops(c, 2048) > 2 * estimate_flops(c, 1024)

    def test_flops_near_reported(self):
        f = estimate_flops(ModelConfig(), 1024)
        assert 2.17e9 / 3 <= f <= 2.17e9 * 3


class TestCheckpoint:
    def test_round_trip(self):
        c = tiny("partseg")
        m = build_model(c, seed=5)
        m(cloud(10, batch=2), np.array([0, 1]), training=True, rng=np.random.default_rng(0))
        buf = io.BytesIO()
        write_checkpoint(buf, c, m, {"seed": 7})
        blob = buf.getvalue()
        assert blob.startswith(b"dfa-ckpt-1\n")
        c2, m2, rng = load_model(io.BytesIO(blob), seed=99)
        assert c2 == c and rng == {"seed": 7}
        X = cloud(10, seed=11)
        assert m(X, 1).data.tobytes() == m2(X, 1).data.tobytes()
        buf2 = io.BytesIO()
        write_checkpoint(buf2, c2, m2, rng)
        assert buf2.getvalue() == blob

    def test_bad_version(self):
        with pytest.raises(CheckpointError, match="version"):
            read_checkpoint(io.BytesIO(b"dfa-ckpt-9\n"))

    def test_truncated(self):
        c = tiny()
        buf = io.BytesIO()
        write_checkpoint(buf, c, build_model(c))
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(io.BytesIO(buf.getvalue()[:-10]))

    def test_float32_payload(self):
        c = tiny(precision=32)
        buf = io.BytesIO()
        write_checkpoint(buf, c, build_model(c))
        _, arrays, _ = read_checkpoint(io.BytesIO(buf.getvalue()))
        assert all(a.dtype == np.float32 for a in arrays.values())


def test_backward_reaches_every_parameter():
    m = build_model(tiny(), seed=6)
    ps = m.param_set()
    with Tape() as tape:
        loss = cross_entropy(m(cloud(8, batch=2), True, np.random.default_rng(0)), np.array([0, 2]))
    backward(loss, tape, ps.tensors())
    assert all(p.grad is not None and p.grad.shape == p.shape for p in ps.tensors())
