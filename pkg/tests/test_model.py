import math

import numpy as np
import pytest

from ventgate.gradcheck import check_one
from ventgate.model import (
    Activation,
    CheckpointError,
    Dense,
    MissingModality,
    Variant,
    attention_fuse,
    checkpoint_bytes,
    encode_ehr,
    forward,
    gate_and_fuse,
    init_params,
    load_checkpoint,
    loss_and_grad,
    predict,
    project_image,
    save_checkpoint,
    softplus,
    tslm_transform,
)

S, N, E = 3, 4, 5


def small(variant="gated", seed=0, **kw):
    return init_params(variant, S, N, E, hidden_dim=6, latent_dim=4, seed=seed, **kw)


def batch(rng, n=7):
    x = rng.normal(size=(n, S + 4 * N))
    x[:, -N:] = np.abs(x[:, -N:]) * 10
    return x, rng.normal(size=(n, E)), (rng.random(n) < 0.5).astype(float)


class TestTslm:
    def test_zero_age_is_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        out = tslm_transform(x, np.zeros(3), np.array([0.3, -1.0, 2.0]))
        np.testing.assert_array_equal(out[:3], x)
        np.testing.assert_array_equal(out[3:], 0)

    def test_no_decay_limit(self):
        out = tslm_transform(np.array([5.0]), np.array([240.0]), np.array([-800.0]))
        assert out[0] == 5.0

    def test_scalar_value(self):
        rho = math.log(math.exp(0.5) - 1)  # softplus(rho) = 0.5
        assert softplus(np.array(rho)) == pytest.approx(0.5, abs=1e-15)
        out = tslm_transform(np.array([2.0]), np.array([24.0]), np.array([rho]))
        assert out[0] == pytest.approx(2 * math.exp(-0.5), abs=1e-12)
        assert out[0] == pytest.approx(1.2131, abs=1e-4)
        assert out[1] == 1.0

    def test_negative_age(self):
        with pytest.raises(ValueError):
            tslm_transform(np.ones(1), -np.ones(1), np.zeros(1))


def oracle_mlp(layers, x):
    h = x
    for layer in layers:
        a = [sum(w * v for w, v in zip(row, h)) + b for row, b in zip(layer.weight.tolist(), layer.bias.tolist())]
        if layer.activation is Activation.RELU:
            a = [max(0.0, v) for v in a]
        elif layer.activation is Activation.SIGMOID:
            a = [1 / (1 + math.exp(-v)) for v in a]
        h = a
    return np.array(h)


class TestEncoders:
    def test_zero_params_give_zero(self):
        p = small()
        for layer in p.ehr_encoder + p.projection:
            layer.weight[:] = 0
            layer.bias[:] = 0
        x, z, _ = batch(np.random.default_rng(0))
        assert np.all(encode_ehr(x, p) == 0)
        assert np.all(project_image(z, p) == 0)

    def test_identity_layer(self):
        p = init_params("cxr", 1, 1, 4, latent_dim=4, projection_layers=0)
        p.projection = [Dense(np.eye(4), np.zeros(4), Activation.IDENTITY)]
        z = np.array([[1.0, -2.0, 0.5, 3.0]])
        np.testing.assert_array_equal(project_image(z, p), z)

    def test_toy_forward_matches_oracle(self, rng):
        p = init_params("gated", S, N, E, hidden_dim=5, latent_dim=3, encoder_layers=2, seed=3)
        p.rho[:] = rng.normal(size=N)
        x, z, _ = batch(rng, 1)
        s = S
        dt = x[0, s + 3 * N :] / 24
        decay = np.exp(-np.log1p(np.exp(p.rho)) * dt)
        u = np.concatenate([x[0, :s], x[0, s : s + N] * decay, dt, x[0, s + N : s + 3 * N]])
        np.testing.assert_allclose(encode_ehr(x, p)[0], oracle_mlp(p.ehr_encoder, u), atol=1e-12)
        np.testing.assert_allclose(project_image(z, p)[0], oracle_mlp(p.projection, z[0]), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            encode_ehr(np.zeros((1, 5)), small())
        with pytest.raises(ValueError):
            project_image(np.zeros((1, E + 1)), small())


class TestFusion:
    h_e = np.array([[1.0, -2.0, 3.0]])
    h_c = np.array([[0.0, 4.0, -1.0]])

    def test_gate_saturation(self):
        w = np.zeros(6)
        h, g = gate_and_fuse(self.h_e, self.h_c, w, np.array([-60.0]))
        np.testing.assert_allclose(h, self.h_e, atol=1e-20)
        h, g = gate_and_fuse(self.h_e, self.h_c, w, np.array([60.0]))
        np.testing.assert_allclose(h, self.h_c, atol=1e-20)

    def test_fixed_point_and_midpoint(self, rng):
        v = rng.normal(size=(1, 3))
        h, _ = gate_and_fuse(v, v, rng.normal(size=6), np.array([0.7]))
        np.testing.assert_allclose(h, v, atol=1e-15)
        h, g = gate_and_fuse(self.h_e, self.h_c, np.zeros(6), np.zeros(1))
        assert g[0] == 0.5
        np.testing.assert_array_equal(h, (self.h_e + self.h_c) / 2)

    def test_gate_range_and_bound(self, rng):
        for scale in (1.0, 5.0):
            for _ in range(50):
                a, b = rng.normal(size=(8, 3)) * scale, rng.normal(size=(8, 3)) * scale
                w, bias = rng.normal(size=6), rng.normal(size=1)
                h, g = gate_and_fuse(a, b, w, bias)
                logit = np.concatenate([a, b], 1) @ w + bias
                # float64 sigmoid is strictly inside (0, 1) while |logit| < ~36
                inner = np.abs(logit) < 30
                assert np.all((g[inner] > 0) & (g[inner] < 1))
                assert np.all((g >= 0) & (g <= 1))
                assert np.all(h >= np.minimum(a, b) - 1e-12) and np.all(h <= np.maximum(a, b) + 1e-12)

    def test_attention(self):
        h, w_c = attention_fuse(self.h_e, self.h_c, np.zeros(3))
        np.testing.assert_array_equal(h, (self.h_e + self.h_c) / 2)
        # scores s_e = 1, s_c = 0
        a = np.array([1.0, 0.0, 0.0])
        he, hc = np.array([[1.0, 0, 0]]), np.array([[0.0, 5, 5]])
        h, w_c = attention_fuse(he, hc, a)
        assert 1 - w_c[0] == pytest.approx(0.7311, abs=1e-4) and w_c[0] == pytest.approx(0.2689, abs=1e-4)
        h, w_c = attention_fuse(np.array([[100.0, 0, 0]]), hc, a)
        assert w_c[0] < 1e-40

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gate_and_fuse(self.h_e, self.h_c[:, :2], np.zeros(5), np.zeros(1))
        with pytest.raises(ValueError):
            attention_fuse(self.h_e, self.h_c, np.zeros(2))


class TestPredict:
    def test_range_and_modalities(self, rng):
        x, z, _ = batch(rng)
        for v in Variant:
            p = small(v)
            out = predict(p, x if v.uses_ehr else None, z if v.uses_cxr else None)
            assert np.all((out > 0) & (out < 1))
        with pytest.raises(MissingModality):
            predict(small("cxr"), x, None)
        with pytest.raises(MissingModality):
            predict(small("ehr"), None, z)

    def test_forced_gate_matches_unimodal(self, rng):
        x, z, _ = batch(rng)
        p = small("gated")
        np.testing.assert_array_equal(
            forward(p, x, z, force_gate=0.0).prob, predict(p.with_variant("ehr"), x)
        )
        np.testing.assert_array_equal(
            forward(p, x, z, force_gate=1.0).prob, predict(p.with_variant("cxr"), None, z)
        )

    def test_concat_reduction(self, rng):
        x, z, _ = batch(rng)
        p = small("concat")
        d = p.latent_dim
        # identity on the EHR half, zero cross-block weights, linear output
        p.concat = Dense(np.hstack([np.eye(d), np.zeros((d, d))]), np.zeros(d), Activation.IDENTITY)
        np.testing.assert_allclose(predict(p, x, z), predict(p.with_variant("ehr"), x), atol=1e-15)

    def test_deterministic(self, rng):
        x, z, _ = batch(rng)
        p = small()
        assert predict(p, x, z).tobytes() == predict(p, x, z).tobytes()


class TestBackward:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_finite_differences(self, variant):
        for seed in range(3):
            r = check_one(variant, seed)
            assert r.max_rel_error < 1e-4, (r.worst_tensor, r.max_rel_error)

    def test_unused_branch_has_zero_gradient(self, rng):
        x, z, y = batch(rng)
        _, g = loss_and_grad(small("ehr"), x, None, y)
        for k, v in g.items():
            if k.startswith(("projection", "gate", "attention", "concat")):
                assert np.all(v == 0), k
        _, g = loss_and_grad(small("cxr"), None, z, y)
        for k, v in g.items():
            if k.startswith(("ehr_encoder", "tslm", "gate", "attention", "concat")):
                assert np.all(v == 0), k

    def test_stationary_point(self):
        """Zero weights with a head bias at the class log-odds leave nothing to learn."""
        p = small("ehr")
        for t_name, t in p.tensors().items():
            t[...] = 0
        y = np.array([1.0, 0.0, 0.0, 0.0])
        p.head.bias[:] = math.log(0.25 / 0.75)
        x = np.random.default_rng(0).normal(size=(4, S + 4 * N))
        x[:, -N:] = 1.0
        _, g = loss_and_grad(p, x, None, y)
        for k, v in g.items():
            np.testing.assert_allclose(v, 0, atol=1e-15, err_msg=k)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        p = small("attention", encoder_layers=3)
        p.rho[:] = rng.normal(size=N)
        extras = {"standardizer.mean": rng.normal(size=10), "threshold": np.array([np.inf])}
        path = tmp_path / "m.vgm"
        save_checkpoint(path, p, extras)
        q, ex = load_checkpoint(path)
        assert q.variant is Variant.ATTENTION
        for (ka, a), (kb, b) in zip(p.tensors().items(), q.tensors().items()):
            assert ka == kb
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(ex["standardizer.mean"], extras["standardizer.mean"])
        assert ex["threshold"][0] == np.inf
        assert checkpoint_bytes(q, ex) == path.read_bytes()
        x, z, _ = batch(rng)
        np.testing.assert_array_equal(predict(p, x, z), predict(q, x, z))

    def test_corruption(self, tmp_path):
        path = tmp_path / "m.vgm"
        save_checkpoint(path, small())
        raw = path.read_bytes()
        for bad in (b"XXXX" + raw[4:], raw[:-5], raw + b"\0"):
            path.write_bytes(bad)
            with pytest.raises(CheckpointError):
                load_checkpoint(path)
