import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nerfguide import diffusion, tensorio
from nerfguide.diffusion import (COSINE, GaussianMixtureOracle, TinyDenoiser, add_noise, ddim_sample,
                                 ddim_step, gm_oracle_eps, predict_x0, velocity, velocity_convert)

times = st.floats(0.0, 1.0)
inner = st.floats(0.01, 0.99)


class TestSchedule:
    def test_endpoints(self):
        assert COSINE.alpha_sigma(0.0) == (1.0, 0.0)
        assert COSINE.alpha_sigma(1.0) == (0.0, 1.0)

    def test_half(self):
        a, s = COSINE.alpha_sigma(0.5)
        assert a == pytest.approx(np.sqrt(2) / 2, abs=1e-15) and s == pytest.approx(a, abs=1e-15)

    def test_out_of_range(self):
        for t in (-0.1, 1.1, np.nan):
            with pytest.raises(ValueError):
                COSINE.alpha_sigma(t)

    def test_unit_circle_and_monotone(self):
        a, s = COSINE.alpha_sigma(np.linspace(0, 1, 10_000))
        np.testing.assert_allclose(a ** 2 + s ** 2, 1, atol=1e-12)
        assert np.all(np.diff(a) <= 0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            diffusion.NoiseSchedule("linear")


class TestNoising:
    def test_endpoints(self, rng):
        x, e = rng.normal(size=(2, 4, 4, 3))
        np.testing.assert_array_equal(add_noise(x, e, COSINE, 0.0), x)
        np.testing.assert_array_equal(add_noise(x, e, COSINE, 1.0), e)

    def test_variance(self, rng):
        x = rng.uniform(size=(50,))
        t = 0.3
        z = np.stack([add_noise(x, rng.standard_normal(50), COSINE, t) for _ in range(4000)])
        s2 = COSINE.alpha_sigma(t)[1] ** 2
        # sample variance of 4000 normals has relative sd sqrt(2/3999)
        assert np.all(np.abs(z.var(0) / s2 - 1) < 3 * np.sqrt(2 / 3999) * 1.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            add_noise(np.zeros(3), np.zeros(4), COSINE, 0.5)

    def test_velocity_at_zero_is_eps(self, rng):
        x, e = rng.normal(size=(2, 5))
        np.testing.assert_array_equal(velocity(x, e, COSINE, 0.0), e)

    @given(inner, st.integers(0, 1000))
    def test_conversions(self, t, seed):
        r = np.random.default_rng(seed)
        x, e = r.normal(size=(2, 3, 3, 3))
        z = add_noise(x, e, COSINE, t)
        v = velocity(x, e, COSINE, t)
        for kind, val in (("v", v), ("eps", e), ("x0", x)):
            out = velocity_convert(val, kind, z, COSINE, t)
            np.testing.assert_allclose(out["v"], v, atol=1e-12)
            np.testing.assert_allclose(out["eps"], e, atol=1e-12)
            np.testing.assert_allclose(out["x0"], x, atol=1e-12)

    def test_eps_v_roundtrip(self, rng):
        z, e = rng.normal(size=(2, 8))
        v = velocity_convert(e, "eps", z, COSINE, 0.37)["v"]
        np.testing.assert_allclose(velocity_convert(v, "v", z, COSINE, 0.37)["eps"], e, atol=1e-12)

    def test_x0_from_v_exact(self, rng):
        x, e = rng.normal(size=(2, 6))
        t = rng.uniform()
        z = add_noise(x, e, COSINE, t)
        out = velocity_convert(velocity(x, e, COSINE, t), "v", z, COSINE, t)
        np.testing.assert_allclose(out["x0"], x, atol=1e-10)


class TestPredictAndStep:
    def test_exact_eps(self, rng):
        x, e = rng.normal(size=(2, 4, 4, 3))
        z = add_noise(x, e, COSINE, 0.6)
        np.testing.assert_allclose(predict_x0(z, e, COSINE, 0.6), x, atol=1e-12)

    def test_zero_eps(self, rng):
        z = rng.normal(size=5)
        a = COSINE.alpha_sigma(0.4)[0]
        np.testing.assert_allclose(predict_x0(z, np.zeros(5), COSINE, 0.4), z / a)

    def test_undefined_at_one(self):
        with pytest.raises(ValueError):
            predict_x0(np.zeros(2), np.zeros(2), COSINE, 1.0)

    def test_single_gaussian_posterior_mean(self, rng):
        mu = rng.uniform(size=(4, 4, 3))
        o = GaussianMixtureOracle.single(mu)
        for t in (0.1, 0.5, 0.9):
            z = rng.normal(size=mu.shape)
            np.testing.assert_allclose(predict_x0(z, o.eps(z, t), COSINE, t), mu, atol=1e-12)

    def test_fixed_point(self, rng):
        z, e = rng.normal(size=(2, 7))
        np.testing.assert_allclose(ddim_step(z, e, COSINE, 0.3, 0.3), z, atol=1e-12)

    def test_ordering(self):
        with pytest.raises(ValueError):
            ddim_step(np.zeros(2), np.zeros(2), COSINE, 0.3, 0.5)

    @given(inner, st.floats(0.0, 1.0), st.integers(0, 1000))
    def test_trajectory(self, t, frac, seed):
        r = np.random.default_rng(seed)
        x, e = r.normal(size=(2, 6))
        tn = t * frac
        z = add_noise(x, e, COSINE, t)
        np.testing.assert_allclose(ddim_step(z, e, COSINE, t, tn), add_noise(x, e, COSINE, tn),
                                   atol=1e-10)

    def test_oracle_one_step(self, rng):
        mu = rng.uniform(size=(3, 3, 3))
        o = GaussianMixtureOracle.single(mu)
        for t in (0.2, 0.7, 1.0):
            z = rng.normal(size=mu.shape)
            e, x0 = o.denoise(z, t)
            np.testing.assert_allclose(ddim_step(z, e, COSINE, t, 0.0, x0), mu, atol=1e-12)


class TestSampling:
    def test_single_gaussian_seed_independent(self, rng):
        mu = rng.uniform(size=(4, 4, 3))
        o = GaussianMixtureOracle.single(mu)
        outs = np.stack([ddim_sample(o, None, mu.shape, 16, seed=s) for s in range(10)])
        np.testing.assert_allclose(outs, np.broadcast_to(mu, outs.shape), atol=1e-5)
        assert outs.var(0).max() < 1e-10

    def test_steps_one_is_single_step(self, rng):
        mu = rng.uniform(size=5)
        o = GaussianMixtureOracle([1, 1], np.stack([mu, -mu]), s=0.3)
        z1 = np.random.default_rng(9).standard_normal(5)
        e, x0 = o.denoise(z1, 1.0)
        np.testing.assert_allclose(ddim_sample(o, None, (5,), 1, seed=9),
                                   ddim_step(z1, e, COSINE, 1.0, 0.0, x0), atol=1e-15)

    def test_steps_validated(self):
        with pytest.raises(ValueError):
            ddim_sample(GaussianMixtureOracle.single(np.zeros(2)), None, (2,), 0)


class TestOracle:
    def test_weights_normalised(self):
        o = GaussianMixtureOracle([2.0, 6.0], np.zeros((2, 3)))
        np.testing.assert_allclose(o.weights, [0.25, 0.75])

    def test_invalid(self):
        with pytest.raises(ValueError):
            GaussianMixtureOracle([1.0, -1.0], np.zeros((2, 3)))
        with pytest.raises(ValueError):
            GaussianMixtureOracle([1.0], np.zeros((2, 3)))
        with pytest.raises(ValueError):
            GaussianMixtureOracle([1.0], np.zeros((1, 3)), s=-1)

    @given(inner, st.floats(0.0, 2.0), st.integers(0, 1000))
    def test_single_formula(self, t, s, seed):
        r = np.random.default_rng(seed)
        mu, z = r.normal(size=(2, 6))
        a, sg = COSINE.alpha_sigma(t)
        expect = sg * (z - a * mu) / (a * a * s * s + sg * sg)
        np.testing.assert_allclose(gm_oracle_eps(GaussianMixtureOracle.single(mu, s), z, t), expect,
                                   atol=1e-12)

    def test_symmetric_midpoint(self):
        m = np.array([1.0, 0.0, 0.0])
        o = GaussianMixtureOracle([1, 1], np.stack([m, -m]))
        z = np.array([0.0, 0.4, -0.3])
        t = 0.5
        # mean terms cancel: eps = sigma z / sigma^2
        np.testing.assert_allclose(o.eps(z, t), z / COSINE.alpha_sigma(t)[1], atol=1e-14)

    @pytest.mark.parametrize("t", [0.2, 0.6, 0.95, 1.0])
    def test_finite_difference_score(self, rng, t):
        means = rng.normal(size=(3, 2, 2, 2))
        o = GaussianMixtureOracle([0.2, 0.5, 0.3], means, s=0.4)
        z = rng.normal(size=(2, 2, 2))
        h = 1e-5
        grad = np.zeros(z.size)
        for k in range(z.size):
            d = np.zeros(z.size)
            d[k] = h
            grad[k] = (o.log_density(z + d.reshape(z.shape), t)
                       - o.log_density(z - d.reshape(z.shape), t)) / (2 * h)
        eps = gm_oracle_eps(o, z, t).ravel()
        fd = -COSINE.alpha_sigma(t)[1] * grad
        np.testing.assert_allclose(eps, fd, rtol=1e-6, atol=1e-9)

    def test_time_zero_rejected(self):
        with pytest.raises(ValueError):
            gm_oracle_eps(GaussianMixtureOracle.single(np.zeros(2)), np.zeros(2), 0.0)

    def test_from_json(self, tmp_path, rng):
        imgs = rng.uniform(size=(2, 3, 3, 3)).astype(np.float32)
        for i, im in enumerate(imgs):
            tensorio.save_float_image(tmp_path / f"m{i}.f32", im)
        (tmp_path / "o.json").write_text(json.dumps({"weights": [1, 3], "means": ["m0.f32", "m1.f32"],
                                                     "s": 0.1}))
        o = GaussianMixtureOracle.from_json(tmp_path / "o.json")
        np.testing.assert_array_equal(o.means, imgs.astype(np.float64))
        assert o.s == 0.1 and o.weights[1] == 0.75


class TestTinyDenoiser:
    def test_windows_adjoint(self, rng):
        x = rng.normal(size=(2, 5, 4, 3))
        g = rng.normal(size=(2, 5, 4, 27))
        lhs = np.sum(diffusion.image_windows(x) * g)
        rhs = np.sum(x * diffusion.image_windows_backward(g, 3))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_shapes(self, rng):
        den = TinyDenoiser.create(0, hidden=16)
        z = rng.normal(size=(6, 5, 3))
        e = den.eps(z, 0.4, rng.uniform(size=(6, 5, 3)))
        assert e.shape == z.shape and np.all(np.isfinite(e))

    def test_cond_required(self, rng):
        with pytest.raises(ValueError):
            TinyDenoiser.create(0).predict_v(np.zeros((3, 3, 3)), 0.5)

    @pytest.mark.parametrize("conditional", [True, False])
    def test_backward_finite_difference(self, rng, conditional):
        den = TinyDenoiser.create(1, conditional=conditional, hidden=8)
        for k in ("b1", "b2", "b3"):
            # zero biases put exact ReLU kinks where all inputs vanish
            den.params[k] += rng.normal(0, 0.1, den.params[k].shape)
        cond = rng.uniform(size=(2, 4, 4, 3))
        target = rng.uniform(size=(2, 4, 4, 3))
        t = np.array([0.3, 0.8])
        eps = rng.standard_normal(target.shape)
        loss, cache, d_v = diffusion.v_loss(den, cond, target, t, eps)
        grads, d_cond = den.backward(cache, d_v)
        h = 1e-6
        for name, arr in den.params.items():
            flat = arr.reshape(-1)
            for k in rng.choice(flat.size, min(6, flat.size), replace=False):
                v = flat[k]
                flat[k] = v + h
                a = diffusion.v_loss(den, cond, target, t, eps)[0]
                flat[k] = v - h
                b = diffusion.v_loss(den, cond, target, t, eps)[0]
                flat[k] = v
                assert (a - b) / (2 * h) == pytest.approx(grads[name].reshape(-1)[k], rel=1e-4, abs=1e-9)
        if conditional:
            c = cond.reshape(-1)
            for k in rng.choice(c.size, 6, replace=False):
                v = c[k]
                c[k] = v + h
                a = diffusion.v_loss(den, cond, target, t, eps)[0]
                c[k] = v - h
                b = diffusion.v_loss(den, cond, target, t, eps)[0]
                c[k] = v
                assert (a - b) / (2 * h) == pytest.approx(d_cond.reshape(-1)[k], rel=1e-4, abs=1e-9)
        else:
            assert d_cond is None

    def test_zero_steps(self):
        den = TinyDenoiser.create(0, hidden=8)
        imgs = np.zeros((2, 4, 4, 3))
        res = diffusion.denoiser_train(den, imgs, imgs, diffusion.DenoiserTrainConfig(steps=0))
        for k, v in den.params.items():
            np.testing.assert_array_equal(res.model.params[k], v)

    def test_empty(self):
        with pytest.raises(ValueError):
            diffusion.denoiser_train(TinyDenoiser.create(0), np.zeros((0, 4, 4, 3)),
                                     np.zeros((0, 4, 4, 3)))

    def test_constant_image_beats_zero_predictor(self):
        img = np.broadcast_to([0.8, 0.3, 0.5], (1, 6, 6, 3)).copy()
        den = TinyDenoiser.create(0, conditional=False, hidden=32)
        cfg = diffusion.DenoiserTrainConfig(steps=1500, batch_images=8, lr=1e-3, seed=0)
        res = diffusion.denoiser_train(den, img, img, cfg)
        loss, zero = diffusion.heldout_v_loss(res.model, img, np.repeat(img, 8, 0)[:1], seed=5,
                                              repeats=64)
        assert loss * 10 <= zero

    def test_save_load(self, tmp_path, rng):
        den = TinyDenoiser.create(3, hidden=8)
        den.save(tmp_path / "d.nfd")
        back = TinyDenoiser.load(tmp_path / "d.nfd")
        z, c = rng.normal(size=(2, 4, 4, 3))
        np.testing.assert_allclose(back.predict_v(z, 0.5, c), den.predict_v(z, 0.5, c), atol=1e-5)
        assert back.config() == den.config()
