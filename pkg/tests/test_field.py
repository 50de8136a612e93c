import numpy as np
import pytest
from hypothesis import given, strategies as st

from nerfguide import field, geometry
from nerfguide.field import (FieldParams, Triplane, field_eval, field_eval_backward, init_field,
                             pixel_query, positional_encoding, triplane_query)
from nerfguide.geometry import Intrinsics

INTR = Intrinsics.from_fov(60, 16, 16)
NEAR, FAR = 1.0, 3.0


def bilinear_scalar(grid, a, b):
    """Reference bilinear lookup on a (A, B, C) grid, align-corners coordinates."""
    A, B, _ = grid.shape
    pa = (a + 1) / 2 * (A - 1)
    pb = (b + 1) / 2 * (B - 1)
    i = min(int(np.floor(pa)), A - 2)
    j = min(int(np.floor(pb)), B - 2)
    fa, fb = pa - i, pb - j
    return ((1 - fa) * (1 - fb) * grid[i, j] + (1 - fa) * fb * grid[i, j + 1]
            + fa * (1 - fb) * grid[i + 1, j] + fa * fb * grid[i + 1, j + 1])


def inside_points(rng, n):
    depth = rng.uniform(NEAR + 0.05, FAR - 0.05, n)
    uv = rng.uniform(-0.9, 0.9, (n, 2))
    x = uv[:, 0] * depth * INTR.cx / INTR.fx
    y = -uv[:, 1] * depth * INTR.cy / INTR.fy
    return np.stack([x, y, -depth], 1)


def small_field(seed=0, **kw):
    kw.setdefault("resolution", 8)
    return init_field(INTR, NEAR, FAR, seed, channels=4, hidden=8, dtype=np.float64, **kw)


class TestTriplaneQuery:
    def test_at_nodes(self, rng):
        planes = rng.normal(size=(3, 5, 5, 3))
        tp = Triplane(planes)
        i, j, k = 1, 3, 4
        xt = np.array([[i, j, k]]) / 4 * 2 - 1
        expect = planes[0, i, j] + planes[1, i, k] + planes[2, j, k]
        np.testing.assert_allclose(triplane_query(tp, xt)[0], expect, atol=1e-14)

    def test_constant(self, rng):
        v = rng.normal(size=6)
        tp = Triplane(np.broadcast_to(v, (3, 4, 4, 6)).copy())
        out = triplane_query(tp, rng.uniform(-1, 1, (20, 3)))
        np.testing.assert_allclose(out, np.broadcast_to(3 * v, (20, 6)), atol=1e-12)

    def test_scalar_reference(self, rng):
        planes = rng.normal(size=(3, 7, 7, 5))
        xt = rng.uniform(-1, 1, (50, 3))
        out = triplane_query(Triplane(planes), xt)
        for n in range(50):
            ref = sum(bilinear_scalar(planes[p], xt[n, a], xt[n, b])
                      for p, (a, b) in enumerate(field.PLANE_AXES))
            np.testing.assert_allclose(out[n], ref, atol=1e-6)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            triplane_query(Triplane(np.zeros((3, 4, 4, 1))), [[0, 0, 1.5]])

    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 16))
    def test_linear_in_features(self, a, b, seed):
        r = np.random.default_rng(seed)
        w1, w2 = r.normal(size=(2, 3, 4, 4, 2))
        xt = r.uniform(-1, 1, (5, 3))
        lhs = triplane_query(Triplane(a * w1 + b * w2), xt)
        rhs = a * triplane_query(Triplane(w1), xt) + b * triplane_query(Triplane(w2), xt)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestPixelQuery:
    def test_same_ray_same_feature(self, rng):
        feats = rng.normal(size=(16, 16, 3))
        p = np.array([0.2, -0.1, -1.0])
        np.testing.assert_allclose(pixel_query(feats, p, INTR), pixel_query(feats, 2.7 * p, INTR),
                                   atol=1e-12)

    def test_axis_is_image_center(self, rng):
        feats = rng.normal(size=(16, 16, 3))
        expect = feats[7:9, 7:9].mean(axis=(0, 1))
        np.testing.assert_allclose(pixel_query(feats, [0, 0, -2.0], INTR)[0], expect, atol=1e-12)

    def test_scalar_reference(self, rng):
        feats = rng.normal(size=(16, 16, 3))
        pts = inside_points(rng, 30)
        out = pixel_query(feats, pts, INTR)
        uv = geometry.project(pts, INTR)
        for n in range(30):
            # pixel centers sit at half-integer image coordinates
            c = np.clip((uv[n, 0] + 1) / 2 * 16 - 0.5, 0, 15)
            r = np.clip((uv[n, 1] + 1) / 2 * 16 - 0.5, 0, 15)
            i, j = min(int(r), 14), min(int(c), 14)
            fr, fc = r - i, c - j
            ref = ((1 - fr) * (1 - fc) * feats[i, j] + (1 - fr) * fc * feats[i, j + 1]
                   + fr * (1 - fc) * feats[i + 1, j] + fr * fc * feats[i + 1, j + 1])
            np.testing.assert_allclose(out[n], ref, atol=1e-6)

    def test_behind(self):
        with pytest.raises(ValueError):
            pixel_query(np.zeros((4, 4, 1)), [0, 0, 1.0], INTR)


class TestPositionalEncoding:
    def test_identity(self, rng):
        v = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(positional_encoding(v, 0), v)

    def test_zero(self):
        e = positional_encoding(np.zeros((1, 2)), 3, include_input=False)
        np.testing.assert_array_equal(e[0, 0::4], 0)
        np.testing.assert_array_equal(e.reshape(3, 2, 2)[:, 1], 1)

    @given(st.integers(1, 5), st.integers(0, 6), st.booleans())
    def test_length(self, n, k, inc):
        e = positional_encoding(np.ones((2, n)), k, include_input=inc)
        assert e.shape == (2, n * 2 * k + (n if inc else 0)) == (2, field.encoding_size(n, k, inc))


class TestFieldEval:
    def test_zero_params(self, rng):
        fp = small_field()
        for v in fp.parameters().values():
            v[...] = 0
        rgb, sigma = field_eval(fp, inside_points(rng, 10))
        np.testing.assert_allclose(rgb, 0.5)
        np.testing.assert_allclose(sigma, np.log(2), atol=1e-15)

    def test_direction_ignored_when_off(self, rng):
        fp = small_field()
        x = inside_points(rng, 10)
        a = field_eval(fp, x, geometry.normalize(rng.normal(size=(10, 3))))
        b = field_eval(fp, x, geometry.normalize(rng.normal(size=(10, 3))))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    @pytest.mark.parametrize("mode", ["triplane", "pixel"])
    @pytest.mark.parametrize("flags", [{}, {"use_direction": True, "use_posenc": True}])
    def test_reference_forward(self, rng, mode, flags):
        fp = small_field(mode=mode, **flags)
        x = inside_points(rng, 40)
        d = geometry.normalize(rng.normal(size=(40, 3)))
        rgb, sigma = field_eval(fp, x, d)
        xt = geometry.contract(x, INTR, NEAR, FAR)
        feat = triplane_query(fp.triplane, xt) if mode == "triplane" else pixel_query(fp.payload, x, INTR)
        parts = [feat]
        if fp.use_posenc:
            parts.append(positional_encoding(xt, fp.pos_freqs))
        if fp.use_direction:
            parts.append(positional_encoding(d, fp.dir_freqs))
        h = np.maximum(np.concatenate(parts, 1) @ fp.mlp["W1"] + fp.mlp["b1"], 0)
        o = h @ fp.mlp["W2"] + fp.mlp["b2"]
        np.testing.assert_allclose(rgb, 1 / (1 + np.exp(-o[:, :3])), atol=1e-6)
        np.testing.assert_allclose(sigma, np.logaddexp(0, o[:, 3]), atol=1e-6)

    def test_ranges(self, rng):
        fp = small_field(feature_std=5.0)
        rgb, sigma = field_eval(fp, inside_points(rng, 200))
        assert np.all((rgb >= 0) & (rgb <= 1)) and np.all(sigma >= 0)

    def test_outside_frustum_is_empty(self):
        fp = small_field()
        rgb, sigma = field_eval(fp, [[0, 0, -0.5], [0, 0, -3.5], [5, 0, -2]])
        np.testing.assert_array_equal(sigma, 0)
        np.testing.assert_array_equal(rgb, 0)

    def test_non_finite_params(self, rng):
        fp = small_field()
        fp.mlp["b2"][0] = np.nan
        with pytest.raises(FloatingPointError):
            field_eval(fp, inside_points(rng, 2))

    def test_pixel_mode_constant_along_ray(self, rng):
        fp = small_field(mode="pixel")
        p = inside_points(rng, 1)[0]
        p = p * (1.8 / -p[2])
        pts = np.stack([p * s for s in (0.7, 1.0, 1.5)])
        rgb, sigma = field_eval(fp, pts)
        np.testing.assert_allclose(rgb, np.broadcast_to(rgb[0], rgb.shape), atol=1e-12)
        np.testing.assert_allclose(sigma, sigma[0], atol=1e-12)

    def test_shape_mismatch(self):
        fp = small_field()
        with pytest.raises(ValueError):
            FieldParams("triplane", fp.payload, {**fp.mlp, "W1": np.zeros((3, 8))}, INTR, NEAR, FAR)


class TestBackward:
    def test_zero_upstream(self, rng):
        fp = small_field()
        g = field_eval_backward(fp, inside_points(rng, 10), None, np.zeros((10, 4)))
        for v in g.values():
            np.testing.assert_array_equal(v, 0)

    def test_linear_hand_case(self):
        fp = small_field(hidden_activation="identity")
        fp.payload[...] = 0
        fp.payload[0] = 0.3  # only the xy plane is non-zero, and constant
        x = np.array([[0.1, -0.05, -1.7]])
        up = np.array([[0.2, -0.4, 0.7, 1.1]])
        g = field_eval_backward(fp, x, None, up)
        h = fp.payload[0, 0, 0] @ fp.mlp["W1"] + fp.mlp["b1"]
        o = h @ fp.mlp["W2"] + fp.mlp["b2"]
        y = 1 / (1 + np.exp(-o))
        d_out = np.concatenate([up[0, :3] * y[:3] * (1 - y[:3]), [up[0, 3] * y[3]]])
        per_cell = fp.mlp["W1"] @ (fp.mlp["W2"] @ d_out)
        xt = geometry.contract(x, INTR, NEAR, FAR)
        idx, w = field.triplane_taps(xt, 8)
        flat = g["triplane"].reshape(-1, 4)
        for k in range(12):
            np.testing.assert_allclose(flat[idx[0, k]], w[0, k] * per_cell, atol=1e-12)
        assert np.count_nonzero(np.abs(flat).sum(1)) <= 12

    @pytest.mark.parametrize("mode", ["triplane", "pixel"])
    @pytest.mark.parametrize("flags", [{}, {"use_direction": True, "use_posenc": True},
                                       {"hidden_activation": "identity"}])
    def test_finite_differences(self, rng, mode, flags):
        fp = small_field(mode=mode, **flags)
        x = inside_points(rng, 30)
        d = geometry.normalize(rng.normal(size=(30, 3)))
        up = rng.normal(size=(30, 4))
        g = field_eval_backward(fp, x, d, up)

        def loss():
            rgb, s = field_eval(fp, x, d)
            return float((up[:, :3] * rgb).sum() + (up[:, 3] * s).sum())

        h = 1e-4
        for name, arr in fp.parameters().items():
            flat = arr.reshape(-1)
            gi = g[name].reshape(-1)
            picks = rng.choice(flat.size, min(12, flat.size), replace=False)
            if name in ("triplane", "features"):
                picks = np.concatenate([picks, np.argsort(-np.abs(gi))[:8]])
            for k in picks:
                v = flat[k]
                flat[k] = v + h
                a = loss()
                flat[k] = v - h
                b = loss()
                flat[k] = v
                fd = (a - b) / (2 * h)
                assert abs(fd - gi[k]) <= 1e-5 * max(abs(fd), abs(gi[k]), 1e-3), (name, k)


def test_save_load_roundtrip(tmp_path, rng):
    fp = init_field(INTR, NEAR, FAR, 3, resolution=8, channels=4, hidden=8,
                    ref_pose=geometry.look_at([0, -2, 1], [0, 0, 0], [0, 0, 1]), use_direction=True)
    field.save_field(fp, tmp_path / "f.nfd")
    back = field.load_field(tmp_path / "f.nfd")
    assert back.ref_pose == fp.ref_pose and back.use_direction and back.intrinsics == fp.intrinsics
    for k, v in fp.parameters().items():
        np.testing.assert_array_equal(back.parameters()[k], v)
    x = inside_points(rng, 5)
    np.testing.assert_array_equal(field_eval(back, x)[1], field_eval(fp, x)[1])
