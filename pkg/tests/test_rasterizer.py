import numpy as np
import pytest

from layersplat.core import Gaussian2D, GaussianLayer, DEFAULT_SEG_COLORS
from layersplat.rasterizer import (CUTOFF, RenderGrads, StaleContextError,
                                   backward, intersect, render,
                                   render_reference)

from conftest import random_camera, random_layer


def _center_splat(normal_axis="z", s=(1.0, 1.0), opacity=0.999, color=(1, 0, 0)):
    return Gaussian2D(mu=np.zeros(3), q=np.array([1.0, 0, 0, 0]),
                      s=np.array(s), opacity=opacity, color=np.array(color))


class TestIntersect:
    def test_center_hit(self):
        g = _center_splat()
        res = intersect(g, origin=[0, 0, -1], direction=[0, 0, 1])
        assert res is not None
        u, v, z, gv = res
        assert (u, v) == (0.0, 0.0)
        assert z == pytest.approx(1.0)
        assert gv == pytest.approx(1.0)

    def test_one_sigma_offset(self):
        g = _center_splat()
        res = intersect(g, origin=[1.0, 0, -1], direction=[0, 0, 1])
        u, v, z, gv = res
        assert gv == pytest.approx(np.exp(-0.5), rel=1e-12)
        assert abs(u) == pytest.approx(1.0)

    def test_parallel_ray_misses(self):
        g = _center_splat()
        assert intersect(g, origin=[0, 0, -1], direction=[1, 0, 0]) is None

    def test_behind_near_plane(self):
        g = _center_splat()
        assert intersect(g, origin=[0, 0, 1], direction=[0, 0, 1]) is None

    def test_cutoff(self):
        g = _center_splat()
        # 4 sigma out: below the 3-sigma cutoff.
        assert intersect(g, origin=[4.0, 0, -1], direction=[0, 0, 1]) is None

    def test_depth_round_trip_random(self, rng):
        # Substituting the returned z back into the ray reproduces a point
        # on the splat plane.
        from layersplat.quaternions import normalize_quat, quat_to_rotmat
        for _ in range(200):
            g = Gaussian2D(mu=rng.normal(0, 1, 3),
                           q=normalize_quat(rng.normal(0, 1, 4)),
                           s=rng.uniform(0.5, 2.0, 2),
                           opacity=0.5, color=np.zeros(3))
            origin = rng.normal(0, 3, 3)
            direction = rng.normal(0, 1, 3)
            direction /= np.linalg.norm(direction)
            res = intersect(g, origin, direction, cutoff=0.0)
            if res is None:
                continue
            u, v, z, gv = res
            point = origin + z * direction
            n = quat_to_rotmat(g.q)[:, 2]
            assert abs((point - g.mu) @ n) < 1e-9


class TestRenderBasics:
    def test_single_opaque_splat(self, simple_camera):
        layer = GaussianLayer("whole", np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]),
                              np.full((1, 2), 5.0), np.array([0.999]),
                              np.array([[1.0, 0, 0]]))
        out, _ = render([layer], simple_camera)
        cy, cx = 16, 16
        assert out.rgb[cy, cx, 0] == pytest.approx(0.999, abs=1e-3)
        assert out.alpha[cy, cx] == pytest.approx(0.999, abs=1e-3)
        assert out.depth[cy, cx] == pytest.approx(2.5, abs=1e-2)

    def test_two_splat_blend_closed_form(self, simple_camera):
        # front: opacity 0.6 gray 0.2; back: ~1.0 white -> 0.6*0.2+0.4*1.0
        mu = np.array([[0, 0, 0.0], [0, 0, 0.5]])
        q = np.tile([1.0, 0, 0, 0], (2, 1))
        s = np.full((2, 2), 8.0)
        layer = GaussianLayer("whole", mu, q, s, np.array([0.6, 0.9999]),
                              np.array([[0.2, 0.2, 0.2], [1.0, 1.0, 1.0]]))
        out, _ = render([layer], simple_camera)
        expected = 0.6 * 0.2 + 0.4 * 1.0
        assert out.rgb[16, 16, 0] == pytest.approx(expected, abs=2e-3)

    def test_background_composites(self, simple_camera, rng):
        layer = random_layer(5, rng)
        bg = np.array([0.1, 0.5, 0.9])
        out, _ = render([layer], simple_camera, background=bg)
        empty = out.alpha == 0
        assert empty.any()
        assert np.allclose(out.rgb[empty], bg)

    def test_empty_layers_error(self, simple_camera):
        with pytest.raises(ValueError, match="nonempty"):
            render([], simple_camera)

    def test_seg_mode_overrides_colors(self, simple_camera, rng):
        body = random_layer(10, rng, label="body")
        garment = random_layer(10, rng, label="garment")
        out, _ = render([body, garment], simple_camera, mode="seg",
                        seg_colors=DEFAULT_SEG_COLORS)
        assert out.seg is not None and out.rgb is None
        # covered pixels mix only red (body) and green (garment); blue stays 0
        assert np.all(out.seg[..., 2] < 1e-9)

    def test_invariants_alpha_and_sorting(self, rng):
        for trial in range(5):
            layer = random_layer(40, rng)
            cam = random_camera(rng)
            out, _ = render([layer], cam)
            isect = out.intersections
            assert out.alpha.max() <= 1.0 + 1e-6
            # per pixel: sum omega == alpha; z ascending; omega > 0
            lengths = np.diff(isect.offsets)
            assert np.all(isect.omega > 0)
            flat_alpha = out.alpha.ravel()
            for p in np.nonzero(lengths)[0][:200]:
                sl = slice(isect.offsets[p], isect.offsets[p + 1])
                assert np.sum(isect.omega[sl]) == pytest.approx(flat_alpha[p], abs=1e-12)
                assert np.all(np.diff(isect.z[sl]) >= 0)


class TestOracleEquivalence:
    @pytest.mark.parametrize("mode", ["rgb", "rgb+seg"])
    def test_matches_reference_random_scenes(self, rng, mode):
        for trial in range(10):
            layers = [random_layer(rng.integers(1, 40), rng, label="body"),
                      random_layer(rng.integers(1, 40), rng, label="garment")]
            cam = random_camera(rng)
            kw = dict(mode=mode, seg_colors=DEFAULT_SEG_COLORS if "seg" in mode else None,
                      background=rng.uniform(0, 1, 3))
            out, _ = render(layers, cam, **kw)
            ref = render_reference(layers, cam, **kw)
            for name in ("rgb", "depth", "normal", "alpha", "seg"):
                a, b = getattr(out, name), getattr(ref, name)
                if a is None:
                    assert b is None
                    continue
                assert np.abs(a - b).max() < 1e-5

    def test_record_structure_matches(self, rng):
        layer = random_layer(30, rng)
        cam = random_camera(rng)
        out, _ = render([layer], cam)
        ref = render_reference([layer], cam)
        assert np.array_equal(out.intersections.offsets, ref.intersections.offsets)
        assert np.array_equal(out.intersections.gauss, ref.intersections.gauss)
        assert np.abs(out.intersections.omega - ref.intersections.omega).max() < 1e-12

    def test_permutation_invariance(self, rng):
        layer = random_layer(25, rng)
        cam = random_camera(rng)
        out1, _ = render([layer], cam)
        perm = rng.permutation(25)
        shuffled = GaussianLayer("whole", layer.mu[perm], layer.q[perm],
                                 layer.s[perm], layer.opacity[perm],
                                 layer.color[perm])
        out2, _ = render([shuffled], cam)
        assert np.abs(out1.rgb - out2.rgb).max() < 1e-9
        assert np.abs(out1.depth - out2.depth).max() < 1e-9

    def test_reference_empty_pixels(self, rng, simple_camera):
        layer = random_layer(3, rng, spread=0.05)
        ref = render_reference([layer], simple_camera, background=np.array([0.3, 0.3, 0.3]))
        empty = ref.alpha == 0
        assert empty.any()
        assert np.allclose(ref.rgb[empty], 0.3)


class TestContext:
    def test_stale_context_rejected(self, rng, simple_camera):
        layer = random_layer(5, rng)
        out, ctx = render([layer], simple_camera)
        layer.bump_version()
        with pytest.raises(StaleContextError):
            backward(ctx, RenderGrads(rgb=np.zeros((32, 32, 3))))

    def test_no_records_context_rejected(self, rng, simple_camera):
        layer = random_layer(5, rng)
        out, ctx = render([layer], simple_camera, keep_records=False)
        with pytest.raises(ValueError, match="keep_records"):
            backward(ctx, RenderGrads(rgb=np.zeros((32, 32, 3))))
