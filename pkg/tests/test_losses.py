import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layersplat.core import DEFAULT_SEG_COLORS, GaussianLayer
from layersplat.losses import (depth_distortion, depth_distortion_split,
                               normal_consistency, rgb_loss, segmentation_loss)
from layersplat.rasterizer import (IntersectionSet, RenderGrads, RenderOutput,
                                   render)

from conftest import random_camera, random_layer


def make_isect(rng, n_px, max_per):
    counts = rng.integers(0, max_per + 1, n_px)
    offsets = np.zeros(n_px + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    k = int(offsets[-1])
    om = rng.uniform(0.01, 0.5, k)
    z = rng.uniform(0.5, 3.0, k)
    for p in range(n_px):
        sl = slice(offsets[p], offsets[p + 1])
        z[sl] = np.sort(z[sl])
    nrm = rng.normal(0, 1, (k, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return IntersectionSet(offsets, np.arange(k, dtype=np.int64), om, z, nrm)


def out_for(isect, h, w, alpha=None):
    alpha = np.ones((h, w)) if alpha is None else alpha
    return RenderOutput(rgb=None, depth=np.zeros((h, w)), normal=np.zeros((h, w, 3)),
                        alpha=alpha, seg=None, intersections=isect)


class TestRgbLoss:
    def test_identical_images_zero(self, rng):
        x = rng.uniform(0, 1, (16, 16, 3))
        term = rgb_loss(x, x.copy(), lambda_c=0.2)
        assert term.value == pytest.approx(0.0, abs=1e-12)
        assert np.abs(term.grads.rgb).max() < 1e-12

    def test_pure_l1_constant_offset(self):
        a = np.full((16, 16, 3), 0.5)
        b = np.full((16, 16, 3), 0.4)
        term = rgb_loss(a, b, lambda_c=0.0)
        assert term.value == pytest.approx(0.1, abs=1e-12)

    def test_gradient_matches_fd(self, rng):
        x = rng.uniform(0.05, 0.95, (16, 16, 3))
        y = rng.uniform(0.05, 0.95, (16, 16, 3))
        term = rgb_loss(x, y, lambda_c=0.2)
        h = 1e-6
        for _ in range(30):
            i, j, c = rng.integers(16), rng.integers(16), rng.integers(3)
            xp, xm = x.copy(), x.copy()
            xp[i, j, c] += h
            xm[i, j, c] -= h
            fd = (rgb_loss(xp, y, lambda_c=0.2).value
                  - rgb_loss(xm, y, lambda_c=0.2).value) / (2 * h)
            an = term.grads.rgb[i, j, c]
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-9) <= 1e-4

    def test_masked(self, rng):
        x = rng.uniform(0, 1, (16, 16, 3))
        y = rng.uniform(0, 1, (16, 16, 3))
        mask = np.zeros((16, 16), dtype=bool)
        mask[4:12, 4:12] = True
        term = rgb_loss(x, y, mask=mask, lambda_c=0.0)
        expected = np.abs(x - y)[mask].mean()
        assert term.value == pytest.approx(expected, rel=1e-12)
        assert np.all(term.grads.rgb[~mask] == 0)

    def test_empty_mask_errors(self, rng):
        x = rng.uniform(0, 1, (16, 16, 3))
        with pytest.raises(ValueError, match="mask"):
            rgb_loss(x, x, mask=np.zeros((16, 16), dtype=bool))


class TestDepthDistortion:
    def test_single_intersection_pixels_zero(self, rng):
        isect = make_isect(rng, 8, 1)
        assert depth_distortion(out_for(isect, 2, 4)).value == 0.0

    def test_two_intersections_closed_form(self):
        isect = IntersectionSet(np.array([0, 2]), np.array([0, 1]),
                                np.array([0.5, 0.5]), np.array([1.0, 2.0]),
                                np.zeros((2, 3)))
        assert depth_distortion(out_for(isect, 1, 1)).value == pytest.approx(0.5)

    def test_matches_bruteforce_pairs(self, rng):
        isect = make_isect(rng, 12, 5)
        term = depth_distortion(out_for(isect, 3, 4))
        brute = 0.0
        for p in range(12):
            sl = slice(isect.offsets[p], isect.offsets[p + 1])
            om, z = isect.omega[sl], isect.z[sl]
            for i in range(len(om)):
                for j in range(len(om)):
                    if i < j:
                        brute += 2 * om[i] * om[j] * abs(z[i] - z[j])
        assert term.value == pytest.approx(brute, rel=1e-12)

    def test_gradients_match_fd(self, rng):
        isect = make_isect(rng, 6, 4)
        out = out_for(isect, 2, 3)
        term = depth_distortion(out)
        h = 1e-6
        for arr, g in ((isect.omega, term.grads.omega), (isect.z, term.grads.z)):
            for k in range(arr.size):
                orig = arr[k]
                arr[k] = orig + h
                vp = depth_distortion(out).value
                arr[k] = orig - h
                vm = depth_distortion(out).value
                arr[k] = orig
                fd = (vp - vm) / (2 * h)
                assert abs(fd - g[k]) / max(abs(fd), abs(g[k]), 1e-9) <= 1e-3

    @given(shift=st.floats(min_value=-5, max_value=5, allow_nan=False))
    @settings(max_examples=25, deadline=None)
    def test_translation_invariance(self, shift):
        rng = np.random.default_rng(0)
        isect = make_isect(rng, 6, 4)
        v0 = depth_distortion(out_for(isect, 2, 3)).value
        isect2 = IntersectionSet(isect.offsets, isect.gauss, isect.omega,
                                 isect.z + shift, isect.normal)
        v1 = depth_distortion(out_for(isect2, 2, 3)).value
        assert v1 == pytest.approx(v0, rel=1e-9, abs=1e-12)


class TestDepthDistortionSplit:
    def test_empty_occluded_equals_seen_restriction(self, rng):
        isect = make_isect(rng, 6, 4)
        out = out_for(isect, 2, 3)
        dummy = out_for(make_isect(rng, 6, 3), 2, 3)
        seen = np.ones((2, 3), dtype=bool)
        occ = np.zeros((2, 3), dtype=bool)
        term = depth_distortion_split(out, seen, occ, dummy)
        assert term.value == pytest.approx(depth_distortion(out).value)
        assert np.all(term.dummy_grads.omega == 0)

    def test_seen_empty_single_isect_dummy_zero(self, rng):
        isect = make_isect(rng, 6, 4)
        out = out_for(isect, 2, 3)
        dummy = out_for(make_isect(rng, 6, 1), 2, 3)  # <= 1 per pixel
        seen = np.zeros((2, 3), dtype=bool)
        occ = np.ones((2, 3), dtype=bool)
        term = depth_distortion_split(out, seen, occ, dummy)
        assert term.value == 0.0

    def test_partition_sums_regions(self, rng):
        isect = make_isect(rng, 2, 5)
        out = out_for(isect, 1, 2)
        disect = make_isect(rng, 2, 5)
        dummy = out_for(disect, 1, 2)
        seen = np.array([[True, False]])
        occ = np.array([[False, True]])
        term = depth_distortion_split(out, seen, occ, dummy)

        def brute(iset, pixels):
            total = 0.0
            for p in pixels:
                sl = slice(iset.offsets[p], iset.offsets[p + 1])
                om, z = iset.omega[sl], iset.z[sl]
                for i in range(len(om)):
                    for j in range(i + 1, len(om)):
                        total += 2 * om[i] * om[j] * abs(z[i] - z[j])
            return total

        assert term.value == pytest.approx(brute(isect, [0]) + brute(disect, [1]), rel=1e-12)

    def test_overlapping_masks_error(self, rng):
        isect = make_isect(rng, 6, 3)
        out = out_for(isect, 2, 3)
        m = np.ones((2, 3), dtype=bool)
        with pytest.raises(ValueError, match="disjoint"):
            depth_distortion_split(out, m, m, out)

    def test_shape_mismatch_error(self, rng):
        isect = make_isect(rng, 6, 3)
        out = out_for(isect, 2, 3)
        with pytest.raises(ValueError, match="shape"):
            depth_distortion_split(out, np.zeros((4, 4), dtype=bool),
                                   np.zeros((2, 3), dtype=bool), out)


class TestNormalConsistency:
    def _plane_scene(self, normal, simple_camera):
        from layersplat.quaternions import rotmat_to_quat
        n = np.asarray(normal, dtype=np.float64)
        n /= np.linalg.norm(n)
        t1 = np.cross(n, [0, 1, 0])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)
        frame = np.stack([t1, t2, n], axis=-1)
        layer = GaussianLayer("whole", np.zeros((1, 3)), rotmat_to_quat(frame)[None],
                              np.full((1, 2), 8.0), np.array([0.999]),
                              np.array([[1.0, 0, 0]]))
        return layer

    def test_frontoparallel_plane_zero(self, simple_camera):
        layer = self._plane_scene([0, 0, -1], simple_camera)
        out, _ = render([layer], simple_camera)
        term = normal_consistency(out, simple_camera)
        assert term.value <= 1e-6

    def test_flipped_normals_bound(self, simple_camera):
        layer = self._plane_scene([0, 0, -1], simple_camera)
        out, _ = render([layer], simple_camera)
        isect = out.intersections
        flipped = IntersectionSet(isect.offsets, isect.gauss, isect.omega,
                                  isect.z, -isect.normal)
        out2 = RenderOutput(out.rgb, out.depth, out.normal, out.alpha, None, flipped)
        term = normal_consistency(out2, simple_camera)
        # each valid record contributes 2*omega
        from layersplat.losses import NORMAL_ALPHA_MIN, _pixel_mask_to_records
        ok = out.alpha >= NORMAL_ALPHA_MIN
        valid = np.zeros_like(ok)
        valid[1:-1, 1:-1] = (ok[1:-1, 1:-1] & ok[1:-1, :-2] & ok[1:-1, 2:]
                             & ok[:-2, 1:-1] & ok[2:, 1:-1])
        rec = _pixel_mask_to_records(isect, valid)
        assert term.value == pytest.approx(2 * isect.omega[rec].sum(), rel=1e-6)

    def test_tilted_plane_normal_from_depth(self, rng):
        # N from depth matches the analytic plane normal away from edges.
        from layersplat.quaternions import rotmat_to_quat
        cam = random_camera(rng, width=48, height=48, distance=2.2)
        view_dir = -cam.center / np.linalg.norm(cam.center)
        n = view_dir + rng.normal(0, 0.25, 3)
        n /= np.linalg.norm(n)
        if n @ view_dir > 0:
            n = -n  # face the camera
        t1 = np.cross(n, [0, 1, 0])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)
        frame = np.stack([t1, t2, n], axis=-1)
        layer = GaussianLayer("whole", np.zeros((1, 3)), rotmat_to_quat(frame)[None],
                              np.full((1, 2), 10.0), np.array([0.999]),
                              np.array([[1.0, 0, 0]]))
        out, _ = render([layer], cam)
        from layersplat.losses import _backproject_dirs
        # reconstruct N at interior pixels and compare angles
        depth = out.depth
        dirs = _backproject_dirs(cam)
        P = depth[..., None] * dirs
        tx = P[:, 2:] - P[:, :-2]
        ty = P[2:] - P[:-2]
        c = np.cross(tx[1:-1], ty[:, 1:-1])
        ok = out.alpha[1:-1, 1:-1] > 0.9
        # exclude anything near the splat boundary
        interior = np.zeros_like(ok)
        interior[8:-8, 8:-8] = ok[8:-8, 8:-8]
        cn = c[interior]
        cn /= np.linalg.norm(cn, axis=1, keepdims=True)
        n_cam = cam.rotation @ n
        dots = np.abs(cn @ n_cam)
        angles = np.arccos(np.clip(dots, -1, 1))
        assert np.quantile(angles, 0.95) < 1e-3

    def test_gradients_match_fd(self, rng):
        layer = random_layer(6, rng, scale_range=(0.3, 0.6),
                             opacity_range=(0.5, 0.95))
        cam = random_camera(rng, width=20, height=20)
        out, _ = render([layer], cam)
        term = normal_consistency(out, cam)
        h = 1e-6
        # depth image gradient
        worst = 0.0
        for _ in range(40):
            i, j = rng.integers(20), rng.integers(20)
            dp, dm = out.depth.copy(), out.depth.copy()
            dp[i, j] += h
            dm[i, j] -= h
            op = RenderOutput(out.rgb, dp, out.normal, out.alpha, None, out.intersections)
            om = RenderOutput(out.rgb, dm, out.normal, out.alpha, None, out.intersections)
            fd = (normal_consistency(op, cam).value
                  - normal_consistency(om, cam).value) / (2 * h)
            an = term.grads.depth[i, j]
            if max(abs(fd), abs(an)) > 1e-8:
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
        assert worst <= 1e-3

    def test_orientation_flip_invariance(self, rng):
        # flipping both n_i and N leaves the loss unchanged; N is oriented
        # internally, so flipping the stored record normals plus rendering
        # geometry is covered by construction: check sign convention only.
        layer = random_layer(5, rng, scale_range=(0.3, 0.5), opacity_range=(0.6, 0.9))
        cam = random_camera(rng, width=20, height=20)
        out, _ = render([layer], cam)
        # stored normals face the camera
        dirs = cam.pixel_directions().reshape(-1, 3)
        isect = out.intersections
        lengths = np.diff(isect.offsets)
        d_per = np.repeat(dirs, lengths, axis=0)
        assert np.all((isect.normal * d_per).sum(1) <= 1e-12)


class TestSegmentationLoss:
    def test_exact_coloring_zero(self, rng):
        labels = rng.integers(0, 3, (8, 8))
        colors = DEFAULT_SEG_COLORS
        lut = np.stack([colors.v_bg, colors.v_body, colors.v_garment])
        seg = lut[labels]
        masks = {"body": labels == 1, "garment": labels == 2, "bg": labels == 0}
        term = segmentation_loss(seg, masks, colors)
        assert term.value == 0.0

    def test_single_pixel_closed_form(self):
        colors = DEFAULT_SEG_COLORS
        seg = np.zeros((1, 1, 3))
        seg[0, 0] = colors.v_garment  # body pixel rendered as garment
        masks = {"body": np.array([[True]]), "garment": np.array([[False]]),
                 "bg": np.array([[False]])}
        term = segmentation_loss(seg, masks, colors)
        assert term.value == pytest.approx(np.abs(colors.v_body - colors.v_garment).sum())

    def test_matches_naive_enumeration(self, rng):
        seg = rng.uniform(0, 1, (6, 7, 3))
        labels = rng.integers(0, 3, (6, 7))
        colors = DEFAULT_SEG_COLORS
        masks = {"body": labels == 1, "garment": labels == 2, "bg": labels == 0}
        term = segmentation_loss(seg, masks, colors)
        naive = 0.0
        lut = {0: colors.v_bg, 1: colors.v_body, 2: colors.v_garment}
        for i, j in itertools.product(range(6), range(7)):
            naive += np.abs(seg[i, j] - lut[labels[i, j]]).sum()
        assert term.value == pytest.approx(naive, rel=1e-12)

    def test_grad_is_sign(self, rng):
        seg = rng.uniform(0, 1, (4, 4, 3))
        labels = rng.integers(0, 3, (4, 4))
        colors = DEFAULT_SEG_COLORS
        masks = {"body": labels == 1, "garment": labels == 2, "bg": labels == 0}
        term = segmentation_loss(seg, masks, colors)
        lut = np.stack([colors.v_bg, colors.v_body, colors.v_garment])
        expected = np.sign(seg - lut[labels])
        assert np.array_equal(term.grads.seg, expected)

    def test_overlap_rejected(self, rng):
        seg = rng.uniform(0, 1, (4, 4, 3))
        m = np.ones((4, 4), dtype=bool)
        with pytest.raises(ValueError, match="overlap"):
            segmentation_loss(seg, {"body": m, "garment": m, "bg": ~m}, DEFAULT_SEG_COLORS)

    def test_coverage_required(self, rng):
        seg = rng.uniform(0, 1, (4, 4, 3))
        z = np.zeros((4, 4), dtype=bool)
        with pytest.raises(ValueError, match="cover"):
            segmentation_loss(seg, {"body": z, "garment": z, "bg": z}, DEFAULT_SEG_COLORS)

    @given(seed=st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=20, deadline=None)
    def test_zero_iff_exact(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 3, (5, 5))
        colors = DEFAULT_SEG_COLORS
        lut = np.stack([colors.v_bg, colors.v_body, colors.v_garment])
        seg = lut[labels].astype(np.float64)
        masks = {"body": labels == 1, "garment": labels == 2, "bg": labels == 0}
        assert segmentation_loss(seg, masks, colors).value == 0.0
        seg2 = seg.copy()
        i, j = rng.integers(5), rng.integers(5)
        seg2[i, j, rng.integers(3)] += 0.25
        assert segmentation_loss(seg2, masks, colors).value > 0.0
