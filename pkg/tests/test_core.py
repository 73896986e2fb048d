import numpy as np
import pytest

from layersplat.core import (Camera, GaussianLayer, SegColors, SkinnedTemplate,
                             sample_layer_from_mesh, validate_layer)
from layersplat.quaternions import (axis_angle_to_rotmat, normalize_quat,
                                    quat_multiply, quat_to_rotmat,
                                    rotmat_to_quat)

from conftest import random_layer


class TestQuaternions:
    def test_rotmat_round_trip(self, rng):
        q = normalize_quat(rng.normal(0, 1, (200, 4)))
        R = quat_to_rotmat(q)
        q2 = rotmat_to_quat(R)
        # identical up to sign
        flip = np.sign(np.sum(q * q2, axis=1))[:, None]
        assert np.allclose(q * flip, q2, atol=1e-9)

    def test_rotmat_orthonormal(self, rng):
        q = rng.normal(0, 1, (50, 4))  # unnormalized inputs accepted
        R = quat_to_rotmat(q)
        eye = np.einsum("nij,nik->njk", R, R)
        assert np.allclose(eye, np.eye(3), atol=1e-12)

    def test_multiply_matches_rotation_composition(self, rng):
        a = normalize_quat(rng.normal(0, 1, (20, 4)))
        b = normalize_quat(rng.normal(0, 1, (20, 4)))
        Rab = quat_to_rotmat(quat_multiply(a, b))
        assert np.allclose(Rab, quat_to_rotmat(a) @ quat_to_rotmat(b), atol=1e-12)

    def test_axis_angle(self):
        R = axis_angle_to_rotmat(np.array([0.0, 0.0, np.pi / 2]))
        assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


class TestCamera:
    def test_rejects_non_orthonormal(self):
        R = np.eye(3)
        R[0, 1] = 1e-2
        with pytest.raises(ValueError, match="orthonormal"):
            Camera(100, 100, 32, 32, 64, 64, R, np.zeros(3))

    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError):
            Camera(-1, 100, 32, 32, 64, 64, np.eye(3), np.zeros(3))

    def test_project_ray_consistency(self, rng, simple_camera):
        cam = simple_camera
        dirs = cam.pixel_directions()
        pts = cam.center + 2.0 * dirs[10, 7]
        pix, z = cam.project(pts[None])
        assert np.allclose(pix[0], [7.5, 10.5], atol=1e-6)
        assert z[0] > 0


class TestSegColors:
    def test_distinctness_enforced(self):
        with pytest.raises(ValueError):
            SegColors(np.array([1, 0, 0]), np.array([0.8, 0.3, 0.2]), np.zeros(3))


class TestValidateLayer:
    def test_valid_layer_empty_report(self, rng):
        layer = random_layer(50, rng)
        assert validate_layer(layer) == []

    def test_zero_scale_flagged(self, rng):
        layer = random_layer(10, rng)
        layer.s[3, 0] = 0.0
        vs = validate_layer(layer)
        assert len(vs) == 1 and vs[0].index == 3 and vs[0].field == "s"

    def test_unnormalized_quaternion_flagged(self, rng):
        layer = random_layer(10, rng)
        layer.q[7] *= 2.0
        vs = validate_layer(layer)
        assert len(vs) == 1 and vs[0].index == 7 and vs[0].field == "q"

    def test_opacity_and_color_bounds(self, rng):
        layer = random_layer(5, rng)
        layer.opacity[0] = 1.5
        layer.color[2, 1] = -0.1
        fields = {(v.index, v.field) for v in validate_layer(layer)}
        assert fields == {(0, "opacity"), (2, "color")}


class TestSampling:
    def test_deterministic_per_seed(self, small_humanoid):
        a = sample_layer_from_mesh(small_humanoid, 500, seed=7)
        b = sample_layer_from_mesh(small_humanoid, 500, seed=7)
        for name in ("mu", "q", "s", "opacity", "color"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        c = sample_layer_from_mesh(small_humanoid, 500, seed=8)
        assert not np.array_equal(a.mu, c.mu)

    def test_single_triangle(self):
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        faces = np.array([[0, 1, 2]])
        layer = sample_layer_from_mesh((verts, faces), 1, seed=0)
        mu = layer.mu[0]
        assert abs(mu[2]) < 1e-12 and mu[0] >= 0 and mu[1] >= 0 and mu[0] + mu[1] <= 1
        assert np.allclose(np.abs(layer.gaussian(0).normal), [0, 0, 1], atol=1e-12)

    def test_area_weighted_face_ratio(self):
        # Unit square from two equal-area triangles: hit ratio 0.5 +- 0.02.
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
        faces = np.array([[0, 1, 2], [0, 2, 3]])
        from layersplat.core import sample_mesh_surface
        rng = np.random.default_rng(42)
        _, fidx, _ = sample_mesh_surface(verts, faces, 10000, rng)
        ratio = (fidx == 0).mean()
        assert abs(ratio - 0.5) <= 0.02

    def test_area_weighting_uneven(self):
        # 3:1 area ratio.
        verts = np.array([[0.0, 0, 0], [3, 0, 0], [0, 2, 0], [-1, 0, 0], [0, -1, 0]])
        faces = np.array([[0, 1, 2], [0, 3, 4]])
        from layersplat.core import sample_mesh_surface
        rng = np.random.default_rng(0)
        _, fidx, _ = sample_mesh_surface(verts, faces, 20000, rng)
        assert abs((fidx == 0).mean() - 3.0 / 3.5) < 0.02

    def test_samples_lie_on_face_planes(self, small_humanoid, rng):
        layer = sample_layer_from_mesh(small_humanoid, 2000, seed=3)
        from layersplat.core import sample_mesh_surface
        pts, fidx, frames = sample_mesh_surface(small_humanoid.vertices,
                                                small_humanoid.faces, 2000,
                                                np.random.default_rng(3))
        v0 = small_humanoid.vertices[small_humanoid.faces[fidx, 0]]
        d = np.abs(np.einsum("ij,ij->i", pts - v0, frames[:, :, 2]))
        assert d.max() < 1e-9

    def test_degenerate_mesh_errors(self):
        verts = np.zeros((3, 3))
        faces = np.array([[0, 1, 2]])
        with pytest.raises(ValueError, match="area"):
            sample_layer_from_mesh((verts, faces), 10)

    def test_humanoid_layer_counts_and_validity(self, small_humanoid):
        layer = sample_layer_from_mesh(small_humanoid, 3000, seed=0)
        assert layer.n == 3000
        assert validate_layer(layer) == []
        assert np.all(layer.opacity == 0.5)
        assert np.all(layer.color == 0.5)


class TestSkinnedTemplate:
    def test_weight_rows_validated(self, small_humanoid):
        w = small_humanoid.weights.copy()
        w[0] *= 1.5
        with pytest.raises(ValueError, match="sum to 1"):
            SkinnedTemplate(small_humanoid.vertices, small_humanoid.faces,
                            small_humanoid.joint_positions,
                            small_humanoid.joint_parents, w)

    def test_tree_validated(self, small_humanoid):
        parents = small_humanoid.joint_parents.copy()
        parents[3] = 3  # self-loop
        with pytest.raises(ValueError, match="tree"):
            SkinnedTemplate(small_humanoid.vertices, small_humanoid.faces,
                            small_humanoid.joint_positions, parents,
                            small_humanoid.weights)

    def test_theta_length(self, small_humanoid):
        assert small_humanoid.theta.shape == (48,)

    def test_any_joint_count_allowed(self):
        # Minimal 2-joint chain template.
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        faces = np.array([[0, 1, 2]])
        t = SkinnedTemplate(verts, faces, np.array([[0.0, 0, 0], [1, 0, 0]]),
                            np.array([-1, 0]),
                            np.array([[1.0, 0], [0.5, 0.5], [1.0, 0]]))
        assert t.n_joints == 2 and t.theta.shape == (6,)
