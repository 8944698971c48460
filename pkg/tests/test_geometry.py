"""Rigid-transform algebra checked against brute-force 4x4 matrices.

The homogeneous-matrix route never touches the quaternion code, so the two
implementations fail independently.
"""

import math

import numpy as np
import pytest

from dualreg.geometry import (
    DegenerateQuaternionError,
    Quaternion,
    RigidTransform,
    apply_transform,
    compose,
    inverse,
    quat_normalize,
    quat_to_matrix,
    random_transform,
    residual_transform,
)

from conftest import random_cloud


def matrix4(transform: RigidTransform) -> np.ndarray:
    return transform.as_matrix4()


def transform_from_rng(rng, max_angle=170.0, max_translation=2.0) -> RigidTransform:
    return random_transform(rng, max_angle=max_angle, max_translation=max_translation)


class TestQuaternion:
    def test_identity(self):
        q = Quaternion.identity()
        assert np.allclose(q.to_matrix(), np.eye(3))
        assert q.angle_deg() == 0.0

    def test_axis_angle_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            axis = rng.normal(size=3)
            angle = rng.uniform(0.0, math.pi)
            q = Quaternion.from_axis_angle(axis, angle)
            assert q.angle_deg() == pytest.approx(math.degrees(angle), abs=1e-9)

    def test_zero_axis_rejected(self):
        with pytest.raises(ValueError):
            Quaternion.from_axis_angle([0.0, 0.0, 0.0], 1.0)

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            q = transform_from_rng(rng).rotation
            q2 = Quaternion.from_matrix(q.to_matrix())
            assert np.allclose(q.as_array(), q2.as_array(), atol=1e-9)

    def test_matrix_round_trip_near_180(self):
        # Shepperd branches: w is tiny here, the naive trace formula loses it.
        for axis in ([1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1], [1, -2, 0.5]):
            q = Quaternion.from_axis_angle(axis, math.radians(179.9))
            q2 = Quaternion.from_matrix(q.to_matrix())
            assert np.allclose(q.to_matrix(), q2.to_matrix(), atol=1e-9)

    def test_canonical_hemisphere(self):
        q = Quaternion(-0.5, 0.5, 0.5, 0.5).normalized()
        assert q.w >= 0.0
        # q and -q describe the same rotation
        m1 = Quaternion(0.5, 0.5, 0.5, 0.5).to_matrix()
        m2 = Quaternion(-0.5, -0.5, -0.5, -0.5).to_matrix()
        assert np.allclose(m1, m2)

    def test_normalize_zero_raises(self):
        with pytest.raises(DegenerateQuaternionError):
            quat_normalize(Quaternion(0.0, 0.0, 0.0, 0.0))
        with pytest.raises(DegenerateQuaternionError):
            Quaternion(1e-13, 0.0, 0.0, 0.0).normalized()

    def test_to_matrix_requires_unit_norm(self):
        with pytest.raises(ValueError):
            Quaternion(2.0, 0.0, 0.0, 0.0).to_matrix()

    def test_product_matches_matrix_product(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a = transform_from_rng(rng).rotation
            b = transform_from_rng(rng).rotation
            assert np.allclose((a * b).normalized().to_matrix(), a.to_matrix() @ b.to_matrix(), atol=1e-12)

    def test_from_array_validates(self):
        with pytest.raises(ValueError):
            Quaternion.from_array([1.0, 0.0, 0.0])

    def test_quat_to_matrix_is_rotation(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            m = quat_to_matrix(transform_from_rng(rng).rotation)
            assert np.allclose(m @ m.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-12)


class TestRigidTransform:
    def test_identity_apply(self):
        pts = random_cloud(np.random.default_rng(0))
        assert np.array_equal(RigidTransform.identity().apply(pts), pts)

    def test_apply_matches_homogeneous(self):
        rng = np.random.default_rng(19)
        for _ in range(50):
            t = transform_from_rng(rng)
            pts = random_cloud(rng, 16)
            hom = np.concatenate([pts, np.ones((16, 1))], axis=1)
            expected = (matrix4(t) @ hom.T).T[:, :3]
            assert np.allclose(t.apply(pts), expected, atol=1e-12)

    def test_compose_matches_matrix_product(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            a, b = transform_from_rng(rng), transform_from_rng(rng)
            assert np.allclose(matrix4(compose(a, b)), matrix4(a) @ matrix4(b), atol=1e-9)

    def test_compose_application_order(self):
        rng = np.random.default_rng(29)
        a, b = transform_from_rng(rng), transform_from_rng(rng)
        pts = random_cloud(rng)
        assert np.allclose(compose(a, b).apply(pts), a.apply(b.apply(pts)), atol=1e-9)

    def test_inverse_matches_matrix_inverse(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            t = transform_from_rng(rng)
            assert np.allclose(matrix4(inverse(t)), np.linalg.inv(matrix4(t)), atol=1e-9)

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(37)
        t = transform_from_rng(rng)
        assert compose(t, t.inverse()).isclose(RigidTransform.identity(), atol=1e-9)
        assert compose(t.inverse(), t).isclose(RigidTransform.identity(), atol=1e-9)

    def test_from_matrix4_round_trip(self):
        rng = np.random.default_rng(41)
        for _ in range(50):
            t = transform_from_rng(rng)
            t2 = RigidTransform.from_matrix4(matrix4(t))
            assert t.isclose(t2, atol=1e-9)

    def test_from_matrix4_validates_shape(self):
        with pytest.raises(ValueError):
            RigidTransform.from_matrix4(np.eye(3))

    def test_apply_transform_alias(self):
        rng = np.random.default_rng(43)
        t = transform_from_rng(rng)
        pts = random_cloud(rng)
        assert np.array_equal(apply_transform(t, pts), t.apply(pts))


class TestResidual:
    def test_residual_closes_to_gt(self):
        rng = np.random.default_rng(47)
        for _ in range(100):
            gt, acc = transform_from_rng(rng), transform_from_rng(rng)
            res = residual_transform(gt, acc)
            assert compose(res, acc).isclose(gt, atol=1e-9)

    def test_residual_identity_when_done(self):
        rng = np.random.default_rng(53)
        gt = transform_from_rng(rng)
        assert residual_transform(gt, gt).isclose(RigidTransform.identity(), atol=1e-9)

    def test_residual_is_gt_at_start(self):
        rng = np.random.default_rng(59)
        gt = transform_from_rng(rng)
        assert residual_transform(gt, RigidTransform.identity()).isclose(gt, atol=1e-12)


class TestRandomTransform:
    def test_bounds(self):
        rng = np.random.default_rng(61)
        for _ in range(200):
            t = random_transform(rng, max_angle=45.0, max_translation=0.5)
            assert t.rotation.angle_deg() <= 45.0 + 1e-9
            assert np.all(np.abs(t.translation) <= 0.5)

    def test_determinism(self):
        a = random_transform(np.random.default_rng(123))
        b = random_transform(np.random.default_rng(123))
        assert np.array_equal(a.rotation.as_array(), b.rotation.as_array())
        assert np.array_equal(a.translation, b.translation)

    def test_parameter_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            random_transform(rng, max_angle=0.0)
        with pytest.raises(ValueError):
            random_transform(rng, max_angle=181.0)
        with pytest.raises(ValueError):
            random_transform(rng, max_translation=0.0)


def test_oracle_suite_small():
    # Smaller sibling of the acceptance criterion: every op against the 4x4
    # homogeneous route, one shared rng.
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        a = transform_from_rng(rng)
        b = transform_from_rng(rng)
        pts = random_cloud(rng, 8)
        hom = np.concatenate([pts, np.ones((8, 1))], axis=1)

        worst = max(worst, np.abs(matrix4(compose(a, b)) - matrix4(a) @ matrix4(b)).max())
        worst = max(worst, np.abs(a.apply(pts) - (matrix4(a) @ hom.T).T[:, :3]).max())
        worst = max(worst, np.abs(matrix4(inverse(a)) - np.linalg.inv(matrix4(a))).max())
        worst = max(
            worst,
            np.abs(matrix4(residual_transform(a, b)) - matrix4(a) @ np.linalg.inv(matrix4(b))).max(),
        )
    assert worst < 1e-6
