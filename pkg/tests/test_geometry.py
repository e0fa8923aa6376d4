import math

import numpy as np
import pytest

from agrinav.geometry import (
    DegenerateGeometryError,
    GeodeticPoint,
    RigidTransform3,
    Rotation3,
    SimilarityTransform,
    WGS84_A,
    WGS84_B,
    ecef_to_geodetic,
    enu_to_geodetic,
    geodetic_to_ecef,
    geodetic_to_enu,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
    umeyama_align,
)


def random_rotation(rng) -> Rotation3:
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0.0, math.pi - 1e-3)
    return so3_exp(w)


class TestSo3:
    def test_exp_zero_is_identity(self):
        assert np.allclose(so3_exp([0.0, 0.0, 0.0]).matrix, np.eye(3))

    def test_exp_half_turn_about_z(self):
        r = so3_exp([0.0, 0.0, math.pi])
        assert np.allclose(r.matrix, np.diag([-1.0, -1.0, 1.0]), atol=1e-12)

    def test_log_identity(self):
        assert np.allclose(so3_log(Rotation3.identity()), 0.0)

    def test_log_half_turn_sign_convention(self):
        w = so3_log(Rotation3(np.diag([-1.0, -1.0, 1.0])))
        assert np.allclose(w, [0.0, 0.0, math.pi], atol=1e-9)

    def test_exp_log_round_trip_1000_draws(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            w = rng.normal(size=3)
            w = w / np.linalg.norm(w) * rng.uniform(0.0, math.pi - 1e-6)
            assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-9)

    def test_log_exp_round_trip_random_rotations(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            r = random_rotation(rng)
            assert np.allclose(so3_exp(so3_log(r)).matrix, r.matrix, atol=1e-9)

    def test_small_angle_branch(self):
        w = np.array([1e-8, -2e-8, 3e-9])
        assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-15)

    def test_rotation_preserves_norm(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            r = random_rotation(rng)
            v = rng.normal(size=3)
            assert abs(np.linalg.norm(r.apply(v)) - np.linalg.norm(v)) < 1e-9

    def test_orthonormality_invariant(self):
        rng = np.random.default_rng(3)
        r = random_rotation(rng)
        m = r.matrix
        assert np.linalg.norm(m.T @ m - np.eye(3)) < 1e-9
        assert abs(np.linalg.det(m) - 1.0) < 1e-9

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(4)
        r = random_rotation(rng)
        assert np.allclose((r @ r.inverse()).matrix, np.eye(3), atol=1e-9)

    def test_right_jacobian_first_order(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=3)
        d = 1e-6 * rng.normal(size=3)
        lhs = so3_exp(w + d).matrix
        rhs = (so3_exp(w) @ so3_exp(so3_right_jacobian(w) @ d)).matrix
        assert np.allclose(lhs, rhs, atol=1e-11)

    def test_right_jacobian_inverse(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            w = rng.normal(size=3)
            assert np.allclose(
                so3_right_jacobian(w) @ so3_right_jacobian_inv(w), np.eye(3), atol=1e-9
            )


class TestSkew:
    def test_zero(self):
        assert np.allclose(skew([0.0, 0.0, 0.0]), 0.0)

    def test_unit_cross(self):
        assert np.allclose(skew([1.0, 0.0, 0.0]) @ [0.0, 1.0, 0.0], [0.0, 0.0, 1.0])

    def test_matches_cross_product(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            v, w = rng.normal(size=3), rng.normal(size=3)
            assert np.allclose(skew(v) @ w, np.cross(v, w), atol=1e-12)
            assert np.allclose(skew(v).T, -skew(v))


class TestRigidTransform:
    def test_group_laws(self):
        rng = np.random.default_rng(8)
        ts = [
            RigidTransform3(random_rotation(rng), rng.normal(size=3)) for _ in range(3)
        ]
        a, b, c = ts
        lhs = (a @ b) @ c
        rhs = a @ (b @ c)
        assert np.allclose(lhs.rotation.matrix, rhs.rotation.matrix, atol=1e-9)
        assert np.allclose(lhs.translation, rhs.translation, atol=1e-9)
        ident = a @ a.inverse()
        assert np.allclose(ident.rotation.matrix, np.eye(3), atol=1e-9)
        assert np.allclose(ident.translation, 0.0, atol=1e-9)
        ident2 = a.inverse() @ a
        assert np.allclose(ident2.rotation.matrix, np.eye(3), atol=1e-9)
        assert np.allclose(ident2.translation, 0.0, atol=1e-9)
        e = RigidTransform3.identity()
        same = e @ a
        assert np.allclose(same.rotation.matrix, a.rotation.matrix)
        assert np.allclose(same.translation, a.translation)

    def test_apply_matches_compose(self):
        rng = np.random.default_rng(9)
        t = RigidTransform3(random_rotation(rng), rng.normal(size=3))
        p = rng.normal(size=3)
        assert np.allclose(t.apply(p), t.rotation.apply(p) + t.translation)


class TestQuaternion:
    def test_round_trip(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            r = random_rotation(rng)
            q = r.to_quaternion()
            assert np.allclose(Rotation3.from_quaternion(*q).matrix, r.matrix, atol=1e-12)


class TestUmeyama:
    def test_identity_on_equal_clouds(self):
        rng = np.random.default_rng(11)
        pts = rng.normal(size=(10, 3))
        t = umeyama_align(pts, pts)
        assert abs(t.scale - 1.0) < 1e-12
        assert np.allclose(t.rotation.matrix, np.eye(3), atol=1e-9)
        assert np.allclose(t.translation, 0.0, atol=1e-9)

    @pytest.mark.parametrize("with_scale", [False, True])
    def test_recovers_constructed_transform(self, with_scale):
        rng = np.random.default_rng(12)
        for _ in range(20):
            src = rng.normal(size=(15, 3))
            rot = random_rotation(rng)
            scale = rng.uniform(0.5, 2.0) if with_scale else 1.0
            trans = rng.normal(size=3)
            tgt = scale * src @ rot.matrix.T + trans
            est = umeyama_align(src, tgt, with_scale=with_scale)
            assert abs(est.scale - scale) < 1e-9
            assert np.allclose(est.rotation.matrix, rot.matrix, atol=1e-9)
            assert np.allclose(est.translation, trans, atol=1e-9)

    def test_collinear_points_raise(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateGeometryError):
            umeyama_align(line, line + 1.0)

    def test_too_few_points_raise(self):
        with pytest.raises(DegenerateGeometryError):
            umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_beats_random_transforms(self):
        rng = np.random.default_rng(13)
        src = rng.normal(size=(20, 3))
        tgt = src @ random_rotation(rng).matrix.T + rng.normal(size=3)
        tgt = tgt + 0.05 * rng.normal(size=tgt.shape)
        est = umeyama_align(src, tgt)
        best = float(np.sum((tgt - est.apply(src)) ** 2))
        for _ in range(100):
            cand = SimilarityTransform(1.0, random_rotation(rng), rng.normal(size=3))
            assert best <= float(np.sum((tgt - cand.apply(src)) ** 2)) + 1e-12


class TestGeodetic:
    def test_equator_prime_meridian(self):
        p = GeodeticPoint(0.0, 0.0, 0.0)
        assert np.allclose(geodetic_to_ecef(p), [WGS84_A, 0.0, 0.0], atol=1e-9)

    def test_north_pole(self):
        p = GeodeticPoint(90.0, 0.0, 0.0)
        xyz = geodetic_to_ecef(p)
        assert np.allclose(xyz, [0.0, 0.0, WGS84_B], atol=1e-6)
        assert abs(WGS84_B - 6356752.314245) < 1e-6

    def test_ecef_round_trip_1000_points(self):
        rng = np.random.default_rng(14)
        for _ in range(1000):
            p = GeodeticPoint(
                rng.uniform(-89.9, 89.9), rng.uniform(-179.9, 180.0), rng.uniform(-100, 9000)
            )
            xyz = geodetic_to_ecef(p)
            back = ecef_to_geodetic(xyz)
            assert np.linalg.norm(geodetic_to_ecef(back) - xyz) < 1e-6

    def test_enu_at_anchor_is_zero(self):
        p = GeodeticPoint(-33.0, -60.9, 25.0)
        assert np.allclose(geodetic_to_enu(p, p), 0.0, atol=1e-9)

    def test_pure_up_displacement(self):
        anchor = GeodeticPoint(-33.0, -60.9, 25.0)
        p = GeodeticPoint(-33.0, -60.9, 35.0)
        assert np.allclose(geodetic_to_enu(p, anchor), [0.0, 0.0, 10.0], atol=1e-9)

    def test_flat_earth_approximation_small_offsets(self):
        anchor = GeodeticPoint(-33.0, -60.9, 25.0)
        lat0 = math.radians(anchor.latitude)
        sin_lat = math.sin(lat0)
        w = 1.0 - 0.00669437999014 * sin_lat * sin_lat
        n_rad = WGS84_A / math.sqrt(w)
        m_rad = WGS84_A * (1.0 - 0.00669437999014) / w**1.5
        rng = np.random.default_rng(15)
        for _ in range(50):
            offset = rng.uniform(-1.0, 1.0, size=3)
            offset *= 100.0 * rng.uniform(0.2, 1.0) / np.linalg.norm(offset)
            de, dn, du = offset
            p = GeodeticPoint(
                anchor.latitude + math.degrees(dn / (m_rad + anchor.altitude)),
                anchor.longitude + math.degrees(de / ((n_rad + anchor.altitude) * math.cos(lat0))),
                anchor.altitude + du,
            )
            enu = geodetic_to_enu(p, anchor)
            assert np.linalg.norm(enu - [de, dn, du]) < 1e-3

    def test_enu_round_trip(self):
        anchor = GeodeticPoint(-33.0, -60.9, 25.0)
        rng = np.random.default_rng(16)
        for _ in range(200):
            enu = rng.uniform(-500, 500, size=3)
            p = enu_to_geodetic(enu, anchor)
            assert np.linalg.norm(geodetic_to_enu(p, anchor) - enu) < 1e-6

    def test_range_validation(self):
        with pytest.raises(ValueError):
            GeodeticPoint(91.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            GeodeticPoint(0.0, -180.0, 0.0)
