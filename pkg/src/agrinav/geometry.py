"""Rotation and rigid-transform primitives, point-set alignment, and WGS-84
geodetic conversions.

Conventions used throughout the package:

- Rotations are orthonormal 3x3 matrices acting on column vectors.
- ``so3_log`` returns the principal axis-angle vector with norm <= pi.  At
  exactly half a turn the representative with non-negative z (then y, then x)
  component is returned.
- ENU axes are (East, North, Up) in the local tangent plane of the WGS-84
  ellipsoid; altitudes are ellipsoidal (no geoid model).

All types are immutable values and all functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# WGS-84 ellipsoid constants.
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)

_SMALL_ANGLE = 1e-6


class DegenerateGeometryError(ValueError):
    """Raised when a point configuration does not determine an alignment."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == np.cross(v, w)."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stack of cross-product matrices for an (N, 3) array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def so3_exp_and_right_jacobian_batch(phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rodrigues exponential and right Jacobian for an (N, 3) stack.

    Same coefficient formulas (including the small-angle branches) as the
    scalar :func:`so3_exp` / :func:`so3_right_jacobian`.
    """
    phi = np.asarray(phi, dtype=float)
    theta2 = np.einsum("ni,ni->n", phi, phi)
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    safe_t = np.where(small, 1.0, theta)
    safe_t2 = np.where(small, 1.0, theta2)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / safe_t)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / safe_t2)
    c = np.where(small, 1.0 / 6.0, (theta - np.sin(theta)) / (safe_t2 * safe_t))
    k = skew_batch(phi)
    outer = phi[:, :, None] * phi[:, None, :]
    eye = np.eye(3)
    # K^2 = outer - theta^2 I folds the two Rodrigues terms into scalars.
    exp = (
        (1.0 - b * theta2)[:, None, None] * eye
        + a[:, None, None] * k
        + b[:, None, None] * outer
    )
    jr = (
        (1.0 - c * theta2)[:, None, None] * eye
        - b[:, None, None] * k
        + c[:, None, None] * outer
    )
    return exp, jr


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega) -> "Rotation3":
    """Exponential map so(3) -> SO(3) via the Rodrigues formula.

    Below ``1e-6`` rad both coefficients switch to their second-order Taylor
    expansions to avoid cancellation.
    """
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    k = skew(omega)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return Rotation3(np.eye(3) + a * k + b * (k @ k))


def so3_log(r: "Rotation3") -> np.ndarray:
    """Principal logarithm of a rotation, norm <= pi.

    The angle comes from the trace with the acos argument clamped to [-1, 1];
    near zero a series replaces the sin division, and at half a turn the axis
    is extracted from R + I with a deterministic sign convention
    (non-negative z, then y, then x).
    """
    m = r.matrix
    cos_angle = min(1.0, max(-1.0, 0.5 * (np.trace(m) - 1.0)))
    angle = math.acos(cos_angle)
    if angle < 1e-7:
        # theta / (2 sin theta) ~ 1/2 + theta^2/12
        return (0.5 + angle * angle / 12.0) * _vee(m - m.T)
    if math.pi - angle < 1e-7:
        # R ~ 2*a*a^T - I, so columns of (R + I)/2 are multiples of the axis.
        b = 0.5 * (m + np.eye(3))
        i = int(np.argmax(np.diag(b)))
        axis = b[:, i] / math.sqrt(max(b[i, i], 1e-15))
        axis = axis / np.linalg.norm(axis)
        tol = 1e-12
        flip = axis[2] < -tol or (
            abs(axis[2]) <= tol
            and (axis[1] < -tol or (abs(axis[1]) <= tol and axis[0] < 0.0))
        )
        if flip:
            axis = -axis
        return angle * axis
    return (0.5 * angle / math.sin(angle)) * _vee(m - m.T)


def so3_right_jacobian(omega) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(w + d) ~ Exp(w) Exp(Jr(w) d)."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    k = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    return (
        np.eye(3)
        - (1.0 - math.cos(theta)) / theta2 * k
        + (theta - math.sin(theta)) / (theta2 * theta) * (k @ k)
    )


def so3_right_jacobian_inv(omega) -> np.ndarray:
    """Inverse of the right Jacobian of SO(3)."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    k = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 12.0
    coeff = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * k + coeff * (k @ k)


@dataclass(frozen=True, eq=False)
class Rotation3:
    """Element of SO(3), stored as an orthonormal 3x3 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _readonly(self.matrix))

    @staticmethod
    def identity() -> "Rotation3":
        return Rotation3(np.eye(3))

    @staticmethod
    def from_matrix(m) -> "Rotation3":
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        if np.linalg.norm(m.T @ m - np.eye(3)) > 1e-9:
            raise ValueError("matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > 1e-9:
            raise ValueError("matrix determinant is not +1")
        return Rotation3(m)

    @staticmethod
    def from_quaternion(qx: float, qy: float, qz: float, qw: float) -> "Rotation3":
        """Unit quaternion (x, y, z, w) to rotation matrix."""
        n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
        if n < 1e-12:
            raise ValueError("zero-norm quaternion")
        x, y, z, w = qx / n, qy / n, qz / n, qw / n
        return Rotation3(
            np.array(
                [
                    [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                    [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                    [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
                ]
            )
        )

    def to_quaternion(self) -> np.ndarray:
        """Rotation matrix to unit quaternion (x, y, z, w), w >= 0."""
        m = self.matrix
        t = np.trace(m)
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            w = 0.25 * s
            x = (m[2, 1] - m[1, 2]) / s
            y = (m[0, 2] - m[2, 0]) / s
            z = (m[1, 0] - m[0, 1]) / s
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            w = (m[2, 1] - m[1, 2]) / s
            x = 0.25 * s
            y = (m[0, 1] + m[1, 0]) / s
            z = (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            w = (m[0, 2] - m[2, 0]) / s
            x = (m[0, 1] + m[1, 0]) / s
            y = 0.25 * s
            z = (m[1, 2] + m[2, 1]) / s
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            w = (m[1, 0] - m[0, 1]) / s
            x = (m[0, 2] + m[2, 0]) / s
            y = (m[1, 2] + m[2, 1]) / s
            z = 0.25 * s
        q = np.array([x, y, z, w])
        if q[3] < 0.0:
            q = -q
        return q / np.linalg.norm(q)

    def __matmul__(self, other: "Rotation3") -> "Rotation3":
        return Rotation3(self.matrix @ other.matrix)

    def inverse(self) -> "Rotation3":
        return Rotation3(self.matrix.T)

    def apply(self, v) -> np.ndarray:
        """Rotate a 3-vector or an (N, 3) stack of vectors."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            return self.matrix @ v
        return v @ self.matrix.T


@dataclass(frozen=True, eq=False)
class RigidTransform3:
    """Element of SE(3): x_out = rotation @ x_in + translation."""

    rotation: Rotation3
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", _readonly(self.translation))
        if self.translation.shape != (3,):
            raise ValueError("translation must be a 3-vector")

    @staticmethod
    def identity() -> "RigidTransform3":
        return RigidTransform3(Rotation3.identity(), np.zeros(3))

    def __matmul__(self, other: "RigidTransform3") -> "RigidTransform3":
        return RigidTransform3(
            self.rotation @ other.rotation,
            self.rotation.apply(other.translation) + self.translation,
        )

    def inverse(self) -> "RigidTransform3":
        rinv = self.rotation.inverse()
        return RigidTransform3(rinv, -rinv.apply(self.translation))

    def apply(self, v) -> np.ndarray:
        return self.rotation.apply(v) + self.translation


@dataclass(frozen=True, eq=False)
class GeodeticPoint:
    """WGS-84 geodetic coordinates; altitude above the ellipsoid, meters."""

    latitude: float
    longitude: float
    altitude: float

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 < self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """x_out = scale * rotation @ x_in + translation, scale > 0."""

    scale: float
    rotation: Rotation3
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.scale <= 0.0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "translation", _readonly(self.translation))

    def apply(self, v) -> np.ndarray:
        return self.scale * self.rotation.apply(v) + self.translation


def rotation_from_correlation(corr: np.ndarray) -> tuple[Rotation3, np.ndarray]:
    """Best-fit rotation from a target-source correlation matrix.

    ``corr`` is sum_k (target_k - mean_t)(source_k - mean_s)^T.  Returns the
    proper rotation maximizing trace(R^T corr) plus the singular values of
    ``corr`` so callers can run their own conditioning checks.
    """
    u, d, vt = np.linalg.svd(corr)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        s[2, 2] = -1.0
    return Rotation3(u @ s @ vt), d


def umeyama_align(source, target, with_scale: bool = False) -> SimilarityTransform:
    """Least-squares similarity (or rigid) transform mapping source onto target.

    Minimizes sum_k || target_k - (s R source_k + t) ||^2 with det(R) = +1.
    Raises :class:`DegenerateGeometryError` for fewer than 3 point pairs or a
    configuration (e.g. collinear points) that leaves the rotation
    undetermined.
    """
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    tgt = np.asarray(target, dtype=float).reshape(-1, 3)
    if src.shape != tgt.shape:
        raise ValueError("source and target must have the same length")
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometryError(f"need at least 3 point pairs, got {n}")

    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    sc = src - mu_s
    tc = tgt - mu_t

    corr = tc.T @ sc / n
    rot, d = rotation_from_correlation(corr)
    # Rank >= 2 is required to pin the rotation; collinear or coincident
    # clouds leave a free axis.
    if d[1] <= 1e-9 * max(d[0], 1e-30):
        raise DegenerateGeometryError("point configuration does not determine a rotation")

    if with_scale:
        var_s = float((sc * sc).sum()) / n
        sign = np.eye(3)
        if np.linalg.det(corr) < 0.0:
            sign[2, 2] = -1.0
        scale = float(np.trace(np.diag(d) @ sign)) / var_s
    else:
        scale = 1.0

    t = mu_t - scale * rot.apply(mu_s)
    return SimilarityTransform(scale, rot, t)


def geodetic_to_ecef(p: GeodeticPoint) -> np.ndarray:
    """Geodetic (WGS-84) to earth-centered earth-fixed coordinates, meters."""
    lat = math.radians(p.latitude)
    lon = math.radians(p.longitude)
    sin_lat = math.sin(lat)
    cos_lat = math.cos(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    x = (n + p.altitude) * cos_lat * math.cos(lon)
    y = (n + p.altitude) * cos_lat * math.sin(lon)
    z = (n * (1.0 - WGS84_E2) + p.altitude) * sin_lat
    return np.array([x, y, z])


def ecef_to_geodetic(xyz) -> GeodeticPoint:
    """ECEF to geodetic via fixed-point iteration on the latitude.

    Iterates to 1e-12 rad, which is far below the millimeter level.
    """
    x, y, z = np.asarray(xyz, dtype=float)
    lon = math.atan2(y, x)
    p = math.hypot(x, y)
    if p < 1e-9:
        lat = math.copysign(math.pi / 2.0, z)
        alt = abs(z) - WGS84_B
        return GeodeticPoint(math.degrees(lat), math.degrees(lon), alt)
    def altitude_at(lat: float) -> tuple[float, float]:
        sin_lat = math.sin(lat)
        n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
        # p/cos form degrades near the poles; switch to the z/sin form there.
        if abs(sin_lat) < 0.7071:
            return n, p / math.cos(lat) - n
        return n, z / sin_lat - n * (1.0 - WGS84_E2)

    lat = math.atan2(z, p * (1.0 - WGS84_E2))
    for _ in range(100):
        n, alt = altitude_at(lat)
        new_lat = math.atan2(z, p * (1.0 - WGS84_E2 * n / (n + alt)))
        converged = abs(new_lat - lat) < 1e-12
        lat = new_lat
        if converged:
            break
    _, alt = altitude_at(lat)
    lon_deg = math.degrees(lon)
    if lon_deg <= -180.0:
        lon_deg += 360.0
    return GeodeticPoint(math.degrees(lat), lon_deg, alt)


def enu_rotation(anchor: GeodeticPoint) -> np.ndarray:
    """Rows are the East, North, Up unit vectors at ``anchor`` in ECEF axes."""
    lat = math.radians(anchor.latitude)
    lon = math.radians(anchor.longitude)
    sin_lat, cos_lat = math.sin(lat), math.cos(lat)
    sin_lon, cos_lon = math.sin(lon), math.cos(lon)
    return np.array(
        [
            [-sin_lon, cos_lon, 0.0],
            [-sin_lat * cos_lon, -sin_lat * sin_lon, cos_lat],
            [cos_lat * cos_lon, cos_lat * sin_lon, sin_lat],
        ]
    )


def geodetic_to_enu(p: GeodeticPoint, anchor: GeodeticPoint) -> np.ndarray:
    """East-North-Up coordinates of ``p`` in the tangent frame at ``anchor``."""
    return enu_rotation(anchor) @ (geodetic_to_ecef(p) - geodetic_to_ecef(anchor))


def enu_to_geodetic(enu, anchor: GeodeticPoint) -> GeodeticPoint:
    """Inverse of :func:`geodetic_to_enu` for the same anchor."""
    ecef = geodetic_to_ecef(anchor) + enu_rotation(anchor).T @ np.asarray(enu, dtype=float)
    return ecef_to_geodetic(ecef)
