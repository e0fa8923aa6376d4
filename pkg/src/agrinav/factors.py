"""Residuals and Jacobians of the three measurement families fused by the
sliding-window estimator: inertial increments, stereo landmark observations,
and ENU-frame GNSS antenna positions, plus the Huber robust kernel.

Pose perturbations follow one convention everywhere: the rotation is
right-perturbed (R <- R Exp(dtheta)) and the translation is additive in the
world frame (p <- p + dp).  Every analytic Jacobian here is with respect to
that 6-dof perturbation, columns ordered rotation block first.

Residuals are unweighted; measurement covariances are applied at the solver
level only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    RigidTransform3,
    Rotation3,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)
from .preintegration import ImuBias, NavState, PreintegratedImu, correct_bias

# Points closer than this to the camera plane are rejected as unprojectable.
DEPTH_MIN = 0.05


class BehindCameraError(ValueError):
    """Raised when projecting a point at or behind the minimum depth."""


def _vec3(v) -> np.ndarray:
    out = np.array(v, dtype=float)
    if out.shape != (3,):
        raise ValueError("expected a 3-vector")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Landmark:
    """World-frame Euclidean position of a tracked 3D point."""

    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))
        if not np.isfinite(self.position).all():
            raise ValueError("landmark position must be finite")


@dataclass(frozen=True)
class StereoObservation:
    """Row-rectified stereo measurement: left pixel (u, v) and right-image u."""

    u_left: float
    v: float
    u_right: float

    def __post_init__(self):
        if not self.u_left > self.u_right:
            raise ValueError("stereo disparity must be positive (u_left > u_right)")

    def as_array(self) -> np.ndarray:
        return np.array([self.u_left, self.v, self.u_right])


@dataclass(frozen=True, eq=False)
class StereoFrame:
    """All landmark observations of one stereo image pair."""

    timestamp: float
    observations: tuple  # of (landmark_id, StereoObservation)


@dataclass(frozen=True, eq=False)
class StereoCameraModel:
    """Rectified pinhole stereo rig.

    ``camera_from_body`` maps body-frame points into the left camera frame
    (x right, y down, z forward).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    camera_from_body: RigidTransform3

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0 or self.baseline <= 0.0:
            raise ValueError("fx, fy and baseline must be positive")


@dataclass(frozen=True, eq=False)
class GnssFactorData:
    """Constants of one GNSS position factor.

    ``z_hat`` is the measured antenna position expressed in the local ENU
    anchor frame.  ``anchor_rotation`` maps world-frame displacements into
    that frame and ``anchor_pose`` is the frozen body pose at the anchor
    epoch; both stay constant during optimization.  ``lever_arm`` is the
    antenna position in the body frame.
    """

    z_hat: np.ndarray
    lever_arm: np.ndarray
    covariance: np.ndarray
    anchor_rotation: Rotation3
    anchor_pose: RigidTransform3

    def __post_init__(self):
        object.__setattr__(self, "z_hat", _vec3(self.z_hat))
        object.__setattr__(self, "lever_arm", _vec3(self.lever_arm))
        cov = np.array(self.covariance, dtype=float)
        if cov.shape != (3, 3):
            raise ValueError("covariance must be 3x3")
        if np.any(np.diag(cov) <= 0.0):
            raise ValueError("per-axis variances must be positive")
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)


def inertial_residual(
    prev: NavState, curr: NavState, pre: PreintegratedImu, gravity
) -> np.ndarray:
    """9-vector of (rotation, velocity, position) residuals between states.

    The increments are first bias-corrected to ``prev.bias``; the residual
    compares them against the relative motion implied by the two states with
    gravity removed.  Zero exactly when ``curr == predict(prev, pre)``.
    """
    gravity = np.asarray(gravity, dtype=float)
    pc = correct_bias(pre, prev.bias)
    dt = pre.delta_t
    r_prev = prev.pose.rotation.matrix
    r_curr = curr.pose.rotation.matrix

    r_rot = so3_log(Rotation3(pc.delta_rotation.matrix.T @ r_prev.T @ r_curr))
    dv = curr.velocity - prev.velocity - gravity * dt
    r_vel = r_prev.T @ dv - pc.delta_velocity
    dp = (
        curr.pose.translation
        - prev.pose.translation
        - prev.velocity * dt
        - 0.5 * gravity * dt * dt
    )
    r_pos = r_prev.T @ dp - pc.delta_position
    return np.concatenate([r_rot, r_vel, r_pos])


def inertial_jacobians(
    prev: NavState, curr: NavState, pre: PreintegratedImu, gravity
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual plus its Jacobians w.r.t. both states.

    State columns are ordered (rotation, translation, velocity, gyro bias,
    accel bias), 15 per state; the current state's biases do not enter.
    """
    gravity = np.asarray(gravity, dtype=float)
    dbg = prev.bias.gyro_bias - pre.linearization_bias.gyro_bias
    pc = correct_bias(pre, prev.bias)
    dt = pre.delta_t
    r_prev = prev.pose.rotation.matrix
    r_curr = curr.pose.rotation.matrix

    e_mat = pc.delta_rotation.matrix.T @ r_prev.T @ r_curr
    r_rot = so3_log(Rotation3(e_mat))
    dv = curr.velocity - prev.velocity - gravity * dt
    r_vel_world = r_prev.T @ dv
    dp = (
        curr.pose.translation
        - prev.pose.translation
        - prev.velocity * dt
        - 0.5 * gravity * dt * dt
    )
    r_pos_world = r_prev.T @ dp

    residual = np.concatenate(
        [r_rot, r_vel_world - pc.delta_velocity, r_pos_world - pc.delta_position]
    )

    jr_inv = so3_right_jacobian_inv(r_rot)
    jl_inv = so3_right_jacobian_inv(-r_rot)

    j_prev = np.zeros((9, 15))
    j_curr = np.zeros((9, 15))

    # Rotation residual rows.
    j_prev[0:3, 0:3] = -jr_inv @ r_curr.T @ r_prev
    j_curr[0:3, 0:3] = jr_inv
    j_prev[0:3, 9:12] = (
        -jl_inv @ so3_right_jacobian(pre.d_rotation_d_gyro_bias @ dbg) @ pre.d_rotation_d_gyro_bias
    )

    # Velocity residual rows.
    j_prev[3:6, 0:3] = skew(r_vel_world)
    j_prev[3:6, 6:9] = -r_prev.T
    j_curr[3:6, 6:9] = r_prev.T
    j_prev[3:6, 9:12] = -pre.d_velocity_d_gyro_bias
    j_prev[3:6, 12:15] = -pre.d_velocity_d_accel_bias

    # Position residual rows.
    j_prev[6:9, 0:3] = skew(r_pos_world)
    j_prev[6:9, 3:6] = -r_prev.T
    j_curr[6:9, 3:6] = r_prev.T
    j_prev[6:9, 6:9] = -r_prev.T * dt
    j_prev[6:9, 9:12] = -pre.d_position_d_gyro_bias
    j_prev[6:9, 12:15] = -pre.d_position_d_accel_bias

    return residual, j_prev, j_curr


def stereo_project(
    point_world, pose: RigidTransform3, cam: StereoCameraModel
) -> StereoObservation:
    """Project a world point into (u_left, v, u_right) pixel coordinates."""
    point_body = pose.inverse().apply(np.asarray(point_world, dtype=float))
    pc = cam.camera_from_body.apply(point_body)
    if pc[2] <= DEPTH_MIN:
        raise BehindCameraError(f"point depth {pc[2]:.4f} m is behind the camera")
    u_left = cam.fx * pc[0] / pc[2] + cam.cx
    v = cam.fy * pc[1] / pc[2] + cam.cy
    u_right = u_left - cam.fx * cam.baseline / pc[2]
    return StereoObservation(u_left, v, u_right)


def stereo_back_project(
    obs: StereoObservation, pose: RigidTransform3, cam: StereoCameraModel
) -> np.ndarray:
    """Triangulate a stereo observation back to a world point."""
    disparity = obs.u_left - obs.u_right
    z = cam.fx * cam.baseline / disparity
    x = (obs.u_left - cam.cx) * z / cam.fx
    y = (obs.v - cam.cy) * z / cam.fy
    point_body = cam.camera_from_body.inverse().apply(np.array([x, y, z]))
    return pose.apply(point_body)


def visual_residual(
    state: NavState, lm: Landmark, obs: StereoObservation, cam: StereoCameraModel
) -> np.ndarray:
    """Measured minus predicted stereo pixels, stacked (du_left, dv, du_right)."""
    predicted = stereo_project(lm.position, state.pose, cam)
    return obs.as_array() - predicted.as_array()


def visual_jacobians(
    state: NavState, lm: Landmark, obs: StereoObservation, cam: StereoCameraModel
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual plus Jacobians w.r.t. the pose (3x6) and the landmark (3x3)."""
    r_wb = state.pose.rotation.matrix
    point_body = r_wb.T @ (lm.position - state.pose.translation)
    r_cb = cam.camera_from_body.rotation.matrix
    pc = r_cb @ point_body + cam.camera_from_body.translation
    if pc[2] <= DEPTH_MIN:
        raise BehindCameraError(f"point depth {pc[2]:.4f} m is behind the camera")
    x, y, z = pc
    iz = 1.0 / z
    u_left = cam.fx * x * iz + cam.cx
    v = cam.fy * y * iz + cam.cy
    u_right = u_left - cam.fx * cam.baseline * iz
    residual = obs.as_array() - np.array([u_left, v, u_right])

    fb = cam.fx * cam.baseline
    d_pix_d_pc = np.array(
        [
            [cam.fx * iz, 0.0, -cam.fx * x * iz * iz],
            [0.0, cam.fy * iz, -cam.fy * y * iz * iz],
            [cam.fx * iz, 0.0, (-cam.fx * x + fb) * iz * iz],
        ]
    )
    d_pc_d_theta = r_cb @ skew(point_body)
    d_pc_d_trans = -r_cb @ r_wb.T
    j_pose = -d_pix_d_pc @ np.hstack([d_pc_d_theta, d_pc_d_trans])
    j_lm = -d_pix_d_pc @ (r_cb @ r_wb.T)
    return residual, j_pose, j_lm


def gnss_antenna_position(pose: RigidTransform3, lever_arm) -> np.ndarray:
    """World-frame antenna position for a body pose and lever arm."""
    return pose.rotation.apply(np.asarray(lever_arm, dtype=float)) + pose.translation


def gnss_residual(state_i: NavState, data: GnssFactorData) -> np.ndarray:
    """Measured ENU antenna position minus the modeled displacement.

    The model rotates the antenna displacement since the frozen anchor epoch
    into the ENU anchor frame.
    """
    antenna = gnss_antenna_position(state_i.pose, data.lever_arm)
    antenna_anchor = gnss_antenna_position(data.anchor_pose, data.lever_arm)
    return data.z_hat - data.anchor_rotation.apply(antenna - antenna_anchor)


def gnss_jacobian(state_i: NavState, data: GnssFactorData) -> np.ndarray:
    """3x6 Jacobian of the GNSS residual w.r.t. the pose perturbation.

    Columns are (rotation, translation):
    [ A R [lever]_x   -A ]  with A the world-to-anchor rotation.
    """
    a = data.anchor_rotation.matrix
    r = state_i.pose.rotation.matrix
    return np.hstack([a @ r @ skew(data.lever_arm), -a])


def robust_kernel(squared_mahalanobis: float, delta: float) -> tuple[float, float]:
    """Huber kernel on the Mahalanobis norm s = sqrt(squared_mahalanobis).

    Returns (cost, weight): quadratic cost and unit weight inside ``delta``,
    linear cost and weight delta/s outside; the weight is cost'/(2s) for
    iteratively-reweighted least squares.
    """
    if squared_mahalanobis < 0.0:
        raise ValueError("squared Mahalanobis distance must be non-negative")
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    s = math.sqrt(squared_mahalanobis)
    if s <= delta:
        return squared_mahalanobis, 1.0
    return 2.0 * delta * s - delta * delta, delta / s


__all__ = [
    "BehindCameraError",
    "DEPTH_MIN",
    "GnssFactorData",
    "ImuBias",
    "Landmark",
    "NavState",
    "StereoCameraModel",
    "StereoFrame",
    "StereoObservation",
    "gnss_antenna_position",
    "gnss_jacobian",
    "gnss_residual",
    "inertial_jacobians",
    "inertial_residual",
    "robust_kernel",
    "stereo_back_project",
    "stereo_project",
    "visual_jacobians",
    "visual_residual",
]
