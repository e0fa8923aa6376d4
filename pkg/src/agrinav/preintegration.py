"""On-manifold IMU preintegration between consecutive keyframes.

Accumulates gyroscope/accelerometer samples into relative rotation, velocity,
and position increments that are independent of the absolute start state,
together with their 9x9 covariance (ordered rotation, velocity, position) and
the first-order Jacobians with respect to the linearization biases.

Integration is zero-order hold: each sample's value is held constant from its
timestamp until the next sample (the final sample until ``end_time`` when
given, otherwise for the duration of the preceding interval).  Gravity is not
part of the increments; it is injected by :func:`predict` and by the inertial
residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    RigidTransform3,
    Rotation3,
    skew_batch,
    so3_exp,
    so3_exp_and_right_jacobian_batch,
)

GRAVITY = np.array([0.0, 0.0, -9.81])


def _vec3(v) -> np.ndarray:
    out = np.array(v, dtype=float)
    if out.shape != (3,):
        raise ValueError("expected a 3-vector")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ImuSample:
    """One IMU reading: body-frame angular rate (rad/s) and specific force (m/s^2)."""

    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", _vec3(self.gyro))
        object.__setattr__(self, "accel", _vec3(self.accel))


@dataclass(frozen=True, eq=False)
class ImuBias:
    accel_bias: np.ndarray
    gyro_bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "accel_bias", _vec3(self.accel_bias))
        object.__setattr__(self, "gyro_bias", _vec3(self.gyro_bias))
        if not (np.isfinite(self.accel_bias).all() and np.isfinite(self.gyro_bias).all()):
            raise ValueError("bias components must be finite")

    @staticmethod
    def zero() -> "ImuBias":
        return ImuBias(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class ImuNoiseModel:
    """Continuous-time noise densities (units per sqrt(Hz))."""

    gyro_noise_density: float
    accel_noise_density: float
    gyro_bias_random_walk: float
    accel_bias_random_walk: float

    def __post_init__(self):
        for name in (
            "gyro_noise_density",
            "accel_noise_density",
            "gyro_bias_random_walk",
            "accel_bias_random_walk",
        ):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True, eq=False)
class NavState:
    """Per-keyframe sensor state: body pose in the world frame, world-frame
    velocity, and the IMU biases."""

    pose: RigidTransform3
    velocity: np.ndarray
    bias: ImuBias

    def __post_init__(self):
        object.__setattr__(self, "velocity", _vec3(self.velocity))


@dataclass(frozen=True, eq=False)
class PreintegratedImu:
    """Relative motion increments over one keyframe interval.

    ``covariance`` is the 9x9 uncertainty of (rotation, velocity, position)
    driven by the measurement white noise.  The bias Jacobians give the
    first-order change of each increment per unit change of the gyro/accel
    bias away from ``linearization_bias``.
    """

    delta_rotation: Rotation3
    delta_velocity: np.ndarray
    delta_position: np.ndarray
    delta_t: float
    covariance: np.ndarray
    d_rotation_d_gyro_bias: np.ndarray
    d_velocity_d_gyro_bias: np.ndarray
    d_velocity_d_accel_bias: np.ndarray
    d_position_d_gyro_bias: np.ndarray
    d_position_d_accel_bias: np.ndarray
    linearization_bias: ImuBias

    def __post_init__(self):
        if self.delta_t <= 0.0:
            raise ValueError("delta_t must be positive")

    @staticmethod
    def identity(delta_t: float = 1e-9, bias: ImuBias | None = None) -> "PreintegratedImu":
        z = np.zeros((3, 3))
        return PreintegratedImu(
            Rotation3.identity(),
            np.zeros(3),
            np.zeros(3),
            delta_t,
            np.zeros((9, 9)),
            z,
            z,
            z,
            z,
            z,
            bias or ImuBias.zero(),
        )


def integrate(
    samples: list[ImuSample],
    bias: ImuBias,
    noise: ImuNoiseModel,
    start_time: float | None = None,
    end_time: float | None = None,
) -> PreintegratedImu:
    """Preintegrate an ordered sample list under a fixed bias estimate.

    ``start_time`` defaults to the first sample's timestamp.  It may fall
    after the first sample (whose hold interval then begins at
    ``start_time``, the zero-order hold crossing the boundary), but never
    before it.  ``end_time`` closes the final hold interval; without it the
    final interval replicates the preceding one (so a single sample needs an
    explicit end time).
    """
    if len(samples) == 0:
        raise ValueError("cannot integrate an empty sample list")
    ts = np.array([s.timestamp for s in samples])
    if np.any(np.diff(ts) <= 0.0):
        raise ValueError("sample timestamps must be strictly increasing")
    if start_time is None:
        start_time = float(ts[0])
    elif ts[0] > start_time + 1e-12:
        raise ValueError("first sample must not be after start_time")
    if len(samples) > 1 and start_time >= ts[1]:
        raise ValueError("start_time must precede the second sample")
    if end_time is None:
        if len(samples) < 2:
            raise ValueError("cannot infer the hold interval of a single sample")
        end_time = float(ts[-1]) + float(ts[-1] - ts[-2])
    elif end_time <= ts[-1]:
        raise ValueError("end_time must be after the last sample")

    bounds = np.concatenate(([start_time], ts[1:], [end_time]))
    dts = np.diff(bounds)

    # Bias-corrected measurements and per-step rotation increments, batched.
    w_arr = np.array([s.gyro for s in samples]) - bias.gyro_bias
    a_arr = np.array([s.accel for s in samples]) - bias.accel_bias
    r_incs, jrs = so3_exp_and_right_jacobian_batch(w_arr * dts[:, None])
    a_hats = skew_batch(a_arr)

    d_r = np.eye(3)
    d_v = np.zeros(3)
    d_p = np.zeros(3)
    cov = np.zeros((9, 9))
    j_r_bg = np.zeros((3, 3))
    j_v_bg = np.zeros((3, 3))
    j_v_ba = np.zeros((3, 3))
    j_p_bg = np.zeros((3, 3))
    j_p_ba = np.zeros((3, 3))

    sig_g2 = noise.gyro_noise_density**2
    sig_a2 = noise.accel_noise_density**2
    eye3 = np.eye(3)

    for k in range(len(samples)):
        dt = dts[k]
        a = a_arr[k]
        r_inc = r_incs[k]
        d_r_a_hat = d_r @ a_hats[k]

        # Bias Jacobians; position terms consume the pre-update velocity ones.
        j_p_ba += j_v_ba * dt - 0.5 * d_r * dt * dt
        j_p_bg += j_v_bg * dt - 0.5 * d_r_a_hat @ j_r_bg * dt * dt
        j_v_ba += -d_r * dt
        j_v_bg += -d_r_a_hat @ j_r_bg * dt

        # Covariance propagation, error state (rotation, velocity, position).
        a_mat = np.eye(9)
        a_mat[0:3, 0:3] = r_inc.T
        a_mat[3:6, 0:3] = -d_r_a_hat * dt
        a_mat[6:9, 0:3] = -0.5 * d_r_a_hat * dt * dt
        a_mat[6:9, 3:6] = eye3 * dt
        cov = a_mat @ cov @ a_mat.T
        # White noise enters scaled by 1/dt (density to discrete variance).
        jr_dt = jrs[k] * dt
        cov[0:3, 0:3] += (sig_g2 / dt) * (jr_dt @ jr_dt.T)
        # Accel noise maps through d_r, which cancels in the outer products.
        na = sig_a2 * dt
        cov[3:6, 3:6] += na * eye3
        cov[3:6, 6:9] += 0.5 * na * dt * eye3
        cov[6:9, 3:6] += 0.5 * na * dt * eye3
        cov[6:9, 6:9] += 0.25 * na * dt * dt * eye3

        # Increment updates: position first (uses old velocity and rotation).
        d_r_a = d_r @ a
        d_p = d_p + d_v * dt + 0.5 * d_r_a * dt * dt
        d_v = d_v + d_r_a * dt
        d_r = d_r @ r_inc
        j_r_bg = r_inc.T @ j_r_bg - jr_dt

    cov = 0.5 * (cov + cov.T)
    return PreintegratedImu(
        Rotation3(d_r),
        d_v,
        d_p,
        float(end_time - start_time),
        cov,
        j_r_bg,
        j_v_bg,
        j_v_ba,
        j_p_bg,
        j_p_ba,
        bias,
    )


def correct_bias(pre: PreintegratedImu, new_bias: ImuBias) -> PreintegratedImu:
    """First-order update of the increments to a new bias estimate.

    Uses the stored bias Jacobians; the covariance is unchanged.  Exact only
    near the linearization point, which the solver keeps small by
    re-integrating when biases move far.
    """
    dbg = new_bias.gyro_bias - pre.linearization_bias.gyro_bias
    dba = new_bias.accel_bias - pre.linearization_bias.accel_bias
    d_r = pre.delta_rotation @ so3_exp(pre.d_rotation_d_gyro_bias @ dbg)
    d_v = pre.delta_velocity + pre.d_velocity_d_gyro_bias @ dbg + pre.d_velocity_d_accel_bias @ dba
    d_p = pre.delta_position + pre.d_position_d_gyro_bias @ dbg + pre.d_position_d_accel_bias @ dba
    return PreintegratedImu(
        d_r,
        d_v,
        d_p,
        pre.delta_t,
        pre.covariance,
        pre.d_rotation_d_gyro_bias,
        pre.d_velocity_d_gyro_bias,
        pre.d_velocity_d_accel_bias,
        pre.d_position_d_gyro_bias,
        pre.d_position_d_accel_bias,
        new_bias,
    )


def predict(prev: NavState, pre: PreintegratedImu, gravity=GRAVITY) -> NavState:
    """Propagate a state through preintegrated increments.

    Returns the unique state that zeroes the inertial residual for the given
    start state and increments.  Biases are carried forward unchanged.
    """
    gravity = np.asarray(gravity, dtype=float)
    pc = correct_bias(pre, prev.bias)
    dt = pre.delta_t
    r0 = prev.pose.rotation
    rot = r0 @ pc.delta_rotation
    vel = prev.velocity + gravity * dt + r0.apply(pc.delta_velocity)
    pos = (
        prev.pose.translation
        + prev.velocity * dt
        + 0.5 * gravity * dt * dt
        + r0.apply(pc.delta_position)
    )
    return NavState(RigidTransform3(rot, pos), vel, prev.bias)


def compose(first: PreintegratedImu, second: PreintegratedImu) -> PreintegratedImu:
    """Chain two consecutive preintegrations (increments only).

    Covariance and bias Jacobians are taken from a fresh integration in
    production code; this composition serves consistency checks and keyframe
    merging where only the increments matter.
    """
    if first.linearization_bias is not second.linearization_bias:
        b1, b2 = first.linearization_bias, second.linearization_bias
        if not (
            np.allclose(b1.accel_bias, b2.accel_bias)
            and np.allclose(b1.gyro_bias, b2.gyro_bias)
        ):
            raise ValueError("cannot compose preintegrations with different biases")
    d_r1 = first.delta_rotation
    return PreintegratedImu(
        d_r1 @ second.delta_rotation,
        first.delta_velocity + d_r1.apply(second.delta_velocity),
        first.delta_position
        + first.delta_velocity * second.delta_t
        + d_r1.apply(second.delta_position),
        first.delta_t + second.delta_t,
        first.covariance,
        first.d_rotation_d_gyro_bias,
        first.d_velocity_d_gyro_bias,
        first.d_velocity_d_accel_bias,
        first.d_position_d_gyro_bias,
        first.d_position_d_accel_bias,
        first.linearization_bias,
    )
