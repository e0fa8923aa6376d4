import math

import numpy as np
import pytest

from agrinav.factors import (
    BehindCameraError,
    GnssFactorData,
    Landmark,
    NavState,
    StereoCameraModel,
    StereoObservation,
    gnss_jacobian,
    gnss_residual,
    inertial_jacobians,
    inertial_residual,
    robust_kernel,
    stereo_back_project,
    stereo_project,
    visual_jacobians,
    visual_residual,
)
from agrinav.geometry import RigidTransform3, Rotation3, so3_exp
from agrinav.preintegration import (
    GRAVITY,
    ImuBias,
    ImuNoiseModel,
    ImuSample,
    integrate,
    predict,
)

NOISE = ImuNoiseModel(1e-4, 1e-3, 1e-5, 1e-4)

# Left camera looking along body +x: camera z forward, x right, y down.
FORWARD_CAM_ROTATION = Rotation3(
    np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
)


def forward_camera(fx=320.0, fy=320.0, cx=320.0, cy=180.0, baseline=0.12):
    return StereoCameraModel(
        fx, fy, cx, cy, baseline, RigidTransform3(FORWARD_CAM_ROTATION, np.zeros(3))
    )


def random_state(rng, speed=2.0) -> NavState:
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0.0, math.pi - 0.1)
    return NavState(
        RigidTransform3(so3_exp(w), rng.uniform(-50, 50, size=3)),
        rng.normal(size=3) * speed,
        ImuBias(rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.005),
    )


def perturb_state(state: NavState, delta15: np.ndarray) -> NavState:
    pose = RigidTransform3(
        state.pose.rotation @ so3_exp(delta15[0:3]),
        state.pose.translation + delta15[3:6],
    )
    return NavState(
        pose,
        state.velocity + delta15[6:9],
        ImuBias(state.bias.accel_bias + delta15[12:15], state.bias.gyro_bias + delta15[9:12]),
    )


def random_preintegration(rng, duration=0.4):
    samples = []
    rate = 200.0
    for k in range(int(duration * rate)):
        t = k / rate
        samples.append(
            ImuSample(
                t,
                rng.uniform(-0.3, 0.3, size=3) * 0 + np.array([0.1, -0.2, 0.3]) * math.sin(t + 1),
                np.array([0.5, -0.3, 9.7]) + 0.3 * math.cos(2 * t),
            )
        )
    return integrate(samples, ImuBias.zero(), NOISE, end_time=duration)


class TestInertialResidual:
    def test_zero_at_predicted_state(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            prev = random_state(rng)
            pre = random_preintegration(rng)
            curr = predict(prev, pre, GRAVITY)
            r = inertial_residual(prev, curr, pre, GRAVITY)
            assert np.linalg.norm(r) < 1e-9

    def test_orientation_perturbation_first_order(self):
        rng = np.random.default_rng(1)
        prev = random_state(rng)
        pre = random_preintegration(rng)
        curr = predict(prev, pre, GRAVITY)
        dtheta = 1e-4 * np.array([0.6, -0.8, 0.0])
        bumped = NavState(
            RigidTransform3(
                curr.pose.rotation @ so3_exp(dtheta), curr.pose.translation
            ),
            curr.velocity,
            curr.bias,
        )
        r = inertial_residual(prev, bumped, pre, GRAVITY)
        assert np.linalg.norm(r[0:3] - dtheta) < 1e-8  # O(|dtheta|^2)
        assert np.linalg.norm(r[3:9]) < 1e-12

    def test_stationary_rest_to_rest(self):
        samples = [
            ImuSample(k / 200.0, np.zeros(3), np.array([0.0, 0.0, 9.81]))
            for k in range(200)
        ]
        pre = integrate(samples, ImuBias.zero(), NOISE, end_time=1.0)
        rest = NavState(RigidTransform3.identity(), np.zeros(3), ImuBias.zero())
        r = inertial_residual(rest, rest, pre, GRAVITY)
        assert np.linalg.norm(r) < 1e-9

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(2)
        h = 1e-6
        for _ in range(100):
            prev = random_state(rng)
            pre = random_preintegration(rng)
            curr = perturb_state(predict(prev, pre, GRAVITY), rng.normal(size=15) * 0.01)
            r0, j_prev, j_curr = inertial_jacobians(prev, curr, pre, GRAVITY)
            assert np.allclose(r0, inertial_residual(prev, curr, pre, GRAVITY))
            fd_prev = np.zeros((9, 15))
            fd_curr = np.zeros((9, 15))
            for i in range(15):
                d = np.zeros(15)
                d[i] = h
                fd_prev[:, i] = (
                    inertial_residual(perturb_state(prev, d), curr, pre, GRAVITY)
                    - inertial_residual(perturb_state(prev, -d), curr, pre, GRAVITY)
                ) / (2 * h)
                fd_curr[:, i] = (
                    inertial_residual(prev, perturb_state(curr, d), pre, GRAVITY)
                    - inertial_residual(prev, perturb_state(curr, -d), pre, GRAVITY)
                ) / (2 * h)
            scale = max(np.linalg.norm(fd_prev), 1.0)
            assert np.linalg.norm(fd_prev - j_prev) / scale < 1e-5
            assert np.linalg.norm(fd_curr - j_curr) / max(np.linalg.norm(fd_curr), 1.0) < 1e-5


class TestStereoProjection:
    def test_on_axis_point(self):
        cam = StereoCameraModel(
            100.0, 100.0, 0.0, 0.0, 0.1, RigidTransform3.identity()
        )
        obs = stereo_project([0.0, 0.0, 1.0], RigidTransform3.identity(), cam)
        assert np.allclose(obs.as_array(), [0.0, 0.0, -10.0])

    def test_behind_camera_raises(self):
        cam = StereoCameraModel(100.0, 100.0, 0.0, 0.0, 0.1, RigidTransform3.identity())
        with pytest.raises(BehindCameraError):
            stereo_project([0.0, 0.0, -1.0], RigidTransform3.identity(), cam)

    def test_triangulation_round_trip(self):
        rng = np.random.default_rng(3)
        cam = forward_camera()
        for _ in range(100):
            pose = RigidTransform3(
                so3_exp(rng.normal(size=3) * 0.3), rng.normal(size=3) * 5
            )
            point = pose.apply(np.array([rng.uniform(2, 30), *rng.uniform(-3, 3, 2)]))
            obs = stereo_project(point, pose, cam)
            recovered = stereo_back_project(obs, pose, cam)
            reprojected = stereo_project(recovered, pose, cam)
            assert np.linalg.norm(obs.as_array() - reprojected.as_array()) < 1e-6
            assert np.linalg.norm(recovered - point) < 1e-6


class TestVisualResidual:
    def test_zero_at_projection(self):
        rng = np.random.default_rng(4)
        cam = forward_camera()
        pose = RigidTransform3(so3_exp([0.0, 0.0, 0.4]), np.array([1.0, 2.0, 0.0]))
        state = NavState(pose, np.zeros(3), ImuBias.zero())
        point = pose.apply(np.array([10.0, 1.0, 0.5]))
        obs = stereo_project(point, pose, cam)
        r = visual_residual(state, Landmark(point), obs, cam)
        assert np.allclose(r, 0.0, atol=1e-12)

    def test_linear_in_observation(self):
        cam = forward_camera()
        pose = RigidTransform3.identity()
        state = NavState(pose, np.zeros(3), ImuBias.zero())
        point = np.array([10.0, 0.5, 0.2])
        obs = stereo_project(point, pose, cam)
        shifted = StereoObservation(obs.u_left + 1.0, obs.v, obs.u_right)
        r = visual_residual(state, Landmark(point), shifted, cam)
        assert np.allclose(r, [1.0, 0.0, 0.0], atol=1e-12)

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(5)
        cam = forward_camera()
        h = 1e-6
        for _ in range(100):
            pose = RigidTransform3(so3_exp(rng.normal(size=3) * 0.5), rng.normal(size=3) * 3)
            state = NavState(pose, np.zeros(3), ImuBias.zero())
            point = pose.apply(np.array([rng.uniform(3, 25), *rng.uniform(-2, 2, 2)]))
            lm = Landmark(point)
            obs = stereo_project(point, pose, cam)
            obs = StereoObservation(obs.u_left + 0.5, obs.v - 0.3, obs.u_right + 0.2)
            r0, j_pose, j_lm = visual_jacobians(state, lm, obs, cam)
            assert np.allclose(r0, visual_residual(state, lm, obs, cam))
            fd_pose = np.zeros((3, 6))
            for i in range(6):
                d = np.zeros(15)
                d[i] = h
                fd_pose[:, i] = (
                    visual_residual(perturb_state(state, d), lm, obs, cam)
                    - visual_residual(perturb_state(state, -d), lm, obs, cam)
                ) / (2 * h)
            fd_lm = np.zeros((3, 3))
            for i in range(3):
                d = np.zeros(3)
                d[i] = h
                fd_lm[:, i] = (
                    visual_residual(state, Landmark(point + d), obs, cam)
                    - visual_residual(state, Landmark(point - d), obs, cam)
                ) / (2 * h)
            assert np.linalg.norm(fd_pose - j_pose) / max(np.linalg.norm(fd_pose), 1.0) < 1e-5
            assert np.linalg.norm(fd_lm - j_lm) / max(np.linalg.norm(fd_lm), 1.0) < 1e-5


def random_gnss_data(rng, state: NavState, lever_arm=None, anchor_pose=None):
    lever = rng.uniform(-0.5, 0.5, size=3) if lever_arm is None else np.asarray(lever_arm)
    anchor_pose = anchor_pose or RigidTransform3(
        so3_exp(rng.normal(size=3) * 0.4), rng.uniform(-20, 20, size=3)
    )
    anchor_rot = so3_exp(rng.normal(size=3))
    antenna = state.pose.rotation.apply(lever) + state.pose.translation
    antenna0 = anchor_pose.rotation.apply(lever) + anchor_pose.translation
    z_hat = anchor_rot.apply(antenna - antenna0)
    return GnssFactorData(z_hat, lever, np.diag([0.25, 0.25, 0.25]), anchor_rot, anchor_pose)


class TestGnssResidual:
    def test_anchor_state_zero_measurement(self):
        rng = np.random.default_rng(6)
        pose = RigidTransform3(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        state = NavState(pose, np.zeros(3), ImuBias.zero())
        data = GnssFactorData(
            np.zeros(3),
            [0.1, 0.0, 0.3],
            np.eye(3),
            so3_exp(rng.normal(size=3)),
            pose,
        )
        assert np.allclose(gnss_residual(state, data), 0.0, atol=1e-12)

    def test_structural_simplification(self):
        rng = np.random.default_rng(7)
        state = random_state(rng)
        z_hat = rng.normal(size=3)
        data = GnssFactorData(
            z_hat, np.zeros(3), np.eye(3), Rotation3.identity(), RigidTransform3.identity()
        )
        expected = z_hat - state.pose.translation
        assert np.allclose(gnss_residual(state, data), expected, atol=1e-12)

    def test_generate_then_check_100_random(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            state = random_state(rng)
            data = random_gnss_data(rng, state)
            assert np.linalg.norm(gnss_residual(state, data)) < 1e-9

    def test_offset_consistency_in_anchor_frame(self):
        # Adding an offset to the measurement cancels only when the matching
        # displacement is applied in the anchor frame, i.e. the body is moved
        # by the world-frame equivalent of that ENU offset.
        rng = np.random.default_rng(9)
        state = random_state(rng)
        data = random_gnss_data(rng, state)
        offset = rng.normal(size=3)
        shifted_meas = GnssFactorData(
            data.z_hat + offset,
            data.lever_arm,
            data.covariance,
            data.anchor_rotation,
            data.anchor_pose,
        )
        moved_world = NavState(
            RigidTransform3(
                state.pose.rotation,
                state.pose.translation + data.anchor_rotation.inverse().apply(offset),
            ),
            state.velocity,
            state.bias,
        )
        assert np.allclose(gnss_residual(moved_world, shifted_meas), 0.0, atol=1e-9)
        moved_wrong = NavState(
            RigidTransform3(state.pose.rotation, state.pose.translation + offset),
            state.velocity,
            state.bias,
        )
        assert np.linalg.norm(gnss_residual(moved_wrong, shifted_meas)) > 1e-3


class TestGnssJacobian:
    def test_zero_lever_arm_rotation_block(self):
        rng = np.random.default_rng(10)
        state = random_state(rng)
        data = random_gnss_data(rng, state, lever_arm=np.zeros(3))
        j = gnss_jacobian(state, data)
        assert np.allclose(j[:, 0:3], 0.0, atol=1e-12)

    def test_identity_anchor_translation_block(self):
        rng = np.random.default_rng(11)
        state = random_state(rng)
        data = GnssFactorData(
            np.zeros(3), np.zeros(3), np.eye(3), Rotation3.identity(), RigidTransform3.identity()
        )
        j = gnss_jacobian(state, data)
        assert np.allclose(j[:, 3:6], -np.eye(3), atol=1e-12)

    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(12)
        h = 1e-6
        for _ in range(100):
            state = random_state(rng)
            data = random_gnss_data(rng, state)
            j = gnss_jacobian(state, data)
            fd = np.zeros((3, 6))
            for i in range(6):
                d = np.zeros(15)
                d[i] = h
                fd[:, i] = (
                    gnss_residual(perturb_state(state, d), data)
                    - gnss_residual(perturb_state(state, -d), data)
                ) / (2 * h)
            assert np.linalg.norm(fd - j) / max(np.linalg.norm(fd), 1.0) < 1e-5


class TestRobustKernel:
    def test_zero_residual(self):
        assert robust_kernel(0.0, 1.345) == (0.0, 1.0)

    def test_branch_boundary_continuity(self):
        delta = 1.7
        inside, _ = robust_kernel(delta * delta, delta)
        assert abs(inside - delta * delta) < 1e-12
        for eps in (-1e-9, 1e-9):
            s = delta + eps
            cost, _ = robust_kernel(s * s, delta)
            assert abs(cost - delta * delta) < 1e-8

    def test_branch_boundary_derivative(self):
        delta = 1.0
        h = 1e-7
        def cost_of_s(s):
            return robust_kernel(s * s, delta)[0]
        d_minus = (cost_of_s(delta) - cost_of_s(delta - h)) / h
        d_plus = (cost_of_s(delta + h) - cost_of_s(delta)) / h
        assert abs(d_minus - 2 * delta) < 1e-5
        assert abs(d_plus - 2 * delta) < 1e-5

    def test_outside_closed_form(self):
        cost, weight = robust_kernel(4.0, 1.0)  # s = 2 delta
        assert abs(cost - 3.0) < 1e-12
        assert abs(weight - 0.5) < 1e-12

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            robust_kernel(-1.0, 1.0)
        with pytest.raises(ValueError):
            robust_kernel(1.0, 0.0)
