import math

import numpy as np
import pytest

from agrinav.geometry import RigidTransform3, Rotation3, so3_exp, so3_log
from agrinav.preintegration import (
    GRAVITY,
    ImuBias,
    ImuNoiseModel,
    ImuSample,
    NavState,
    PreintegratedImu,
    compose,
    correct_bias,
    integrate,
    predict,
)

NOISE = ImuNoiseModel(1e-4, 1e-3, 1e-5, 1e-4)


def make_samples(rate, duration, gyro_fn, accel_fn, t0=0.0):
    n = int(round(duration * rate))
    return [
        ImuSample(t0 + k / rate, gyro_fn(t0 + k / rate), accel_fn(t0 + k / rate))
        for k in range(n)
    ]


def wobble_samples(rng, rate=200.0, duration=1.0):
    """Smooth, rich motion so every bias Jacobian block is exercised."""
    w0 = rng.uniform(-0.5, 0.5, size=3)
    a0 = rng.uniform(-2.0, 2.0, size=3)
    gyro = lambda t: w0 + 0.3 * np.array([math.sin(2 * t), math.cos(3 * t), math.sin(t)])
    accel = lambda t: a0 + np.array([math.cos(t), math.sin(2 * t), 9.81 + 0.2 * math.sin(t)])
    return make_samples(rate, duration, gyro, accel)


class TestIntegrate:
    def test_bias_cancelled_single_sample(self):
        bias = ImuBias([0.1, -0.2, 0.3], [0.01, 0.02, -0.03])
        sample = ImuSample(0.0, bias.gyro_bias, bias.accel_bias)
        pre = integrate([sample], bias, NOISE, end_time=0.01)
        assert np.allclose(pre.delta_rotation.matrix, np.eye(3))
        assert np.allclose(pre.delta_velocity, 0.0)
        assert np.allclose(pre.delta_position, 0.0)
        assert abs(pre.delta_t - 0.01) < 1e-12

    def test_stationary_gravity_reaction(self):
        samples = make_samples(
            200.0, 1.0, lambda t: np.zeros(3), lambda t: np.array([0.0, 0.0, 9.81])
        )
        pre = integrate(samples, ImuBias.zero(), NOISE, end_time=1.0)
        assert np.allclose(pre.delta_velocity, [0.0, 0.0, 9.81], atol=1e-6)
        assert np.allclose(pre.delta_position, [0.0, 0.0, 4.905], atol=1e-6)
        assert abs(pre.delta_t - 1.0) < 1e-9

    def test_constant_rotation_rate(self):
        samples = make_samples(
            200.0, 1.0, lambda t: np.array([0.0, 0.0, 0.1]), lambda t: np.zeros(3)
        )
        pre = integrate(samples, ImuBias.zero(), NOISE, end_time=1.0)
        expected = so3_exp([0.0, 0.0, 0.1]).matrix
        assert np.allclose(pre.delta_rotation.matrix, expected, atol=1e-9)

    def test_delta_t_sums_intervals(self):
        rng = np.random.default_rng(0)
        samples = wobble_samples(rng, duration=0.5)
        pre = integrate(samples, ImuBias.zero(), NOISE, end_time=0.5)
        assert abs(pre.delta_t - 0.5) < 1e-9

    def test_empty_list_raises(self):
        with pytest.raises(ValueError):
            integrate([], ImuBias.zero(), NOISE)

    def test_non_monotone_raises(self):
        s = [
            ImuSample(0.0, np.zeros(3), np.zeros(3)),
            ImuSample(0.0, np.zeros(3), np.zeros(3)),
        ]
        with pytest.raises(ValueError):
            integrate(s, ImuBias.zero(), NOISE)

    def test_single_sample_without_end_time_raises(self):
        with pytest.raises(ValueError):
            integrate([ImuSample(0.0, np.zeros(3), np.zeros(3))], ImuBias.zero(), NOISE)

    def test_covariance_symmetric_psd_after_every_step(self):
        rng = np.random.default_rng(1)
        samples = wobble_samples(rng, rate=100.0, duration=0.5)
        for n in range(2, len(samples) + 1):
            pre = integrate(samples[:n], ImuBias.zero(), NOISE)
            cov = pre.covariance
            assert np.linalg.norm(cov - cov.T) < 1e-12
            assert np.linalg.eigvalsh(cov).min() > -1e-10

    def test_covariance_scales_quadratically_with_noise(self):
        rng = np.random.default_rng(2)
        samples = wobble_samples(rng, duration=0.5)
        doubled = ImuNoiseModel(
            2 * NOISE.gyro_noise_density,
            2 * NOISE.accel_noise_density,
            NOISE.gyro_bias_random_walk,
            NOISE.accel_bias_random_walk,
        )
        c1 = integrate(samples, ImuBias.zero(), NOISE, end_time=0.5).covariance
        c2 = integrate(samples, ImuBias.zero(), doubled, end_time=0.5).covariance
        assert np.allclose(c2, 4.0 * c1, rtol=1e-6, atol=1e-18)

    def test_concatenation_matches_composition(self):
        rng = np.random.default_rng(3)
        samples = wobble_samples(rng, duration=1.0)
        half = len(samples) // 2
        t_mid = samples[half].timestamp
        full = integrate(samples, ImuBias.zero(), NOISE, end_time=1.0)
        first = integrate(samples[:half], ImuBias.zero(), NOISE, end_time=t_mid)
        second = integrate(samples[half:], ImuBias.zero(), NOISE, end_time=1.0)
        chained = compose(first, second)
        assert np.allclose(
            chained.delta_rotation.matrix, full.delta_rotation.matrix, atol=1e-9
        )
        assert np.allclose(chained.delta_velocity, full.delta_velocity, atol=1e-9)
        assert np.allclose(chained.delta_position, full.delta_position, atol=1e-9)
        assert abs(chained.delta_t - full.delta_t) < 1e-9

    def test_bias_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(4)
        samples = wobble_samples(rng, rate=100.0, duration=0.6)
        bias = ImuBias.zero()
        base = integrate(samples, bias, NOISE, end_time=0.6)
        h = 1e-5

        fd_r = np.zeros((3, 3))
        fd_vg = np.zeros((3, 3))
        fd_pg = np.zeros((3, 3))
        fd_va = np.zeros((3, 3))
        fd_pa = np.zeros((3, 3))
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            plus = integrate(samples, ImuBias(np.zeros(3), e), NOISE, end_time=0.6)
            minus = integrate(samples, ImuBias(np.zeros(3), -e), NOISE, end_time=0.6)
            fd_r[:, i] = (
                so3_log(base.delta_rotation.inverse() @ plus.delta_rotation)
                - so3_log(base.delta_rotation.inverse() @ minus.delta_rotation)
            ) / (2 * h)
            fd_vg[:, i] = (plus.delta_velocity - minus.delta_velocity) / (2 * h)
            fd_pg[:, i] = (plus.delta_position - minus.delta_position) / (2 * h)
            plus = integrate(samples, ImuBias(e, np.zeros(3)), NOISE, end_time=0.6)
            minus = integrate(samples, ImuBias(-e, np.zeros(3)), NOISE, end_time=0.6)
            fd_va[:, i] = (plus.delta_velocity - minus.delta_velocity) / (2 * h)
            fd_pa[:, i] = (plus.delta_position - minus.delta_position) / (2 * h)

        def rel(a, b):
            return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)

        assert rel(fd_r, base.d_rotation_d_gyro_bias) < 1e-5
        assert rel(fd_vg, base.d_velocity_d_gyro_bias) < 1e-5
        assert rel(fd_pg, base.d_position_d_gyro_bias) < 1e-5
        assert rel(fd_va, base.d_velocity_d_accel_bias) < 1e-5
        assert rel(fd_pa, base.d_position_d_accel_bias) < 1e-5


class TestCorrectBias:
    def test_same_bias_is_identity(self):
        rng = np.random.default_rng(5)
        pre = integrate(wobble_samples(rng), ImuBias.zero(), NOISE, end_time=1.0)
        same = correct_bias(pre, ImuBias.zero())
        assert np.allclose(same.delta_rotation.matrix, pre.delta_rotation.matrix)
        assert np.allclose(same.delta_velocity, pre.delta_velocity)
        assert np.allclose(same.delta_position, pre.delta_position)

    def test_small_delta_matches_reintegration(self):
        rng = np.random.default_rng(6)
        samples = wobble_samples(rng)
        pre = integrate(samples, ImuBias.zero(), NOISE, end_time=1.0)
        new_bias = ImuBias(np.full(3, 1e-4), np.full(3, 1e-4))
        corrected = correct_bias(pre, new_bias)
        fresh = integrate(samples, new_bias, NOISE, end_time=1.0)
        assert np.allclose(
            corrected.delta_rotation.matrix, fresh.delta_rotation.matrix, atol=1e-6
        )
        assert np.allclose(corrected.delta_velocity, fresh.delta_velocity, atol=1e-6)
        assert np.allclose(corrected.delta_position, fresh.delta_position, atol=1e-6)

    def test_large_delta_shows_first_order_limit(self):
        rng = np.random.default_rng(7)
        samples = wobble_samples(rng)
        pre = integrate(samples, ImuBias.zero(), NOISE, end_time=1.0)
        new_bias = ImuBias(np.full(3, 0.5), np.full(3, 0.5))
        corrected = correct_bias(pre, new_bias)
        fresh = integrate(samples, new_bias, NOISE, end_time=1.0)
        gap = np.linalg.norm(
            so3_log(corrected.delta_rotation.inverse() @ fresh.delta_rotation)
        )
        assert gap > 1e-6


class TestPredict:
    def test_identity_preintegration_returns_prev(self):
        rng = np.random.default_rng(8)
        w = rng.normal(size=3)
        prev = NavState(
            RigidTransform3(so3_exp(w), rng.normal(size=3)), rng.normal(size=3), ImuBias.zero()
        )
        out = predict(prev, PreintegratedImu.identity(), GRAVITY)
        assert np.allclose(out.pose.rotation.matrix, prev.pose.rotation.matrix, atol=1e-9)
        assert np.allclose(out.pose.translation, prev.pose.translation, atol=1e-7)
        assert np.allclose(out.velocity, prev.velocity, atol=1e-7)

    def test_stationary_gravity_cancellation(self):
        samples = make_samples(
            200.0, 1.0, lambda t: np.zeros(3), lambda t: np.array([0.0, 0.0, 9.81])
        )
        pre = integrate(samples, ImuBias.zero(), NOISE, end_time=1.0)
        prev = NavState(RigidTransform3.identity(), np.zeros(3), ImuBias.zero())
        out = predict(prev, pre, GRAVITY)
        assert np.allclose(out.velocity, 0.0, atol=1e-6)
        assert np.allclose(out.pose.translation, 0.0, atol=1e-6)
        assert np.allclose(out.pose.rotation.matrix, np.eye(3), atol=1e-9)
