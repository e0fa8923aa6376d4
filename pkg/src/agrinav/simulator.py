"""Deterministic synthesis of field-robot scenarios.

Generates a C1-continuous boustrophedon ground-truth trajectory over crop
rows, then derives IMU samples, stereo landmark observations, and geodetic
GNSS fixes from it, each on its own rate grid.  Every random draw comes from
a purpose-specific stream spawned from the scenario seed, so toggling one
noise source never shifts another's values and identical seed plus config
reproduce identical output.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .config import ConfigError, ConfigMap, load_config_file
from .estimator import GnssFix
from .factors import StereoCameraModel, StereoFrame, StereoObservation
from .geometry import (
    GeodeticPoint,
    RigidTransform3,
    Rotation3,
    enu_to_geodetic,
    so3_exp,
)
from .preintegration import GRAVITY, ImuBias, ImuSample

# Crop-feature heights above ground, meters.
LANDMARK_HEIGHT_RANGE = (0.0, 2.0)
# Landmark field margin around the row bounding box, meters.
FIELD_MARGIN = 4.0
# Reported GNSS sigma floor so zero-noise scenarios still carry a valid
# (strictly positive) uncertainty.
GNSS_SIGMA_FLOOR = 0.01
# Noisy observations with disparity at or below this are dropped.
MIN_DISPARITY = 0.25

# Left camera on the body, looking along body +x (camera z forward, x right,
# y down), mounted at the body origin.
FORWARD_CAMERA_ROTATION = Rotation3(
    np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
)

SensorRecord = Union[ImuSample, StereoFrame, GnssFix]


class InfeasibleGeometryError(ValueError):
    """Scenario geometry that cannot produce a C1 path."""


@dataclass(frozen=True)
class ScenarioConfig:
    rows: int = 2
    row_length_m: float = 50.0
    row_spacing_m: float = 3.0
    speed_mps: float = 1.5
    turn_radius_m: float = 1.5
    imu_rate_hz: float = 200.0
    frame_rate_hz: float = 15.0
    gnss_rate_hz: float = 5.0
    gnss_sigma_m: float = 0.5
    gnss_altitude_bias_m: float = 0.0
    landmark_density_per_m2: float = 0.5
    pixel_sigma_px: float = 1.0
    dropout_rate: float = 0.0
    max_range_m: float = 15.0
    track_gap_s: float = 1.0
    cam_fx: float = 320.0
    cam_fy: float = 320.0
    cam_cx: float = 320.0
    cam_cy: float = 180.0
    cam_baseline_m: float = 0.12
    image_width_px: int = 640
    image_height_px: int = 360
    lever_arm_m: tuple = (0.0, 0.0, 0.3)
    anchor_latitude_deg: float = -33.0
    anchor_longitude_deg: float = -60.9
    anchor_altitude_m: float = 25.0
    world_enu_yaw_deg: float = 20.0
    gyro_noise_density: float = 2e-4
    accel_noise_density: float = 3e-3
    gyro_bias_random_walk: float = 2e-5
    accel_bias_random_walk: float = 5e-4
    initial_gyro_bias: tuple = (0.0, 0.0, 0.0)
    initial_accel_bias: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.rows < 1:
            raise ConfigError("rows must be >= 1")
        for name in ("row_length_m", "speed_mps", "imu_rate_hz", "frame_rate_hz", "gnss_rate_hz"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")

    @property
    def camera(self) -> StereoCameraModel:
        return StereoCameraModel(
            self.cam_fx,
            self.cam_fy,
            self.cam_cx,
            self.cam_cy,
            self.cam_baseline_m,
            RigidTransform3(FORWARD_CAMERA_ROTATION, np.zeros(3)),
        )

    @property
    def anchor_origin(self) -> GeodeticPoint:
        return GeodeticPoint(
            self.anchor_latitude_deg, self.anchor_longitude_deg, self.anchor_altitude_m
        )

    @property
    def world_enu_rotation(self) -> Rotation3:
        """Rotation taking world-frame coordinates into the scenario ENU frame."""
        return so3_exp([0.0, 0.0, math.radians(self.world_enu_yaw_deg)])

    @staticmethod
    def from_file(path) -> "ScenarioConfig":
        return scenario_from_config(load_config_file(path))


def scenario_from_config(cfg: ConfigMap) -> ScenarioConfig:
    kwargs = dict(
        rows=cfg.get_int("rows", 2),
        row_length_m=cfg.get_float("row_length_m", 50.0),
        row_spacing_m=cfg.get_float("row_spacing_m", 3.0),
        speed_mps=cfg.get_float("speed_mps", 1.5),
        turn_radius_m=cfg.get_float("turn_radius_m", 1.5),
        imu_rate_hz=cfg.get_float("imu_rate_hz", 200.0),
        frame_rate_hz=cfg.get_float("frame_rate_hz", 15.0),
        gnss_rate_hz=cfg.get_float("gnss_rate_hz", 5.0),
        gnss_sigma_m=cfg.get_float("gnss_sigma_m", 0.5),
        gnss_altitude_bias_m=cfg.get_float("gnss_altitude_bias_m", 0.0),
        landmark_density_per_m2=cfg.get_float("landmark_density_per_m2", 0.5),
        pixel_sigma_px=cfg.get_float("pixel_sigma_px", 1.0),
        dropout_rate=cfg.get_float("dropout_rate", 0.0),
        max_range_m=cfg.get_float("max_range_m", 15.0),
        track_gap_s=cfg.get_float("track_gap_s", 1.0),
        cam_fx=cfg.get_float("cam_fx", 320.0),
        cam_fy=cfg.get_float("cam_fy", 320.0),
        cam_cx=cfg.get_float("cam_cx", 320.0),
        cam_cy=cfg.get_float("cam_cy", 180.0),
        cam_baseline_m=cfg.get_float("cam_baseline_m", 0.12),
        image_width_px=cfg.get_int("image_width_px", 640),
        image_height_px=cfg.get_int("image_height_px", 360),
        lever_arm_m=tuple(cfg.get_vec3("lever_arm_m", (0.0, 0.0, 0.3))),
        anchor_latitude_deg=cfg.get_float("anchor_latitude_deg", -33.0),
        anchor_longitude_deg=cfg.get_float("anchor_longitude_deg", -60.9),
        anchor_altitude_m=cfg.get_float("anchor_altitude_m", 25.0),
        world_enu_yaw_deg=cfg.get_float("world_enu_yaw_deg", 20.0),
        gyro_noise_density=cfg.get_float("gyro_noise_density", 2e-4),
        accel_noise_density=cfg.get_float("accel_noise_density", 3e-3),
        gyro_bias_random_walk=cfg.get_float("gyro_bias_random_walk", 2e-5),
        accel_bias_random_walk=cfg.get_float("accel_bias_random_walk", 5e-4),
        initial_gyro_bias=tuple(cfg.get_vec3("initial_gyro_bias", (0.0, 0.0, 0.0))),
        initial_accel_bias=tuple(cfg.get_vec3("initial_accel_bias", (0.0, 0.0, 0.0))),
        seed=cfg.get_int("seed", 0),
    )
    cfg.reject_unknown_keys()
    return ScenarioConfig(**kwargs)


@dataclass(frozen=True, eq=False)
class GroundTruthSample:
    timestamp: float
    pose: RigidTransform3
    velocity: np.ndarray
    angular_velocity: np.ndarray  # body frame


@dataclass(frozen=True)
class _Segment:
    t0: float
    t1: float
    x0: float
    y0: float
    heading0: float
    turn_rate: float  # rad/s, 0 for straight segments


class GroundTruthTrajectory:
    """Piecewise-analytic boustrophedon path; body x along velocity, z up."""

    def __init__(self, segments: list[_Segment], speed: float):
        self._segments = segments
        self._starts = [s.t0 for s in segments]
        self.speed = speed
        self.duration = segments[-1].t1

    def _segment_at(self, t: float) -> _Segment:
        i = bisect_right(self._starts, t) - 1
        return self._segments[max(i, 0)]

    def state_at(self, t: float):
        if t < -1e-9 or t > self.duration + 1e-9:
            raise ValueError(f"time {t} outside [0, {self.duration}]")
        seg = self._segment_at(t)
        tau = t - seg.t0
        v = self.speed
        if seg.turn_rate == 0.0:
            heading = seg.heading0
            x = seg.x0 + v * tau * math.cos(heading)
            y = seg.y0 + v * tau * math.sin(heading)
            accel = np.zeros(3)
        else:
            w = seg.turn_rate
            r = v / abs(w)
            s = math.copysign(1.0, w)
            cx = seg.x0 - r * s * math.sin(seg.heading0)
            cy = seg.y0 + r * s * math.cos(seg.heading0)
            heading = seg.heading0 + w * tau
            x = cx + r * s * math.sin(heading)
            y = cy - r * s * math.cos(heading)
            accel = v * w * np.array([-math.sin(heading), math.cos(heading), 0.0])
        rot = so3_exp([0.0, 0.0, heading])
        pos = np.array([x, y, 0.0])
        vel = v * np.array([math.cos(heading), math.sin(heading), 0.0])
        omega_body = np.array([0.0, 0.0, seg.turn_rate])
        return RigidTransform3(rot, pos), vel, omega_body, accel

    def sample_at(self, t: float) -> GroundTruthSample:
        pose, vel, omega, _ = self.state_at(t)
        return GroundTruthSample(t, pose, vel, omega)

    def grid(self, rate: float) -> np.ndarray:
        n = int(math.floor(self.duration * rate + 1e-9))
        return np.arange(n + 1) / rate

    def samples(self, rate: float) -> list[GroundTruthSample]:
        return [self.sample_at(t) for t in self.grid(rate)]


def generate_trajectory(config: ScenarioConfig) -> GroundTruthTrajectory:
    """Rows joined by constant-rate turns toward increasing y.

    Each transition is two quarter turns of the configured radius with a
    straight crossing in between when the spacing exceeds the turn diameter.
    """
    v = config.speed_mps
    r = config.turn_radius_m
    spacing = config.row_spacing_m
    if config.rows > 1:
        if r <= 0.0:
            raise InfeasibleGeometryError("turn radius must be positive")
        if r > spacing / 2.0 + 1e-12:
            raise InfeasibleGeometryError(
                f"turn radius {r} m exceeds half the row spacing {spacing} m"
            )

    segments: list[_Segment] = []
    t = 0.0
    x, y, heading = 0.0, 0.0, 0.0

    def add(duration: float, turn_rate: float):
        nonlocal t, x, y, heading
        segments.append(_Segment(t, t + duration, x, y, heading, turn_rate))
        t += duration
        if turn_rate == 0.0:
            x += v * duration * math.cos(heading)
            y += v * duration * math.sin(heading)
        else:
            w = turn_rate
            rr = v / abs(w)
            s = math.copysign(1.0, w)
            cx = x - rr * s * math.sin(heading)
            cy = y + rr * s * math.cos(heading)
            heading = heading + w * duration
            x = cx + rr * s * math.sin(heading)
            y = cy - rr * s * math.cos(heading)

    quarter = (math.pi / 2.0) * r / v
    cross = (spacing - 2.0 * r) / v
    for i in range(config.rows):
        add(config.row_length_m / v, 0.0)
        if i + 1 < config.rows:
            sign = 1.0 if i % 2 == 0 else -1.0
            add(quarter, sign * v / r)
            if cross > 1e-12:
                add(cross, 0.0)
            add(quarter, sign * v / r)
    return GroundTruthTrajectory(segments, v)


def generate_landmarks(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform landmark field over the row bounding box plus a margin."""
    x_lo, x_hi = -FIELD_MARGIN, config.row_length_m + FIELD_MARGIN
    y_span = (config.rows - 1) * config.row_spacing_m
    y_lo, y_hi = -FIELD_MARGIN, y_span + FIELD_MARGIN
    area = (x_hi - x_lo) * (y_hi - y_lo)
    count = max(int(round(config.landmark_density_per_m2 * area)), 10)
    pts = np.empty((count, 3))
    pts[:, 0] = rng.uniform(x_lo, x_hi, size=count)
    pts[:, 1] = rng.uniform(y_lo, y_hi, size=count)
    pts[:, 2] = rng.uniform(*LANDMARK_HEIGHT_RANGE, size=count)
    return pts


def synthesize_imu(
    traj: GroundTruthTrajectory,
    rate: float,
    rng: np.random.Generator,
    gyro_noise_density: float = 0.0,
    accel_noise_density: float = 0.0,
    gyro_bias_random_walk: float = 0.0,
    accel_bias_random_walk: float = 0.0,
    initial_bias: ImuBias | None = None,
    gravity=GRAVITY,
) -> list[ImuSample]:
    """IMU stream: body rates plus bias plus white noise; specific force is
    the body-frame world acceleration minus gravity.

    Densities of zero disable the corresponding source without consuming
    draws from the others (one child stream per source).
    """
    gravity = np.asarray(gravity, dtype=float)
    bias = initial_bias or ImuBias.zero()
    rng_gyro, rng_accel, rng_bg, rng_ba = rng.spawn(4)

    times = traj.grid(rate)
    dt = 1.0 / rate
    sqrt_rate = math.sqrt(rate)
    sqrt_dt = math.sqrt(dt)
    bg = np.array(bias.gyro_bias)
    ba = np.array(bias.accel_bias)
    samples = []
    for t in times:
        pose, _, omega_body, accel_world = traj.state_at(t)
        gyro = omega_body + bg
        accel = pose.rotation.matrix.T @ (accel_world - gravity) + ba
        if gyro_noise_density > 0.0:
            gyro = gyro + gyro_noise_density * sqrt_rate * rng_gyro.standard_normal(3)
        if accel_noise_density > 0.0:
            accel = accel + accel_noise_density * sqrt_rate * rng_accel.standard_normal(3)
        samples.append(ImuSample(float(t), gyro, accel))
        if gyro_bias_random_walk > 0.0:
            bg = bg + gyro_bias_random_walk * sqrt_dt * rng_bg.standard_normal(3)
        if accel_bias_random_walk > 0.0:
            ba = ba + accel_bias_random_walk * sqrt_dt * rng_ba.standard_normal(3)
    return samples


def synthesize_stereo(
    traj: GroundTruthTrajectory,
    landmarks: np.ndarray,
    cam: StereoCameraModel,
    rate: float,
    rng: np.random.Generator,
    pixel_sigma: float = 1.0,
    dropout_rate: float = 0.0,
    image_width: int = 640,
    image_height: int = 360,
    max_range: float = 15.0,
    depth_min: float = 0.05,
    track_gap_s: float = 1.0,
) -> tuple[list[StereoFrame], np.ndarray]:
    """Project the landmark field into every stereo frame.

    Only landmarks in front of the camera, within range, and inside both
    image bounds are emitted; isotropic pixel noise is added per component
    and observations may be dropped at ``dropout_rate``.

    Association is perfect only along continuous tracks: a landmark that
    stays out of view longer than ``track_gap_s`` resurfaces under a fresh
    id, the way repetitive field texture defeats re-recognition of points
    seen on an earlier pass.  Returns the frame stream (observation ids are
    track ids) plus the true position of each track id.
    """
    rng_pix, rng_drop = rng.spawn(2)
    r_cb = cam.camera_from_body.rotation.matrix
    t_cb = cam.camera_from_body.translation
    ids = np.arange(landmarks.shape[0])
    last_seen = np.full(landmarks.shape[0], -np.inf)
    track_of = np.full(landmarks.shape[0], -1, dtype=int)
    track_points: list[np.ndarray] = []
    frames = []
    for t in traj.grid(rate):
        pose, _, _, _ = traj.state_at(t)
        body = (landmarks - pose.translation) @ pose.rotation.matrix
        pc = body @ r_cb.T + t_cb
        z = pc[:, 2]
        rng_ok = np.linalg.norm(pc, axis=1) <= max_range
        mask = (z > depth_min) & rng_ok
        idx = ids[mask]
        pcv = pc[mask]
        u_left = cam.fx * pcv[:, 0] / pcv[:, 2] + cam.cx
        v = cam.fy * pcv[:, 1] / pcv[:, 2] + cam.cy
        u_right = u_left - cam.fx * cam.baseline / pcv[:, 2]
        if pixel_sigma > 0.0:
            noise = pixel_sigma * rng_pix.standard_normal((len(idx), 3))
            u_left = u_left + noise[:, 0]
            v = v + noise[:, 1]
            u_right = u_right + noise[:, 2]
        keep = (
            (u_left >= 0.0)
            & (u_left < image_width)
            & (u_right >= 0.0)
            & (u_right < image_width)
            & (v >= 0.0)
            & (v < image_height)
            & (u_left - u_right > MIN_DISPARITY)
        )
        if dropout_rate > 0.0:
            keep &= rng_drop.uniform(size=len(idx)) >= dropout_rate
        obs = []
        for i, ul, vv, ur in zip(idx[keep], u_left[keep], v[keep], u_right[keep]):
            if t - last_seen[i] > track_gap_s:
                track_of[i] = len(track_points)
                track_points.append(landmarks[i])
            last_seen[i] = t
            obs.append((int(track_of[i]), StereoObservation(float(ul), float(vv), float(ur))))
        frames.append(StereoFrame(float(t), tuple(obs)))
    points = np.array(track_points) if track_points else np.zeros((0, 3))
    return frames, points


def synthesize_gnss(
    traj: GroundTruthTrajectory,
    rate: float,
    rng: np.random.Generator,
    lever_arm,
    origin: GeodeticPoint,
    world_enu_rotation: Rotation3,
    sigma: float = 0.5,
    altitude_bias: float = 0.0,
) -> list[GnssFix]:
    """Geodetic fixes of the antenna position.

    The true antenna position is mapped into the scenario ENU frame, given
    isotropic noise of ``sigma`` plus an Up-axis bias, and converted to
    geodetic coordinates about ``origin``.  The reported per-axis sigma is
    the configured value (never the bias), floored at ``GNSS_SIGMA_FLOOR``
    so the fix invariant (positive sigma) holds for noise-free scenarios.
    """
    lever_arm = np.asarray(lever_arm, dtype=float)
    rng_noise = rng.spawn(1)[0]
    reported = max(sigma, GNSS_SIGMA_FLOOR)
    r_ew = world_enu_rotation.matrix
    fixes = []
    for t in traj.grid(rate):
        pose, _, _, _ = traj.state_at(t)
        antenna = pose.rotation.matrix @ lever_arm + pose.translation
        enu = r_ew @ antenna
        if sigma > 0.0:
            enu = enu + sigma * rng_noise.standard_normal(3)
        enu = enu + np.array([0.0, 0.0, altitude_bias])
        fixes.append(
            GnssFix(float(t), enu_to_geodetic(enu, origin), np.full(3, reported))
        )
    return fixes


@dataclass(eq=False)
class ScenarioData:
    """All streams of one simulated scenario.

    ``landmarks`` holds the true position of every observation track id
    (a physical point re-tracked after a visibility gap appears once per
    track); ``field_points`` is the underlying physical landmark field.
    """

    config: ScenarioConfig
    trajectory: GroundTruthTrajectory
    landmarks: np.ndarray
    field_points: np.ndarray
    imu: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    gnss: list = field(default_factory=list)

    @property
    def camera(self) -> StereoCameraModel:
        return self.config.camera

    def records(self) -> list[SensorRecord]:
        return merge_records(self.imu, self.frames, self.gnss)

    def ground_truth_trajectory_samples(self) -> list[GroundTruthSample]:
        return self.trajectory.samples(self.config.frame_rate_hz)


def merge_records(imu, frames, gnss) -> list[SensorRecord]:
    """Timestamp-ordered interleaving with a stable per-kind tie order."""
    order = {ImuSample: 0, StereoFrame: 1, GnssFix: 2}
    records = list(imu) + list(frames) + list(gnss)
    records.sort(key=lambda r: (r.timestamp, order[type(r)]))
    return records


def simulate_scenario(config: ScenarioConfig, seed: int | None = None) -> ScenarioData:
    """Run the full synthesis pipeline for one scenario."""
    traj = generate_trajectory(config)
    root = np.random.default_rng(config.seed if seed is None else seed)
    rng_landmarks, rng_imu, rng_stereo, rng_gnss = root.spawn(4)
    field_points = generate_landmarks(config, rng_landmarks)
    imu = synthesize_imu(
        traj,
        config.imu_rate_hz,
        rng_imu,
        gyro_noise_density=config.gyro_noise_density,
        accel_noise_density=config.accel_noise_density,
        gyro_bias_random_walk=config.gyro_bias_random_walk,
        accel_bias_random_walk=config.accel_bias_random_walk,
        initial_bias=ImuBias(np.array(config.initial_accel_bias), np.array(config.initial_gyro_bias)),
    )
    frames, track_points = synthesize_stereo(
        traj,
        field_points,
        config.camera,
        config.frame_rate_hz,
        rng_stereo,
        pixel_sigma=config.pixel_sigma_px,
        dropout_rate=config.dropout_rate,
        image_width=config.image_width_px,
        image_height=config.image_height_px,
        max_range=config.max_range_m,
        track_gap_s=config.track_gap_s,
    )
    gnss = synthesize_gnss(
        traj,
        config.gnss_rate_hz,
        rng_gnss,
        config.lever_arm_m,
        config.anchor_origin,
        config.world_enu_rotation,
        sigma=config.gnss_sigma_m,
        altitude_bias=config.gnss_altitude_bias_m,
    )
    return ScenarioData(config, traj, track_points, field_points, imu, frames, gnss)


def corrupt_trajectory_positions(
    rows: list[tuple[float, np.ndarray, np.ndarray]], sigma: float, seed: int
) -> list[tuple[float, np.ndarray, np.ndarray]]:
    """Add isotropic position noise to parsed trajectory rows.

    Rows are (timestamp, position, quaternion) as read from a TUM file;
    orientations pass through untouched.  Deterministic per seed; a sigma of
    zero returns the rows unchanged.
    """
    if sigma < 0.0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0.0:
        return list(rows)
    rng = np.random.default_rng(seed)
    out = []
    for t, pos, quat in rows:
        out.append((t, pos + sigma * rng.standard_normal(3), quat))
    return out
