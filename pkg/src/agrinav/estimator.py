"""Sliding-window fusion of stereo landmark observations, preintegrated IMU
increments, and GNSS position fixes.

The estimator keeps the last N keyframes and the landmarks they observe as
free variables, holds older keyframes constant, and minimizes the robustified
sum of the three measurement families with Levenberg-Marquardt.  GNSS fixes
are temporally associated to keyframes, expressed in a local ENU frame whose
rotation is estimated once from the first associated fixes and then frozen.

State perturbations match :mod:`agrinav.factors`: right-perturbed rotations,
additive world-frame translation, additive velocity/bias/landmark updates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from threadpoolctl import threadpool_limits

from .config import ConfigMap, load_config_file
from .evaluation import Trajectory, positions_at
from .factors import (
    DEPTH_MIN,
    GnssFactorData,
    Landmark,
    NavState,
    StereoCameraModel,
    StereoFrame,
    StereoObservation,
    gnss_antenna_position,
    inertial_jacobians,
    inertial_residual,
    robust_kernel,
    stereo_back_project,
)
from .geometry import (
    DegenerateGeometryError,
    GeodeticPoint,
    RigidTransform3,
    Rotation3,
    geodetic_to_enu,
    rotation_from_correlation,
    skew,
    skew_batch,
    so3_exp,
    so3_log,
)
from .preintegration import (
    GRAVITY,
    ImuBias,
    ImuNoiseModel,
    ImuSample,
    PreintegratedImu,
    integrate,
    predict,
)

# Cost charged per observation that a trial step pushes behind the camera;
# large enough that such steps are always rejected.
_BEHIND_CAMERA_PENALTY = 1e8


class SolverFailureError(RuntimeError):
    """Optimization could not proceed (indefinite system or divergence)."""


class StreamGapError(ValueError):
    """Sensor stream contained a gap larger than the configured maximum."""


class LowObservabilityWarning(UserWarning):
    """Geometry determines the requested quantity only weakly."""


@dataclass(frozen=True, eq=False)
class GnssFix:
    """One geodetic fix with its per-axis ENU standard deviations."""

    timestamp: float
    geodetic: GeodeticPoint
    sigma_enu: np.ndarray

    def __post_init__(self):
        sigma = np.array(self.sigma_enu, dtype=float)
        if sigma.shape != (3,) or np.any(sigma <= 0.0):
            raise ValueError("sigma_enu must be three positive values")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma_enu", sigma)


@dataclass(eq=False)
class Keyframe:
    id: int
    timestamp: float
    state: NavState
    observations: tuple  # of (landmark_id, StereoObservation)
    preintegration_from_prev: PreintegratedImu | None = None
    gnss: GnssFix | None = None


@dataclass(frozen=True, eq=False)
class EnuAnchor:
    """Origin and frozen alignment of the local ENU measurement frame."""

    origin: GeodeticPoint
    rotation: Rotation3  # world displacements -> ENU displacements
    anchor_keyframe_pose: RigidTransform3  # frozen body pose at anchor epoch


@dataclass(frozen=True)
class EstimatorConfig:
    window_size: int = 10
    association_threshold_s: float = 0.05
    keyframe_interval_s: float = 0.5
    max_stream_gap_s: float = 1.0
    anchor_fix_count: int = 20
    pixel_sigma_px: float = 1.0
    huber_delta_visual: float = math.sqrt(5.991)
    huber_delta_gnss: float = math.sqrt(7.815)
    gyro_noise_density: float = 2e-4
    accel_noise_density: float = 3e-3
    gyro_bias_random_walk: float = 2e-5
    accel_bias_random_walk: float = 5e-4
    gravity: tuple = (0.0, 0.0, -9.81)
    lever_arm_m: tuple = (0.0, 0.0, 0.3)
    max_iterations: int = 15
    relative_cost_decrease: float = 1e-6
    step_norm_tolerance: float = 1e-8
    # The anchor alignment is deferred until the fix geometry supports a yaw
    # estimate at roughly this accuracy (predicted as sigma over baseline
    # spread); fixes keep buffering in the meantime.
    anchor_yaw_gate_rad: float = 0.004

    @property
    def noise_model(self) -> ImuNoiseModel:
        return ImuNoiseModel(
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_random_walk,
            self.accel_bias_random_walk,
        )

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.asarray(self.gravity, dtype=float)

    @property
    def lever_arm(self) -> np.ndarray:
        return np.asarray(self.lever_arm_m, dtype=float)

    @staticmethod
    def from_file(path) -> "EstimatorConfig":
        return estimator_config_from_config(load_config_file(path))


def estimator_config_from_config(cfg: ConfigMap) -> EstimatorConfig:
    kwargs = dict(
        window_size=cfg.get_int("window_size", 10),
        association_threshold_s=cfg.get_float("association_threshold_s", 0.05),
        keyframe_interval_s=cfg.get_float("keyframe_interval_s", 0.5),
        max_stream_gap_s=cfg.get_float("max_stream_gap_s", 1.0),
        anchor_fix_count=cfg.get_int("anchor_fix_count", 20),
        pixel_sigma_px=cfg.get_float("pixel_sigma_px", 1.0),
        huber_delta_visual=cfg.get_float("huber_delta_visual", math.sqrt(5.991)),
        huber_delta_gnss=cfg.get_float("huber_delta_gnss", math.sqrt(7.815)),
        gyro_noise_density=cfg.get_float("gyro_noise_density", 2e-4),
        accel_noise_density=cfg.get_float("accel_noise_density", 3e-3),
        gyro_bias_random_walk=cfg.get_float("gyro_bias_random_walk", 2e-5),
        accel_bias_random_walk=cfg.get_float("accel_bias_random_walk", 5e-4),
        gravity=tuple(cfg.get_vec3("gravity", (0.0, 0.0, -9.81))),
        lever_arm_m=tuple(cfg.get_vec3("lever_arm_m", (0.0, 0.0, 0.3))),
        max_iterations=cfg.get_int("max_iterations", 15),
        relative_cost_decrease=cfg.get_float("relative_cost_decrease", 1e-6),
        step_norm_tolerance=cfg.get_float("step_norm_tolerance", 1e-8),
        anchor_yaw_gate_rad=cfg.get_float("anchor_yaw_gate_rad", 0.004),
    )
    cfg.reject_unknown_keys()
    return EstimatorConfig(**kwargs)


# ---------------------------------------------------------------------------
# GNSS-keyframe association and anchor bootstrap.


def associate_gnss(
    keyframe_times, fixes: list[GnssFix], threshold: float
) -> tuple[dict[int, int], list[int]]:
    """Assign fixes to keyframes by temporal proximity.

    A fix is considered only for its nearest keyframe; it wins the keyframe
    iff it lies within ``threshold`` and is the temporally closest candidate
    (ties go to the earlier fix).  Returns the keyframe->fix index map and
    the indices of discarded fixes.
    """
    kt = np.asarray(keyframe_times, dtype=float)
    ft = np.array([f.timestamp for f in fixes])
    if kt.size > 1 and np.any(np.diff(kt) <= 0.0):
        raise ValueError("keyframe timestamps must be sorted strictly increasing")
    if ft.size > 1 and np.any(np.diff(ft) < 0.0):
        raise ValueError("fix timestamps must be sorted")
    best: dict[int, tuple[float, int]] = {}
    for j, t in enumerate(ft):
        right = int(np.searchsorted(kt, t))
        left = max(right - 1, 0)
        right = min(right, kt.size - 1)
        i = right if abs(kt[right] - t) < abs(kt[left] - t) else left
        dt = abs(float(kt[i]) - float(t))
        if dt <= threshold and (i not in best or dt < best[i][0]):
            best[i] = (dt, j)
    assignment = {i: j for i, (_, j) in best.items()}
    taken = set(assignment.values())
    discarded = [j for j in range(len(fixes)) if j not in taken]
    return assignment, discarded


def _gravity_augmented_rotation(
    source_centered: np.ndarray, target_centered: np.ndarray
) -> Rotation3:
    """Best-fit rotation with the shared vertical added as a virtual pair.

    Both frames are gravity-aligned (z up), so the correlation gets a
    z-to-Up term weighted like the positional spread.  This pins the roll
    about the trajectory direction that straight segments leave free.
    """
    corr = target_centered.T @ source_centered
    weight = float(np.sum(target_centered**2) + np.sum(source_centered**2)) / 2.0
    weight = max(weight, 1e-12)
    corr = corr + weight * np.outer([0.0, 0.0, 1.0], [0.0, 0.0, 1.0])
    rot, _ = rotation_from_correlation(corr)
    return rot


def bootstrap_anchor(
    fixes: list[GnssFix],
    keyframe_poses: list[RigidTransform3],
    lever_arm,
    count: int = 20,
) -> EnuAnchor:
    """Fix the ENU anchor from the first ``count`` associated fixes.

    The origin is the first fix; the rotation is the rigid (no-scale)
    alignment of world-frame antenna displacements onto ENU displacements,
    with the gravity direction as a tie-break so near-straight segments
    still determine the roll.  The first keyframe's pose is frozen as the
    anchor epoch pose.
    """
    if len(fixes) < count or len(keyframe_poses) < count:
        raise ValueError(f"need at least {count} associated fixes to bootstrap")
    if len(fixes) != len(keyframe_poses):
        raise ValueError("fixes and keyframe poses must pair up")
    lever_arm = np.asarray(lever_arm, dtype=float)
    origin = fixes[0].geodetic
    enu = np.array([geodetic_to_enu(f.geodetic, origin) for f in fixes[:count]])
    antenna = np.array(
        [gnss_antenna_position(p, lever_arm) for p in keyframe_poses[:count]]
    )
    enu_c = enu - enu.mean(axis=0)
    ant_c = antenna - antenna.mean(axis=0)
    spread = np.linalg.svd(ant_c, compute_uv=False)
    if spread[0] < 1e-6:
        raise DegenerateGeometryError(
            "anchor fixes are coincident; cannot determine the ENU rotation"
        )
    if spread[1] < 1e-6 * spread[0]:
        warnings.warn(
            "anchor trajectory is nearly straight; rotation about it is fixed "
            "only by the gravity tie-break",
            LowObservabilityWarning,
        )
    rotation = _gravity_augmented_rotation(ant_c, enu_c)
    return EnuAnchor(origin, rotation, keyframe_poses[0])


# ---------------------------------------------------------------------------
# Problem construction.


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 15
    relative_cost_decrease: float = 1e-6
    step_norm_tolerance: float = 1e-8
    damping_init_ratio: float = 1e-4
    damping_factor: float = 10.0
    max_rejections: int = 25


@dataclass(eq=False)
class SlidingWindowProblem:
    """One local bundle-adjustment problem over the last N keyframes."""

    window: list
    fixed: list
    landmark_ids: list
    landmarks: dict
    vis_window: list  # (window slot, lm indices, obs array)
    vis_fixed: list  # (fixed pose, lm indices, obs array)
    inertial_pairs: list  # (slot a, slot b, PreintegratedImu)
    gnss_factors: list  # (slot, GnssFactorData)
    camera: StereoCameraModel
    gravity: np.ndarray
    pixel_sigma: float
    huber_delta_visual: float
    huber_delta_gnss: float
    bias_walk_sigmas: tuple  # (gyro rw density, accel rw density)
    fix_oldest_pose: bool
    settings: SolverSettings


def build_problem(
    keyframes: list[Keyframe],
    landmarks: dict[int, Landmark],
    anchor: EnuAnchor | None,
    camera: StereoCameraModel,
    config: EstimatorConfig,
    window_size: int | None = None,
    use_gnss: bool = True,
) -> SlidingWindowProblem:
    """Assemble the factor sets over the trailing window.

    Inertial factors link consecutive in-window keyframes; visual factors
    cover every observation of a selected landmark from the window and from
    older (fixed) keyframes; GNSS factors attach to in-window keyframes with
    an associated fix once the anchor exists.  Landmarks need at least two
    observations overall.  Without GNSS factors and older keyframes the
    oldest pose is held fixed to remove the gauge freedom.
    """
    if len(keyframes) < 2:
        raise ValueError("need at least 2 keyframes to build a problem")
    n = window_size or config.window_size
    window = list(keyframes[-n:])
    older = list(keyframes[: -len(window)] if len(keyframes) > len(window) else [])

    observed: dict[int, int] = {}
    for kf in window:
        for lid, _ in kf.observations:
            observed[lid] = observed.get(lid, 0) + 1
    fixed = []
    for kf in older:
        hits = 0
        for lid, _ in kf.observations:
            if lid in observed:
                observed[lid] += 1
                hits += 1
        if hits:
            fixed.append(kf)

    lm_ids = sorted(lid for lid, cnt in observed.items() if cnt >= 2 and lid in landmarks)
    lm_index = {lid: k for k, lid in enumerate(lm_ids)}

    def entry(kf):
        idx, obs = [], []
        for lid, ob in kf.observations:
            k = lm_index.get(lid)
            if k is not None:
                idx.append(k)
                obs.append([ob.u_left, ob.v, ob.u_right])
        if not idx:
            return None
        return np.array(idx, dtype=int), np.array(obs, dtype=float)

    vis_window = []
    for slot, kf in enumerate(window):
        e = entry(kf)
        if e is not None:
            vis_window.append((slot, e[0], e[1]))
    vis_fixed = []
    for kf in fixed:
        e = entry(kf)
        if e is not None:
            vis_fixed.append((kf.state.pose, e[0], e[1]))

    inertial_pairs = []
    for slot in range(1, len(window)):
        pre = window[slot].preintegration_from_prev
        if pre is not None:
            inertial_pairs.append((slot - 1, slot, pre))

    gnss_factors = []
    if use_gnss and anchor is not None:
        for slot, kf in enumerate(window):
            if kf.gnss is None:
                continue
            fix = kf.gnss
            data = GnssFactorData(
                geodetic_to_enu(fix.geodetic, anchor.origin),
                config.lever_arm,
                np.diag(fix.sigma_enu**2),
                anchor.rotation,
                anchor.anchor_keyframe_pose,
            )
            gnss_factors.append((slot, data))

    fix_oldest_pose = not fixed and not gnss_factors
    settings = SolverSettings(
        max_iterations=config.max_iterations,
        relative_cost_decrease=config.relative_cost_decrease,
        step_norm_tolerance=config.step_norm_tolerance,
    )
    return SlidingWindowProblem(
        window=window,
        fixed=fixed,
        landmark_ids=lm_ids,
        landmarks=landmarks,
        vis_window=vis_window,
        vis_fixed=vis_fixed,
        inertial_pairs=inertial_pairs,
        gnss_factors=gnss_factors,
        camera=camera,
        gravity=config.gravity_vector,
        pixel_sigma=config.pixel_sigma_px,
        huber_delta_visual=config.huber_delta_visual,
        huber_delta_gnss=config.huber_delta_gnss,
        bias_walk_sigmas=(config.gyro_bias_random_walk, config.accel_bias_random_walk),
        fix_oldest_pose=fix_oldest_pose,
        settings=settings,
    )


# ---------------------------------------------------------------------------
# Levenberg-Marquardt solve.


@dataclass(eq=False)
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    accepted_steps: int
    termination: str
    initial_breakdown: dict
    final_breakdown: dict
    gnss_factor_chi2: np.ndarray


def _huber_vec(chi2: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    s = np.sqrt(chi2)
    outside = s > delta
    cost = np.where(outside, 2.0 * delta * s - delta * delta, chi2)
    weight = np.where(outside, delta / np.maximum(s, 1e-300), 1.0)
    return cost, weight


_skew_batch = skew_batch


class _States:
    """Mutable array view of the window states and landmark positions."""

    def __init__(self, window: list, lm_ids: list, landmarks: dict):
        self.rot = np.array([kf.state.pose.rotation.matrix for kf in window])
        self.pos = np.array([kf.state.pose.translation for kf in window])
        self.vel = np.array([kf.state.velocity for kf in window])
        self.bg = np.array([kf.state.bias.gyro_bias for kf in window])
        self.ba = np.array([kf.state.bias.accel_bias for kf in window])
        self.lm = (
            np.array([landmarks[lid].position for lid in lm_ids])
            if lm_ids
            else np.zeros((0, 3))
        )

    def copy(self) -> "_States":
        out = object.__new__(_States)
        out.rot = self.rot.copy()
        out.pos = self.pos.copy()
        out.vel = self.vel.copy()
        out.bg = self.bg.copy()
        out.ba = self.ba.copy()
        out.lm = self.lm.copy()
        return out

    def nav_state(self, slot: int) -> NavState:
        return NavState(
            RigidTransform3(Rotation3(self.rot[slot]), self.pos[slot]),
            self.vel[slot],
            ImuBias(self.ba[slot], self.bg[slot]),
        )

    def retract(self, d_state: np.ndarray, d_lm: np.ndarray) -> "_States":
        out = self.copy()
        nk = self.rot.shape[0]
        for i in range(nk):
            s = d_state[15 * i : 15 * (i + 1)]
            if np.any(s[0:3]):
                out.rot[i] = self.rot[i] @ so3_exp(s[0:3]).matrix
            out.pos[i] = self.pos[i] + s[3:6]
            out.vel[i] = self.vel[i] + s[6:9]
            out.bg[i] = self.bg[i] + s[9:12]
            out.ba[i] = self.ba[i] + s[12:15]
        if d_lm.size:
            out.lm = self.lm + d_lm.reshape(-1, 3)
        return out


class _Linearizer:
    """Evaluates the robustified cost and accumulates normal equations.

    All visual observations are processed in two fully batched passes (one
    over window keyframes, one over fixed keyframes) with per-observation
    gathered poses.
    """

    def __init__(self, problem: SlidingWindowProblem):
        self.p = problem
        cam = problem.camera
        self.r_cb = cam.camera_from_body.rotation.matrix
        self.t_cb = cam.camera_from_body.translation
        self.cam = cam
        self.nk = len(problem.window)
        self.nl = len(problem.landmark_ids)
        self.ns = 15 * self.nk

        # Concatenated window observations with per-observation keyframe slot.
        slots, lms, obss = [], [], []
        for slot, lm_idx, obs in problem.vis_window:
            slots.append(np.full(len(lm_idx), slot, dtype=int))
            lms.append(lm_idx)
            obss.append(obs)
        self.win_slot = np.concatenate(slots) if slots else np.zeros(0, dtype=int)
        self.win_lm = np.concatenate(lms) if lms else np.zeros(0, dtype=int)
        self.win_obs = np.concatenate(obss) if obss else np.zeros((0, 3))

        # Concatenated fixed-keyframe observations with gathered poses.
        rots, poss, lms, obss = [], [], [], []
        for pose, lm_idx, obs in problem.vis_fixed:
            rots.append(np.broadcast_to(pose.rotation.matrix, (len(lm_idx), 3, 3)))
            poss.append(np.broadcast_to(pose.translation, (len(lm_idx), 3)))
            lms.append(lm_idx)
            obss.append(obs)
        self.fix_rot = np.concatenate(rots) if rots else np.zeros((0, 3, 3))
        self.fix_pos = np.concatenate(poss) if poss else np.zeros((0, 3))
        self.fix_lm = np.concatenate(lms) if lms else np.zeros(0, dtype=int)
        self.fix_obs = np.concatenate(obss) if obss else np.zeros((0, 3))

        # Whitening matrices (inverse) of the preintegration covariance
        # Cholesky factors, precomputed once per factor.
        self.inertial_white = []
        for ia, ib, pre in problem.inertial_pairs:
            cov = pre.covariance
            scale = max(np.trace(cov) / 9.0, 1e-16)
            for jitter in (0.0, 1e-12, 1e-9, 1e-6):
                try:
                    chol = np.linalg.cholesky(cov + jitter * scale * np.eye(9))
                    break
                except np.linalg.LinAlgError:
                    continue
            else:
                raise SolverFailureError("preintegration covariance is indefinite")
            self.inertial_white.append(solve_triangular(chol, np.eye(9), lower=True))
        # Per-pair bias random-walk sigmas.
        sg, sa = problem.bias_walk_sigmas
        self.walk_sigma = []
        for ia, ib, pre in problem.inertial_pairs:
            dt = pre.delta_t
            self.walk_sigma.append(
                np.concatenate(
                    [np.full(3, sg * math.sqrt(dt)), np.full(3, sa * math.sqrt(dt))]
                )
            )
        self.gnss_inv_sigma = [
            1.0 / np.sqrt(np.diag(data.covariance)) for _, data in problem.gnss_factors
        ]

    # -- visual ------------------------------------------------------------

    def _stereo_pass(self, rot, pos, lm_idx, obs, lm, want_jacobians):
        """Residuals (and optionally Jacobians) for per-observation poses.

        ``rot``/``pos`` are (n,3,3)/(n,3) gathered per observation.  Returns
        the robust cost total plus weighted residual arrays; observations a
        state pushes behind the camera are charged a fixed penalty and drop
        out of the linearization.
        """
        cam = self.cam
        body = np.einsum("nji,nj->ni", rot, lm[lm_idx] - pos)
        pc = body @ self.r_cb.T + self.t_cb
        z = pc[:, 2]
        valid = z > DEPTH_MIN
        iz = np.where(valid, 1.0 / np.where(valid, z, 1.0), 0.0)
        u_left = cam.fx * pc[:, 0] * iz + cam.cx
        v = cam.fy * pc[:, 1] * iz + cam.cy
        u_right = u_left - cam.fx * cam.baseline * iz
        res = (obs - np.stack([u_left, v, u_right], axis=1)) / self.p.pixel_sigma
        chi2 = np.einsum("ni,ni->n", res, res)
        cost, weight = _huber_vec(chi2, self.p.huber_delta_visual)
        total = float(np.sum(cost[valid])) + _BEHIND_CAMERA_PENALTY * float(
            np.sum(~valid)
        )
        if not want_jacobians:
            return total, None, None, None, None
        n = len(lm_idx)
        d_pix = np.zeros((n, 3, 3))
        fx_iz = cam.fx * iz
        fy_iz = cam.fy * iz
        d_pix[:, 0, 0] = fx_iz
        d_pix[:, 0, 2] = -fx_iz * pc[:, 0] * iz
        d_pix[:, 1, 1] = fy_iz
        d_pix[:, 1, 2] = -fy_iz * pc[:, 1] * iz
        d_pix[:, 2, 0] = fx_iz
        d_pix[:, 2, 2] = (-cam.fx * pc[:, 0] + cam.fx * cam.baseline) * iz * iz
        d_pix_cb = d_pix @ self.r_cb  # (n,3,3)
        # d pc/d landmark = r_cb rot^T per observation.
        j_lm = -np.einsum("nij,nkj->nik", d_pix_cb, rot) / self.p.pixel_sigma
        scale = np.sqrt(weight) * valid
        res = res * scale[:, None]
        if want_jacobians == "landmarks":
            return total, res, None, None, j_lm * scale[:, None, None]
        j_theta = -np.einsum("nij,njk->nik", d_pix_cb, _skew_batch(body)) / self.p.pixel_sigma
        j_trans = -j_lm  # d pc/d translation = -d pc/d landmark
        j_lm = j_lm * scale[:, None, None]
        j_theta = j_theta * scale[:, None, None]
        j_trans = j_trans * scale[:, None, None]
        return total, res, j_theta, j_trans, j_lm

    # -- full evaluation ----------------------------------------------------

    def cost(self, st: _States) -> tuple[float, dict]:
        p = self.p
        breakdown = {"inertial": 0.0, "bias_walk": 0.0, "visual": 0.0, "gnss": 0.0}
        if self.win_lm.size:
            c, _, _, _, _ = self._stereo_pass(
                st.rot[self.win_slot],
                st.pos[self.win_slot],
                self.win_lm,
                self.win_obs,
                st.lm,
                want_jacobians=False,
            )
            breakdown["visual"] += c
        if self.fix_lm.size:
            c, _, _, _, _ = self._stereo_pass(
                self.fix_rot, self.fix_pos, self.fix_lm, self.fix_obs, st.lm, False
            )
            breakdown["visual"] += c
        for k, (ia, ib, pre) in enumerate(p.inertial_pairs):
            r = inertial_residual(st.nav_state(ia), st.nav_state(ib), pre, p.gravity)
            rw = self.inertial_white[k] @ r
            breakdown["inertial"] += float(rw @ rw)
            r6 = np.concatenate([st.bg[ib] - st.bg[ia], st.ba[ib] - st.ba[ia]])
            rw6 = r6 / self.walk_sigma[k]
            breakdown["bias_walk"] += float(rw6 @ rw6)
        for k, (slot, data) in enumerate(p.gnss_factors):
            antenna = st.rot[slot] @ data.lever_arm + st.pos[slot]
            anchor_antenna = gnss_antenna_position(data.anchor_pose, data.lever_arm)
            r = data.z_hat - data.anchor_rotation.matrix @ (antenna - anchor_antenna)
            rw = r * self.gnss_inv_sigma[k]
            cost, _ = robust_kernel(float(rw @ rw), p.huber_delta_gnss)
            breakdown["gnss"] += cost
        return sum(breakdown.values()), breakdown

    def gnss_chi2(self, st: _States) -> np.ndarray:
        out = []
        for k, (slot, data) in enumerate(self.p.gnss_factors):
            antenna = st.rot[slot] @ data.lever_arm + st.pos[slot]
            anchor_antenna = gnss_antenna_position(data.anchor_pose, data.lever_arm)
            r = data.z_hat - data.anchor_rotation.matrix @ (antenna - anchor_antenna)
            rw = r * self.gnss_inv_sigma[k]
            out.append(float(rw @ rw))
        return np.array(out)

    def linearize(self, st: _States):
        p = self.p
        ns, nl, nk = self.ns, self.nl, self.nk
        h_ss = np.zeros((ns, ns))
        b_s = np.zeros(ns)
        h_sl = np.zeros((ns, nl, 3))
        h_ll = np.zeros((nl, 3, 3))
        b_l = np.zeros((nl, 3))
        breakdown = {"inertial": 0.0, "bias_walk": 0.0, "visual": 0.0, "gnss": 0.0}

        if self.win_lm.size:
            slot, lm_idx = self.win_slot, self.win_lm
            c, res, j_theta, j_trans, j_lm = self._stereo_pass(
                st.rot[slot], st.pos[slot], lm_idx, self.win_obs, st.lm, True
            )
            breakdown["visual"] += c
            j_pose = np.concatenate([j_theta, j_trans], axis=2)  # (n,3,6)
            pp_blocks = np.zeros((nk, 6, 6))
            bp_blocks = np.zeros((nk, 6))
            np.add.at(pp_blocks, slot, np.einsum("nij,nik->njk", j_pose, j_pose))
            np.add.at(bp_blocks, slot, np.einsum("nij,ni->nj", j_pose, res))
            pl_blocks = np.zeros((nk * nl, 6, 3)) if nl else None
            if nl:
                # One observation per (keyframe, landmark) pair, so plain
                # assignment into the flattened pair index is exact.
                pl_blocks[slot * nl + lm_idx] = np.einsum(
                    "nij,nik->njk", j_pose, j_lm
                )
            for i in range(nk):
                cols = slice(15 * i, 15 * i + 6)
                h_ss[cols, cols] += pp_blocks[i]
                b_s[cols] += bp_blocks[i]
                if nl:
                    h_sl[cols] += pl_blocks[i * nl : (i + 1) * nl].transpose(1, 0, 2)
            np.add.at(h_ll, lm_idx, np.einsum("nij,nik->njk", j_lm, j_lm))
            np.add.at(b_l, lm_idx, np.einsum("nij,ni->nj", j_lm, res))

        if self.fix_lm.size:
            c, res, _, _, j_lm = self._stereo_pass(
                self.fix_rot, self.fix_pos, self.fix_lm, self.fix_obs, st.lm, "landmarks"
            )
            breakdown["visual"] += c
            np.add.at(h_ll, self.fix_lm, np.einsum("nij,nik->njk", j_lm, j_lm))
            np.add.at(b_l, self.fix_lm, np.einsum("nij,ni->nj", j_lm, res))

        for k, (ia, ib, pre) in enumerate(p.inertial_pairs):
            r, j_prev, j_curr = inertial_jacobians(
                st.nav_state(ia), st.nav_state(ib), pre, p.gravity
            )
            white = self.inertial_white[k]
            j_loc = np.hstack([j_prev, j_curr])  # (9, 30)
            rw = white @ r
            jw = white @ j_loc
            cols = slice(15 * ia, 15 * ia + 30)
            h_ss[cols, cols] += jw.T @ jw
            b_s[cols] += jw.T @ rw
            breakdown["inertial"] += float(rw @ rw)

            r6 = np.concatenate([st.bg[ib] - st.bg[ia], st.ba[ib] - st.ba[ia]])
            sw = self.walk_sigma[k]
            rw6 = r6 / sw
            j6 = np.zeros((6, 30))
            j6[0:3, 9:12] = -np.eye(3)
            j6[3:6, 12:15] = -np.eye(3)
            j6[0:3, 24:27] = np.eye(3)
            j6[3:6, 27:30] = np.eye(3)
            j6 = j6 / sw[:, None]
            h_ss[cols, cols] += j6.T @ j6
            b_s[cols] += j6.T @ rw6
            breakdown["bias_walk"] += float(rw6 @ rw6)

        for k, (slot, data) in enumerate(p.gnss_factors):
            a = data.anchor_rotation.matrix
            antenna = st.rot[slot] @ data.lever_arm + st.pos[slot]
            anchor_antenna = gnss_antenna_position(data.anchor_pose, data.lever_arm)
            r = data.z_hat - a @ (antenna - anchor_antenna)
            inv_sigma = self.gnss_inv_sigma[k]
            rw = r * inv_sigma
            chi2 = float(rw @ rw)
            cost, weight = robust_kernel(chi2, p.huber_delta_gnss)
            breakdown["gnss"] += cost
            j = np.hstack([a @ st.rot[slot] @ skew(data.lever_arm), -a])
            jw = (j * inv_sigma[:, None]) * math.sqrt(weight)
            rww = rw * math.sqrt(weight)
            cols = slice(15 * slot, 15 * slot + 6)
            h_ss[cols, cols] += jw.T @ jw
            b_s[cols] += jw.T @ rww

        return h_ss, b_s, h_sl, h_ll, b_l, sum(breakdown.values()), breakdown


def solve(problem: SlidingWindowProblem) -> SolveReport:
    """Levenberg-Marquardt over the window states and landmarks.

    Accepts only cost-non-increasing steps; the damping scales from the
    largest Hessian diagonal and moves by the configured factor on
    acceptance/rejection.  Fixed keyframes are never touched; when the
    problem is gauge-free the oldest window pose is clamped.  Results are
    written back into the keyframes and the landmark map.
    """
    # The window systems are a few hundred variables at most; multithreaded
    # BLAS only adds contention at that size.
    with threadpool_limits(limits=1):
        return _solve_impl(problem)


def _solve_impl(problem: SlidingWindowProblem) -> SolveReport:
    lin = _Linearizer(problem)
    st = _States(problem.window, problem.landmark_ids, problem.landmarks)
    settings = problem.settings
    ns, nl = lin.ns, lin.nl

    free = np.ones(ns, dtype=bool)
    if problem.fix_oldest_pose:
        free[0:6] = False

    cost, breakdown = lin.cost(st)
    initial_cost, initial_breakdown = cost, dict(breakdown)
    lam = None
    iterations = 0
    accepted = 0
    termination = "max_iterations"

    while iterations < settings.max_iterations:
        iterations += 1
        h_ss, b_s, h_sl, h_ll, b_l, lin_cost, _ = lin.linearize(st)
        # Marquardt scaling: each parameter is damped by lam times its own
        # Hessian diagonal.  The diagonal is floored per parameter class
        # (rotation/translation/velocity/biases/landmarks) so that weakly
        # observed directions cannot take unbounded steps, while the very
        # different scales across classes stay balanced.
        d_ss = h_ss.diagonal().copy()
        blocks = d_ss.reshape(lin.nk, 5, 3)
        class_floor = 1e-3 * np.maximum(blocks.max(axis=(0, 2)), 1e-12)
        d_ss = np.maximum(blocks, class_floor[None, :, None]).reshape(-1)
        if nl:
            d_ll_raw = np.einsum("lii->li", h_ll)
            d_ll = np.maximum(d_ll_raw, 1e-3 * max(float(d_ll_raw.max()), 1e-12))
        if lam is None:
            lam = settings.damping_init_ratio

        rejections = 0
        while True:
            h_ss_d = h_ss + np.diag(lam * d_ss)
            if nl:
                h_ll_d = h_ll.copy()
                idx = np.arange(3)
                h_ll_d[:, idx, idx] += lam * d_ll
                try:
                    inv_ll = np.linalg.inv(h_ll_d)
                except np.linalg.LinAlgError as exc:
                    raise SolverFailureError(
                        "landmark block indefinite after damping"
                    ) from exc
                wh = np.einsum("alk,lkm->alm", h_sl, inv_ll)
                s_mat = h_ss_d - wh.reshape(ns, -1) @ h_sl.reshape(ns, -1).T
                rhs = b_s - wh.reshape(ns, -1) @ b_l.reshape(-1)
            else:
                s_mat = h_ss_d
                rhs = b_s

            s_red = s_mat[np.ix_(free, free)]
            rhs_red = rhs[free]
            try:
                factor = cho_factor(s_red, lower=True)
            except np.linalg.LinAlgError as exc:
                raise SolverFailureError(
                    f"state system indefinite after damping (lambda={lam:.3e})"
                ) from exc
            d_state = np.zeros(ns)
            d_state[free] = cho_solve(factor, -rhs_red)
            if nl:
                d_lm = -np.einsum(
                    "lkm,lk->lm",
                    inv_ll,
                    b_l + np.einsum("alk,a->lk", h_sl, d_state),
                )
            else:
                d_lm = np.zeros((0, 3))

            trial = st.retract(d_state, d_lm.reshape(-1))
            trial_cost, trial_breakdown = lin.cost(trial)
            if trial_cost <= cost:
                step_norm = math.sqrt(float(d_state @ d_state) + float(np.sum(d_lm**2)))
                decrease = cost - trial_cost
                st = trial
                previous = cost
                cost, breakdown = trial_cost, trial_breakdown
                lam = max(lam / settings.damping_factor, 1e-12)
                accepted += 1
                if step_norm < settings.step_norm_tolerance:
                    termination = "step_norm"
                elif decrease <= settings.relative_cost_decrease * max(previous, 1e-300):
                    termination = "relative_cost_decrease"
                break
            rejections += 1
            lam *= settings.damping_factor
            if rejections > settings.max_rejections:
                raise SolverFailureError(
                    f"diverged: no cost decrease after {rejections} dampings "
                    f"(cost={cost:.6e}, lambda={lam:.3e})"
                )
        if termination in ("step_norm", "relative_cost_decrease"):
            break

    # Write results back.
    for slot, kf in enumerate(problem.window):
        if problem.fix_oldest_pose and slot == 0:
            pose = kf.state.pose
        else:
            pose = RigidTransform3(Rotation3(st.rot[slot]), st.pos[slot])
        kf.state = NavState(pose, st.vel[slot], ImuBias(st.ba[slot], st.bg[slot]))
    for k, lid in enumerate(problem.landmark_ids):
        problem.landmarks[lid] = Landmark(st.lm[k])

    return SolveReport(
        initial_cost=initial_cost,
        final_cost=cost,
        iterations=iterations,
        accepted_steps=accepted,
        termination=termination,
        initial_breakdown=initial_breakdown,
        final_breakdown=dict(breakdown),
        gnss_factor_chi2=lin.gnss_chi2(st),
    )


# ---------------------------------------------------------------------------
# Streaming pipeline.


@dataclass(eq=False)
class RunReport:
    keyframe_count: int = 0
    gnss_fix_count: int = 0
    gnss_associated_count: int = 0
    gnss_discarded_count: int = 0
    gnss_coverage_ratio: float = 0.0
    solve_count: int = 0
    total_iterations: int = 0
    anchor_bootstrapped: bool = False
    final_cost: float | None = None
    last_breakdown: dict = field(default_factory=dict)


class SlidingWindowEstimator:
    """Sequential keyframe pipeline around :func:`build_problem`/:func:`solve`.

    One instance owns one run: feed ordered sensor records via
    :meth:`process`, then read the keyframe trajectory.  Keyframes are
    inserted at the first stereo frame at least one keyframe interval after
    the previous one; a window solve runs after every insertion.
    """

    def __init__(
        self,
        config: EstimatorConfig,
        camera: StereoCameraModel,
        initial_state: NavState | None = None,
        use_gnss: bool = True,
    ):
        self.config = config
        self.camera = camera
        self.use_gnss = use_gnss
        self.initial_state = initial_state or NavState(
            RigidTransform3.identity(), np.zeros(3), ImuBias.zero()
        )
        self.keyframes: list[Keyframe] = []
        self.landmarks: dict[int, Landmark] = {}
        self.anchor: EnuAnchor | None = None
        self.report = RunReport()
        self.fixes: list[GnssFix] = []
        self._assignment: dict[int, int] = {}
        self._assignment_dt: dict[int, float] = {}
        self._taken_fixes: set[int] = set()
        self._next_fix = 0
        self._imu_buffer: list[ImuSample] = []
        self._imu_carry: ImuSample | None = None
        self._last_t: float | None = None

    # -- record intake ------------------------------------------------------

    def process(self, record):
        t = record.timestamp
        if self._last_t is not None:
            if t < self._last_t - 1e-9:
                raise ValueError("sensor records must arrive in timestamp order")
            if t - self._last_t > self.config.max_stream_gap_s:
                raise StreamGapError(
                    f"stream gap of {t - self._last_t:.3f} s at t={t:.3f} exceeds "
                    f"{self.config.max_stream_gap_s} s"
                )
        self._last_t = t
        if isinstance(record, ImuSample):
            self._imu_buffer.append(record)
        elif isinstance(record, StereoFrame):
            self._on_frame(record)
        elif isinstance(record, GnssFix):
            if self.use_gnss:
                self.fixes.append(record)
                self.report.gnss_fix_count += 1
        else:
            raise TypeError(f"unknown record type {type(record).__name__}")

    def run(self, records) -> tuple[Trajectory, RunReport]:
        for record in records:
            self.process(record)
        self.finalize()
        return self.trajectory(), self.report

    def finalize(self):
        """Associate trailing fixes and close the bookkeeping."""
        if self.keyframes:
            self._associate_pending(float("inf"))
            self._maybe_bootstrap()
        assoc = len(self._assignment)
        self.report.gnss_associated_count = assoc
        self.report.gnss_discarded_count = max(self._next_fix - assoc, 0)
        if self.keyframes:
            self.report.gnss_coverage_ratio = assoc / len(self.keyframes)

    def trajectory(self) -> Trajectory:
        return Trajectory(
            np.array([kf.timestamp for kf in self.keyframes]),
            tuple(kf.state.pose for kf in self.keyframes),
        )

    # -- internals ----------------------------------------------------------

    def _on_frame(self, frame: StereoFrame):
        if self.keyframes:
            due = frame.timestamp >= (
                self.keyframes[-1].timestamp + self.config.keyframe_interval_s - 1e-9
            )
            if not due:
                return
        self._insert_keyframe(frame)

    def _take_imu_until(self, t: float) -> list[ImuSample]:
        cut = 0
        for s in self._imu_buffer:
            if s.timestamp < t - 1e-12:
                cut += 1
            else:
                break
        taken = self._imu_buffer[:cut]
        del self._imu_buffer[:cut]
        return taken

    def _insert_keyframe(self, frame: StereoFrame):
        t = frame.timestamp
        taken = self._take_imu_until(t)
        if not self.keyframes:
            state = self.initial_state
            pre = None
        else:
            prev = self.keyframes[-1]
            seq = list(taken)
            # The last sample consumed before the interval keeps covering its
            # start under zero-order hold.
            if self._imu_carry is not None and (
                not seq or seq[0].timestamp > prev.timestamp + 1e-12
            ):
                seq.insert(0, self._imu_carry)
            if not seq:
                raise StreamGapError(
                    f"no IMU samples covering keyframe interval ending at t={t:.3f}"
                )
            pre = integrate(
                seq,
                prev.state.bias,
                self.config.noise_model,
                start_time=prev.timestamp,
                end_time=t,
            )
            state = predict(prev.state, pre, self.config.gravity_vector)
        if taken:
            self._imu_carry = taken[-1]

        kf = Keyframe(
            id=len(self.keyframes),
            timestamp=t,
            state=state,
            observations=tuple(frame.observations),
            preintegration_from_prev=pre,
        )
        for lid, obs in kf.observations:
            if lid not in self.landmarks:
                self.landmarks[lid] = Landmark(
                    stereo_back_project(obs, state.pose, self.camera)
                )
        self.keyframes.append(kf)
        self.report.keyframe_count += 1

        self._associate_pending(t)
        self._maybe_bootstrap()

        if len(self.keyframes) >= 2:
            problem = build_problem(
                self.keyframes,
                self.landmarks,
                self.anchor,
                self.camera,
                self.config,
                use_gnss=self.use_gnss,
            )
            report = solve(problem)
            self.report.solve_count += 1
            self.report.total_iterations += report.iterations
            self.report.final_cost = report.final_cost
            self.report.last_breakdown = report.final_breakdown

    def _associate_pending(self, up_to: float):
        """Assign fixes whose nearest keyframe is final (fix time <= newest
        keyframe, or stream finished)."""
        if not self.keyframes:
            return
        kt = np.array([kf.timestamp for kf in self.keyframes])
        threshold = self.config.association_threshold_s
        while self._next_fix < len(self.fixes):
            fix = self.fixes[self._next_fix]
            if fix.timestamp > up_to:
                break
            j = self._next_fix
            self._next_fix += 1
            right = int(np.searchsorted(kt, fix.timestamp))
            left = max(right - 1, 0)
            right = min(right, kt.size - 1)
            i = (
                right
                if abs(kt[right] - fix.timestamp) < abs(kt[left] - fix.timestamp)
                else left
            )
            dt = abs(float(kt[i]) - fix.timestamp)
            if dt > threshold:
                continue
            if i in self._assignment and self._assignment_dt[i] <= dt:
                continue
            self._assignment[i] = j
            self._assignment_dt[i] = dt
            self.keyframes[i].gnss = fix

    def _maybe_bootstrap(self):
        if self.anchor is not None or not self.use_gnss:
            return
        if len(self._assignment) < self.config.anchor_fix_count:
            return
        order = sorted(self._assignment.items(), key=lambda kv: kv[0])
        fixes = [self.fixes[j] for _, j in order]
        poses = [self.keyframes[i].state.pose for i, _ in order]
        # Predicted yaw accuracy of the alignment is roughly sigma over the
        # baseline spread; keep buffering fixes until it clears the gate.
        antenna = np.array(
            [gnss_antenna_position(p, self.config.lever_arm) for p in poses]
        )
        spread = np.linalg.svd(antenna - antenna.mean(axis=0), compute_uv=False)
        mean_sigma = float(np.mean([np.mean(f.sigma_enu) for f in fixes]))
        if spread[0] * self.config.anchor_yaw_gate_rad < mean_sigma:
            return
        self.anchor = bootstrap_anchor(fixes, poses, self.config.lever_arm, len(fixes))
        self.report.anchor_bootstrapped = True


def run_sequence(
    records,
    config: EstimatorConfig,
    camera: StereoCameraModel,
    initial_state: NavState | None = None,
    use_gnss: bool = True,
) -> tuple[Trajectory, RunReport]:
    """Run the full pipeline over an ordered record stream."""
    estimator = SlidingWindowEstimator(config, camera, initial_state, use_gnss)
    trajectory, report = estimator.run(records)
    return trajectory, report


# ---------------------------------------------------------------------------
# Loosely-coupled baseline.


def loose_coupled_baseline(
    vi_trajectory: Trajectory,
    fixes: list[GnssFix],
    anchor: EnuAnchor,
    lever_arm=(0.0, 0.0, 0.0),
    segment_duration: float = 10.0,
) -> Trajectory:
    """Post-hoc GNSS correction of a visual-inertial trajectory.

    Rigidly aligns the trajectory's antenna track to the ENU fixes over
    consecutive ``segment_duration`` windows and blends the per-segment
    corrections linearly between segment centers.  Segments with fewer than
    3 fixes pass the input through unchanged; near-straight segments use the
    gravity tie-break, coincident ones fall back to translation-only.
    """
    lever_arm = np.asarray(lever_arm, dtype=float)
    if len(vi_trajectory) == 0:
        return vi_trajectory
    antenna = np.array(
        [gnss_antenna_position(p, lever_arm) for p in vi_trajectory.poses]
    )
    antenna_traj = Trajectory(vi_trajectory.times, vi_trajectory.poses)

    t0 = float(vi_trajectory.times[0])
    t1 = float(vi_trajectory.times[-1])
    n_segments = max(int(math.ceil((t1 - t0) / segment_duration)), 1)

    fix_times = np.array([f.timestamp for f in fixes])
    enu = (
        np.array([geodetic_to_enu(f.geodetic, anchor.origin) for f in fixes])
        if fixes
        else np.zeros((0, 3))
    )

    def interp_antenna(times):
        out = np.empty((len(times), 3))
        for k in range(3):
            out[:, k] = np.interp(times, vi_trajectory.times, antenna[:, k])
        return out

    centers = []
    transforms = []  # (R 3x3, t 3)
    for s in range(n_segments):
        lo = t0 + s * segment_duration
        hi = lo + segment_duration
        center = 0.5 * (lo + min(hi, t1))
        sel = (fix_times >= lo) & (fix_times < hi) & (fix_times <= t1 + 1e-9)
        centers.append(center)
        if int(np.sum(sel)) < 3:
            transforms.append((np.eye(3), np.zeros(3)))
            continue
        tgt = enu[sel]
        src = interp_antenna(fix_times[sel])
        src_c = src - src.mean(axis=0)
        tgt_c = tgt - tgt.mean(axis=0)
        spread = np.linalg.svd(src_c, compute_uv=False)
        if spread[0] < 1e-9:
            rot = np.eye(3)
        else:
            rot = _gravity_augmented_rotation(src_c, tgt_c).matrix
        trans = tgt.mean(axis=0) - rot @ src.mean(axis=0)
        transforms.append((rot, trans))

    centers = np.array(centers)

    def corrected_pose(t: float, pose: RigidTransform3) -> RigidTransform3:
        i = int(np.searchsorted(centers, t))
        lo = max(i - 1, 0)
        hi = min(i, len(centers) - 1)
        r_lo, t_lo = transforms[lo]
        r_hi, t_hi = transforms[hi]
        if lo == hi or centers[hi] <= centers[lo]:
            w = 0.0
        else:
            w = (t - centers[lo]) / (centers[hi] - centers[lo])
            w = min(max(w, 0.0), 1.0)
        p_lo = r_lo @ pose.translation + t_lo
        p_hi = r_hi @ pose.translation + t_hi
        pos = (1.0 - w) * p_lo + w * p_hi
        rr_lo = r_lo @ pose.rotation.matrix
        rr_hi = r_hi @ pose.rotation.matrix
        delta = so3_log(Rotation3(rr_lo.T @ rr_hi))
        rot = rr_lo @ so3_exp(w * delta).matrix
        return RigidTransform3(Rotation3(rot), pos)

    poses = tuple(
        corrected_pose(float(t), p)
        for t, p in zip(vi_trajectory.times, vi_trajectory.poses)
    )
    return Trajectory(vi_trajectory.times, poses)
