"""File formats: TUM trajectories, sensor stream files, and report exports.

All files are plain text, space-separated, one record per line, with ``#``
comment lines.  Floats are written with shortest round-trip precision so
identical data produces identical bytes.

Formats:

- trajectory (TUM): ``t tx ty tz qx qy qz qw``
- imu: ``t gx gy gz ax ay az``
- gnss: ``t lat lon alt sigma_e sigma_n sigma_u``
- frames: ``t landmark_id u_left v u_right`` plus a camera header comment
  ``# camera fx fy cx cy baseline`` and
  ``# camera_from_body qx qy qz qw tx ty tz``
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .estimator import GnssFix
from .evaluation import AteReport, RunComparison, Trajectory
from .factors import StereoCameraModel, StereoFrame, StereoObservation
from .geometry import GeodeticPoint, RigidTransform3, Rotation3
from .preintegration import ImuSample


class DataFormatError(ValueError):
    """Malformed data file; message carries file and line number."""


def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_floats(path, lineno: int, parts: list[str], expected: int):
    if len(parts) != expected:
        raise DataFormatError(
            f"{path}:{lineno}: expected {expected} fields, got {len(parts)}"
        )
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise DataFormatError(f"{path}:{lineno}: non-numeric field ({exc})") from exc


def _data_lines(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield lineno, line.split()


def write_trajectory(path, trajectory: Trajectory, header: str = "") -> None:
    lines = []
    if header:
        lines.append(f"# {header}")
    lines.append("# t tx ty tz qx qy qz qw")
    for t, pose in zip(trajectory.times, trajectory.poses):
        q = pose.rotation.to_quaternion()
        p = pose.translation
        lines.append(
            " ".join(
                [_fmt(t), _fmt(p[0]), _fmt(p[1]), _fmt(p[2]), _fmt(q[0]), _fmt(q[1]), _fmt(q[2]), _fmt(q[3])]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> Trajectory:
    times, poses = [], []
    for lineno, parts in _data_lines(path):
        vals = _parse_floats(path, lineno, parts, 8)
        times.append(vals[0])
        try:
            rot = Rotation3.from_quaternion(vals[4], vals[5], vals[6], vals[7])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad quaternion ({exc})") from exc
        poses.append(RigidTransform3(rot, np.array(vals[1:4])))
    if not times:
        raise DataFormatError(f"{path}: no trajectory rows")
    try:
        return Trajectory(np.array(times), tuple(poses))
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def read_trajectory_rows(path) -> list[tuple[float, np.ndarray, np.ndarray]]:
    """Raw (t, position, quaternion) rows, preserving order and values."""
    rows = []
    for lineno, parts in _data_lines(path):
        vals = _parse_floats(path, lineno, parts, 8)
        rows.append((vals[0], np.array(vals[1:4]), np.array(vals[4:8])))
    if not rows:
        raise DataFormatError(f"{path}: no trajectory rows")
    return rows


def write_trajectory_rows(path, rows) -> None:
    lines = ["# t tx ty tz qx qy qz qw"]
    for t, pos, quat in rows:
        lines.append(" ".join([_fmt(t)] + [_fmt(v) for v in pos] + [_fmt(v) for v in quat]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_imu(path, samples: list[ImuSample]) -> None:
    lines = ["# t gx gy gz ax ay az"]
    for s in samples:
        lines.append(
            " ".join([_fmt(s.timestamp)] + [_fmt(v) for v in s.gyro] + [_fmt(v) for v in s.accel])
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_imu(path) -> list[ImuSample]:
    samples = []
    for lineno, parts in _data_lines(path):
        vals = _parse_floats(path, lineno, parts, 7)
        samples.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return samples


def write_gnss(path, fixes: list[GnssFix]) -> None:
    lines = ["# t lat lon alt sigma_e sigma_n sigma_u"]
    for f in fixes:
        g = f.geodetic
        lines.append(
            " ".join(
                [_fmt(f.timestamp), _fmt(g.latitude), _fmt(g.longitude), _fmt(g.altitude)]
                + [_fmt(v) for v in f.sigma_enu]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_gnss(path) -> list[GnssFix]:
    fixes = []
    for lineno, parts in _data_lines(path):
        vals = _parse_floats(path, lineno, parts, 7)
        try:
            point = GeodeticPoint(vals[1], vals[2], vals[3])
            fixes.append(GnssFix(vals[0], point, np.array(vals[4:7])))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    return fixes


def write_frames(path, frames: list[StereoFrame], camera: StereoCameraModel) -> None:
    q = camera.camera_from_body.rotation.to_quaternion()
    t = camera.camera_from_body.translation
    lines = [
        "# t landmark_id u_left v u_right",
        "# camera "
        + " ".join(_fmt(v) for v in (camera.fx, camera.fy, camera.cx, camera.cy, camera.baseline)),
        "# camera_from_body " + " ".join(_fmt(v) for v in (*q, *t)),
    ]
    for frame in frames:
        for lid, obs in frame.observations:
            lines.append(
                " ".join(
                    [_fmt(frame.timestamp), str(int(lid)), _fmt(obs.u_left), _fmt(obs.v), _fmt(obs.u_right)]
                )
            )
    Path(path).write_text("\n".join(lines) + "\n")


def read_frames(path) -> tuple[list[StereoFrame], StereoCameraModel]:
    """Frame stream plus the camera model embedded in the header."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    cam_params = None
    cam_pose = None
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "camera":
                cam_params = _parse_floats(path, lineno, parts[1:], 5)
            elif parts and parts[0] == "camera_from_body":
                vals = _parse_floats(path, lineno, parts[1:], 7)
                cam_pose = RigidTransform3(
                    Rotation3.from_quaternion(*vals[0:4]), np.array(vals[4:7])
                )
            continue
        parts = line.split()
        vals = _parse_floats(path, lineno, parts, 5)
        try:
            obs = StereoObservation(vals[2], vals[3], vals[4])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
        rows.append((vals[0], int(vals[1]), obs))
    if cam_params is None or cam_pose is None:
        raise DataFormatError(f"{path}: missing camera header comments")
    camera = StereoCameraModel(*cam_params, cam_pose)
    frames = []
    current_t = None
    current: list = []
    for t, lid, obs in rows:
        if current_t is not None and t != current_t:
            frames.append(StereoFrame(current_t, tuple(current)))
            current = []
        current_t = t
        current.append((lid, obs))
    if current_t is not None:
        frames.append(StereoFrame(current_t, tuple(current)))
    return frames, camera


def ate_report_dict(report: AteReport) -> dict:
    t = report.alignment
    return {
        "rmse_m": report.rmse,
        "mean_m": report.mean,
        "median_m": report.median,
        "max_m": report.max,
        "matched_pairs": report.matched_pairs,
        "align_mode": report.align_mode,
        "alignment": {
            "scale": t.scale,
            "rotation_quaternion_xyzw": t.rotation.to_quaternion().tolist(),
            "translation_m": np.asarray(t.translation).tolist(),
        },
    }


def write_ate_report(path, report: AteReport) -> None:
    Path(path).write_text(json.dumps(ate_report_dict(report), indent=2, sort_keys=True) + "\n")


def write_comparison_csv(path, comparison: RunComparison) -> None:
    lines = ["name,run,rmse_m,mean_m,median_m,max_m,matched_pairs,best_of_name"]
    for name, run_idx, rep in comparison.rows:
        is_best = comparison.best_by_name[name] is rep
        lines.append(
            f"{name},{run_idx},{_fmt(rep.rmse)},{_fmt(rep.mean)},{_fmt(rep.median)},"
            f"{_fmt(rep.max)},{rep.matched_pairs},{int(is_best)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_comparison_csv(path) -> list[dict]:
    rows = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        if not line.strip():
            continue
        rows.append(dict(zip(header, line.split(","))))
    return rows


def write_aligned_positions(path, times, positions) -> None:
    """Plot-ready aligned positions: ``t,x,y,z`` per line."""
    lines = ["t,x,y,z"]
    for t, p in zip(times, positions):
        lines.append(",".join([_fmt(t), _fmt(p[0]), _fmt(p[1]), _fmt(p[2])]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_aligned_positions(path) -> tuple[np.ndarray, np.ndarray]:
    times, positions = [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("t,"):
            continue
        parts = line.split(",")
        vals = _parse_floats(path, lineno, parts, 4)
        times.append(vals[0])
        positions.append(vals[1:4])
    return np.array(times), np.array(positions)
