"""Trajectory metrics: alignment-based absolute trajectory error, multi-run
comparison tables, and a discrete-acceleration smoothness proxy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform3, SimilarityTransform, umeyama_align


class InsufficientOverlapError(ValueError):
    """Raised when two trajectories share fewer than 3 matchable poses."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timestamped body poses, strictly increasing in time."""

    times: np.ndarray
    poses: tuple  # of RigidTransform3

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.poses) != times.shape[0]:
            raise ValueError("times and poses must have equal length")
        if times.size > 1 and np.any(np.diff(times) <= 0.0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def transformed(self, transform: RigidTransform3) -> "Trajectory":
        """Apply a global rigid transform to every pose."""
        return Trajectory(
            self.times,
            tuple(
                RigidTransform3(
                    transform.rotation @ p.rotation,
                    transform.rotation.apply(p.translation) + transform.translation,
                )
                for p in self.poses
            ),
        )


@dataclass(frozen=True, eq=False)
class AteReport:
    rmse: float
    mean: float
    median: float
    max: float
    matched_pairs: int
    alignment: SimilarityTransform
    align_mode: str

    def __post_init__(self):
        if self.matched_pairs < 3:
            raise ValueError("an ATE report needs at least 3 matched pairs")
        if self.max < self.rmse - 1e-12 or self.rmse < 0.0:
            raise ValueError("inconsistent error statistics")


def match_timestamps(
    times_a: np.ndarray, times_b: np.ndarray, max_offset: float
) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (i, j) matching each a-time to its nearest b-time within
    ``max_offset``."""
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    right = np.searchsorted(times_b, times_a)
    left = np.clip(right - 1, 0, len(times_b) - 1)
    right = np.clip(right, 0, len(times_b) - 1)
    pick_right = np.abs(times_b[right] - times_a) < np.abs(times_b[left] - times_a)
    j = np.where(pick_right, right, left)
    ok = np.abs(times_b[j] - times_a) <= max_offset
    return np.flatnonzero(ok), j[ok]


def ate(
    estimate: Trajectory,
    reference: Trajectory,
    max_time_offset: float = 0.02,
    align_mode: str = "rigid",
) -> AteReport:
    """Translation ATE after least-squares alignment of the estimate onto the
    reference.

    ``align_mode`` is "rigid" (default) or "similarity"; the estimate is
    matched to the reference by nearest timestamp within ``max_time_offset``.
    """
    if align_mode not in ("rigid", "similarity"):
        raise ValueError(f"unknown align mode {align_mode!r}")
    ia, ib = match_timestamps(estimate.times, reference.times, max_time_offset)
    if len(ia) < 3:
        raise InsufficientOverlapError(
            f"only {len(ia)} matched pose pairs within {max_time_offset} s"
        )
    est = estimate.positions[ia]
    ref = reference.positions[ib]
    transform = umeyama_align(est, ref, with_scale=(align_mode == "similarity"))
    errors = np.linalg.norm(ref - transform.apply(est), axis=1)
    return AteReport(
        rmse=float(np.sqrt(np.mean(errors**2))),
        mean=float(np.mean(errors)),
        median=float(np.median(errors)),
        max=float(np.max(errors)),
        matched_pairs=int(len(ia)),
        alignment=transform,
        align_mode=align_mode,
    )


@dataclass(frozen=True, eq=False)
class RunComparison:
    """Per-run ATE rows plus the best run per name (lowest RMSE)."""

    rows: tuple  # of (name, run_index, AteReport)
    best_by_name: dict

    def best(self, name: str):
        return self.best_by_name[name]


def compare_runs(
    runs: list[tuple[str, Trajectory]],
    reference: Trajectory,
    max_time_offset: float = 0.02,
    align_mode: str = "rigid",
) -> RunComparison:
    """ATE for every named run; repeated names are reported best-of-k.

    Mirrors the protocol of running each system several times and quoting
    the lowest error, while keeping all rows available.
    """
    if not runs:
        raise ValueError("need at least one run")
    rows = []
    indices: dict[str, int] = {}
    for name, traj in runs:
        indices[name] = indices.get(name, -1) + 1
        rows.append((name, indices[name], ate(traj, reference, max_time_offset, align_mode)))
    best: dict[str, AteReport] = {}
    for name, _, report in rows:
        if name not in best or report.rmse < best[name].rmse:
            best[name] = report
    return RunComparison(tuple(rows), best)


def smoothness_metric(trajectory: Trajectory) -> float:
    """RMS magnitude of the discrete second derivative of position.

    A proxy for how bumpy an estimate would feel to a downstream controller;
    exactly zero for constant-velocity motion at any time spacing.
    """
    if len(trajectory) < 4:
        raise ValueError("need at least 4 poses")
    t = trajectory.times
    p = trajectory.positions
    dt1 = (t[1:-1] - t[:-2])[:, None]
    dt2 = (t[2:] - t[1:-1])[:, None]
    acc = 2.0 * (dt1 * p[2:] - (dt1 + dt2) * p[1:-1] + dt2 * p[:-2]) / (
        dt1 * dt2 * (dt1 + dt2)
    )
    return float(np.sqrt(np.mean(np.sum(acc**2, axis=1))))


def positions_at(trajectory: Trajectory, times) -> np.ndarray:
    """Linearly interpolated positions at the query times (clamped at ends)."""
    times = np.asarray(times, dtype=float)
    p = trajectory.positions
    out = np.empty((len(times), 3))
    for k in range(3):
        out[:, k] = np.interp(times, trajectory.times, p[:, k])
    return out
