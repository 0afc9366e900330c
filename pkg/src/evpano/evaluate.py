"""Trajectory evaluation against a reference.

The error metric is the angle between estimated and reference camera
viewing directions, which deliberately neglects roll about the optical
axis.  Evaluation proceeds in three steps: the reference is interpolated
at the estimate's timestamps (with a small constant time offset fitted by
grid search), a global rotation between the two world frames is estimated
robustly, and the per-sample angles are summarized as mean / median /
1-degree histogram.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SMALL_ANGLE
from .trajectories import PoseTrajectory, pose_at, quat_from_axis_angle

# Two sampled directions closer than this (sine of the angle between them)
# cannot pin down a rotation.
COLLINEAR_EPS = 1e-9
UNIT_NORM_TOL = 1e-9


class NoOverlap(ValueError):
    """The two trajectories share no usable time interval."""


class DegenerateDirections(ValueError):
    """Every sampled direction pair was collinear; rotation unconstrained."""


@dataclass(frozen=True, eq=False)
class AlignedPair:
    """One estimated viewing direction matched to a reference direction."""

    t: float
    est_dir: np.ndarray
    gt_dir: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "est_dir",
                           np.asarray(self.est_dir, dtype=np.float64))
        object.__setattr__(self, "gt_dir",
                           np.asarray(self.gt_dir, dtype=np.float64))
        for d in (self.est_dir, self.gt_dir):
            if d.shape != (3,):
                raise ValueError("directions must be 3-vectors")
            if abs(np.linalg.norm(d) - 1.0) > UNIT_NORM_TOL:
                raise ValueError("directions must be unit vectors")


def viewing_direction(pose: np.ndarray) -> np.ndarray:
    """Camera forward axis (0,0,1) rotated by the pose."""
    return viewing_directions(np.asarray(pose, dtype=np.float64))[0]


def viewing_directions(poses: np.ndarray) -> np.ndarray:
    """Row-wise viewing directions for an (n, 3) axis-angle array."""
    poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))
    w, x, y, z = quat_from_axis_angle(poses).T
    # Third column of the rotation matrix for a unit quaternion.
    dirs = np.stack([2.0 * (x * z + w * y),
                     2.0 * (y * z - w * x),
                     1.0 - 2.0 * (x * x + y * y)], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    return dirs


def _angles_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise angle between unit vectors, stable near 0 and 180 degrees."""
    s = np.linalg.norm(np.cross(a, b), axis=-1)
    c = np.einsum("...i,...i->...", a, b)
    return np.degrees(np.arctan2(s, c))


def _pair_arrays(pairs):
    est = np.array([p.est_dir for p in pairs], dtype=np.float64)
    gt = np.array([p.gt_dir for p in pairs], dtype=np.float64)
    if len(pairs) == 0:
        est = est.reshape(0, 3)
        gt = gt.reshape(0, 3)
    return est, gt


def _fit_rotation(est_dirs: np.ndarray, gt_dirs: np.ndarray) -> np.ndarray:
    """Orthogonal Procrustes: rotation R minimizing sum |R e_i - g_i|^2."""
    H = est_dirs.T @ gt_dirs
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    if d == 0.0:
        d = 1.0
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    """Sequence of aligned pairs plus the fitted constant time offset.

    The offset is the shift added to estimate timestamps before sampling
    the reference: an estimate lagging the reference by 10 ms fits -10 ms.
    """

    pairs: list
    offset_s: float

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


def temporal_align(est: PoseTrajectory, gt: PoseTrajectory,
                   max_offset_s: float = 0.05,
                   offset_step_s: float = 0.001) -> AlignmentResult:
    """Match each estimated sample to the reference pose at its timestamp.

    The reference is slerped between its bracketing samples; estimated
    samples falling outside the reference span are dropped.  A constant
    time offset is fitted by scanning +-max_offset_s in offset_step_s
    steps and keeping the offset with the smallest median angular error
    (after a per-offset global-rotation fit, so the search is insensitive
    to the two trajectories living in different world frames).
    """
    if len(est) == 0 or len(gt) == 0:
        raise ValueError("cannot align an empty trajectory")
    glo, ghi = gt.time_span
    elo, ehi = est.time_span
    if ehi < glo or elo > ghi:
        raise NoOverlap("trajectory time spans are disjoint")

    est_dirs = viewing_directions(est.poses)
    n_steps = int(round(max_offset_s / offset_step_s))
    offsets = np.arange(-n_steps, n_steps + 1) * offset_step_s
    medians = np.full(offsets.shape, np.inf)
    for i, off in enumerate(offsets):
        ts = est.t + off
        keep = (ts >= glo) & (ts <= ghi)
        if np.count_nonzero(keep) < 2:
            continue
        gt_dirs = viewing_directions(pose_at(gt, ts[keep]))
        e = est_dirs[keep]
        R = _fit_rotation(e, gt_dirs)
        medians[i] = float(np.median(_angles_deg(e @ R.T, gt_dirs)))
    if not np.isfinite(medians).any():
        raise NoOverlap("too few overlapping samples to align")

    # Smallest median wins; ties go to the smallest offset magnitude.
    best = np.lexsort((np.abs(offsets), medians))[0]
    offset = float(offsets[best])
    ts = est.t + offset
    keep = (ts >= glo) & (ts <= ghi)
    gt_dirs = viewing_directions(pose_at(gt, ts[keep]))
    pairs = [AlignedPair(float(t), e, g)
             for t, e, g in zip(est.t[keep], est_dirs[keep], gt_dirs)]
    return AlignmentResult(pairs, offset)


def ransac_global_rotation(pairs, iterations: int = 1000,
                           inlier_threshold_deg: float = 5.0,
                           rng_seed: int = 0):
    """Robust rotation mapping estimated directions onto reference ones.

    Samples two pairs at a time, fits the exact rotation between them,
    scores inliers by angular error, then refits on the best inlier set.
    Returns (rotation, inlier mask); the refit is only adopted when it
    keeps at least as many inliers as the sample model it replaces.
    """
    est, gt = _pair_arrays(pairs)
    n = est.shape[0]
    if n < 2:
        raise ValueError("need at least two pairs")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(rng_seed)
    best_count = -1
    best_model = None
    for _ in range(iterations):
        i, j = rng.choice(n, size=2, replace=False)
        if (np.linalg.norm(np.cross(est[i], est[j])) < COLLINEAR_EPS
                or np.linalg.norm(np.cross(gt[i], gt[j])) < COLLINEAR_EPS):
            continue
        R = _fit_rotation(est[[i, j]], gt[[i, j]])
        inliers = _angles_deg(est @ R.T, gt) < inlier_threshold_deg
        count = int(np.count_nonzero(inliers))
        if count > best_count:
            best_count = count
            best_model = (R, inliers)
    if best_model is None:
        raise DegenerateDirections("all sampled direction pairs collinear")

    R, inliers = best_model
    if best_count >= 2:
        refit = _fit_rotation(est[inliers], gt[inliers])
        refit_inliers = _angles_deg(est @ refit.T, gt) < inlier_threshold_deg
        if np.count_nonzero(refit_inliers) >= best_count:
            return refit, refit_inliers
    return R, inliers


@dataclass(frozen=True, eq=False)
class ErrorStats:
    mean_deg: float
    median_deg: float
    hist: np.ndarray        # counts in 1-degree bins covering [0, 180]
    errors_deg: np.ndarray


def angular_error_stats(pairs, rotation: np.ndarray | None = None) -> ErrorStats:
    """Per-pair angles between rotation @ est_dir and gt_dir, in degrees."""
    est, gt = _pair_arrays(pairs)
    if rotation is None:
        rotation = np.eye(3)
    errors = _angles_deg(est @ np.asarray(rotation, dtype=np.float64).T, gt)
    hist, _ = np.histogram(errors, bins=np.arange(181.0))
    if errors.size == 0:
        return ErrorStats(float("nan"), float("nan"), hist, errors)
    return ErrorStats(float(errors.mean()), float(np.median(errors)),
                      hist, errors)


@dataclass(frozen=True, eq=False)
class EvaluationReport:
    stats: ErrorStats
    rotation: np.ndarray
    inliers: np.ndarray
    offset_s: float

    @property
    def inlier_fraction(self) -> float:
        n = self.inliers.shape[0]
        return float(np.count_nonzero(self.inliers) / n) if n else 0.0

    def text_table(self) -> str:
        rows = [
            ("pairs", f"{self.inliers.shape[0]}"),
            ("mean error [deg]", f"{self.stats.mean_deg:.4f}"),
            ("median error [deg]", f"{self.stats.median_deg:.4f}"),
            ("inlier fraction", f"{self.inlier_fraction:.4f}"),
            ("fitted offset [ms]", f"{1e3 * self.offset_s:+.1f}"),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def evaluate_trajectories(est: PoseTrajectory, gt: PoseTrajectory,
                          iterations: int = 1000,
                          inlier_threshold_deg: float = 5.0,
                          rng_seed: int = 0,
                          max_offset_s: float = 0.05) -> EvaluationReport:
    """Full protocol: temporal alignment, robust registration, statistics."""
    aligned = temporal_align(est, gt, max_offset_s=max_offset_s)
    rotation, inliers = ransac_global_rotation(
        aligned.pairs, iterations=iterations,
        inlier_threshold_deg=inlier_threshold_deg, rng_seed=rng_seed)
    stats = angular_error_stats(aligned.pairs, rotation)
    return EvaluationReport(stats, rotation, inliers, aligned.offset_s)


def write_histogram_csv(path, stats: ErrorStats) -> None:
    """Histogram as ``bin_deg,count`` rows, one per 1-degree bin."""
    with open(path, "w") as fh:
        fh.write("bin_deg,count\n")
        for b, c in enumerate(stats.hist):
            fh.write(f"{b},{int(c)}\n")
