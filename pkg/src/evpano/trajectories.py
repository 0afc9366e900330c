"""Timestamped rotation trajectories: quaternion helpers, spherical
interpolation, and the text file format shared by the pipeline, the
generator, and the evaluator.

File format: one sample per line.  Axis-angle files carry ``t wx wy wz``;
quaternion files carry ``t`` plus four components whose order is selected by
``quat_order`` ("wxyz" or "xyzw").  Lines starting with ``#`` and blank
lines are ignored.
"""

from __future__ import annotations

import numpy as np

from .geometry import SMALL_ANGLE

_QUAT_ORDERS = ("wxyz", "xyzw")


class PoseTrajectory:
    """Dense sequence of (t, axis-angle pose) samples sorted by time."""

    __slots__ = ("t", "poses")

    def __init__(self, t, poses):
        t = np.asarray(t, dtype=np.float64)
        poses = np.asarray(poses, dtype=np.float64)
        if t.ndim != 1:
            raise ValueError("timestamps must be a 1-D array")
        if poses.shape != (t.shape[0], 3):
            raise ValueError("poses must have shape (len(t), 3)")
        if not (np.isfinite(t).all() and np.isfinite(poses).all()):
            raise ValueError("trajectory contains non-finite values")
        if t.shape[0] >= 2 and np.any(np.diff(t) < 0):
            raise ValueError("timestamps must be non-decreasing")
        self.t = t
        self.poses = poses

    @classmethod
    def empty(cls) -> "PoseTrajectory":
        return cls(np.empty(0), np.empty((0, 3)))

    def __len__(self) -> int:
        return self.t.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return float(self.t[i]), self.poses[i].copy()
        return PoseTrajectory(self.t[i], self.poses[i])

    @property
    def time_span(self):
        if len(self) == 0:
            raise ValueError("empty trajectory has no time span")
        return float(self.t[0]), float(self.t[-1])


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z) internally; Hamilton convention
# ---------------------------------------------------------------------------

def quat_from_axis_angle(theta: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) -> unit quaternion (..., 4) as (w, x, y, z)."""
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 1
    th = np.atleast_2d(theta)
    angle = np.linalg.norm(th, axis=1)
    half = 0.5 * angle
    # sin(angle/2)/angle -> 1/2 as angle -> 0
    factor = np.where(angle > SMALL_ANGLE,
                      np.sin(half) / np.where(angle > SMALL_ANGLE, angle, 1.0),
                      0.5 - angle ** 2 / 48.0)
    q = np.empty((th.shape[0], 4))
    q[:, 0] = np.cos(half)
    q[:, 1:] = th * factor[:, None]
    return q[0] if single else q


def axis_angle_from_quat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (..., 4) as (w, x, y, z) -> axis-angle with angle in
    [0, pi] (the sign of w is canonicalized first)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qs = np.atleast_2d(q).copy()
    norms = np.linalg.norm(qs, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("zero-norm quaternion")
    qs /= norms[:, None]
    flip = qs[:, 0] < 0.0
    qs[flip] *= -1.0
    n = np.linalg.norm(qs[:, 1:], axis=1)
    angle = 2.0 * np.arctan2(n, qs[:, 0])
    factor = np.where(n > SMALL_ANGLE, angle / np.where(n > SMALL_ANGLE, n, 1.0),
                      2.0 / np.maximum(qs[:, 0], 0.5))
    out = qs[:, 1:] * factor[:, None]
    return out[0] if single else out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def slerp_quat(q0: np.ndarray, q1: np.ndarray, u) -> np.ndarray:
    """Spherical interpolation between unit quaternion rows; u in [0, 1]
    broadcast per row.  Antipodal pairs are hemisphere-aligned first."""
    q0 = np.atleast_2d(np.asarray(q0, dtype=np.float64))
    q1 = np.atleast_2d(np.asarray(q1, dtype=np.float64)).copy()
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    dot = np.sum(q0 * q1, axis=1)
    q1[dot < 0.0] *= -1.0
    dot = np.abs(dot)
    close = dot > 1.0 - 1e-10
    omega = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_om = np.sin(omega)
    # nlerp fallback where the arc is too short for the sine quotient
    safe = np.where(close, 1.0, sin_om)
    w0 = np.where(close, 1.0 - u, np.sin((1.0 - u) * omega) / safe)
    w1 = np.where(close, u, np.sin(u * omega) / safe)
    out = w0[:, None] * q0 + w1[:, None] * q1
    out /= np.linalg.norm(out, axis=1)[:, None]
    return out


def pose_at(traj: PoseTrajectory, times) -> np.ndarray:
    """Interpolate poses at query times (slerp between bracketing samples).

    Every query must lie inside the trajectory's time span.
    """
    if len(traj) == 0:
        raise ValueError("cannot interpolate an empty trajectory")
    times = np.asarray(times, dtype=np.float64)
    single = times.ndim == 0
    tq = np.atleast_1d(times)
    lo, hi = traj.time_span
    if np.any(tq < lo) or np.any(tq > hi):
        raise ValueError("query time outside trajectory span")
    if len(traj) == 1:
        out = np.repeat(traj.poses, tq.shape[0], axis=0)
        return out[0] if single else out
    idx = np.searchsorted(traj.t, tq, side="right") - 1
    idx = np.clip(idx, 0, len(traj) - 2)
    t0 = traj.t[idx]
    t1 = traj.t[idx + 1]
    dt = t1 - t0
    u = np.where(dt > 0.0, (tq - t0) / np.where(dt > 0.0, dt, 1.0), 0.0)
    q = quat_from_axis_angle(traj.poses)
    out = axis_angle_from_quat(slerp_quat(q[idx], q[idx + 1], u))
    out = np.atleast_2d(out)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def save_trajectory(path, traj: PoseTrajectory, fmt: str = "axis_angle",
                    quat_order: str = "wxyz") -> None:
    if fmt not in ("axis_angle", "quaternion"):
        raise ValueError(f"unknown trajectory format {fmt!r}")
    if quat_order not in _QUAT_ORDERS:
        raise ValueError(f"quat_order must be one of {_QUAT_ORDERS}")
    with open(path, "w") as fh:
        if fmt == "axis_angle":
            for t, w in zip(traj.t, traj.poses):
                fh.write(f"{t:.9f} {w[0]:.9f} {w[1]:.9f} {w[2]:.9f}\n")
        else:
            q = quat_from_axis_angle(traj.poses)
            q = np.atleast_2d(q)
            if quat_order == "xyzw":
                q = q[:, [1, 2, 3, 0]]
            for t, row in zip(traj.t, q):
                fh.write(f"{t:.9f} " + " ".join(f"{c:.9f}" for c in row) + "\n")


def load_trajectory(path, quat_order: str = "wxyz") -> PoseTrajectory:
    """Parse a trajectory file; 4 columns mean axis-angle, 5 quaternion."""
    if quat_order not in _QUAT_ORDERS:
        raise ValueError(f"quat_order must be one of {_QUAT_ORDERS}")
    times = []
    rows = []
    ncols = None
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (4, 5):
                raise ValueError(
                    f"line {line_no}: expected 4 or 5 fields, got {len(parts)}")
            if ncols is None:
                ncols = len(parts)
            elif len(parts) != ncols:
                raise ValueError(
                    f"line {line_no}: inconsistent column count "
                    f"({len(parts)} vs {ncols})")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ValueError(f"line {line_no}: non-numeric field") from None
            times.append(vals[0])
            rows.append(vals[1:])
    if not times:
        raise ValueError(f"no trajectory samples in {path}")
    arr = np.asarray(rows, dtype=np.float64)
    if ncols == 4:
        poses = arr
    else:
        q = arr if quat_order == "wxyz" else arr[:, [3, 0, 1, 2]]
        poses = np.atleast_2d(axis_angle_from_quat(q))
    return PoseTrajectory(np.asarray(times), poses)
