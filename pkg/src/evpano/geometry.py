"""Rotation algebra, camera model, and cylindrical panoramic projection.

Conventions:
  - Poses are axis-angle 3-vectors ``theta`` (radians); the rotation matrix
    ``R = exp([theta]_x)`` maps camera-frame rays into the world frame.
  - Camera rays are unnormalized: ``backproject`` returns ``K^-1 (x, y, 1)``
    with z = 1.  The projection is scale invariant, so ray length never
    matters downstream.
  - Map coordinates (u, v) are continuous pixel positions on a cylinder of
    ``width x height`` pixels; integer coordinates sit on pixel centers.
    u wraps horizontally (period ``width``); v is bounded.
  - ``vec`` of a matrix is column-stacked (Fortran order) wherever a
    flattened rotation appears in a Jacobian chain.

Numerical policy:
  - Trigonometric coefficients of the exponential map and its left Jacobian
    switch to truncated Taylor series below ``SMALL_ANGLE`` to avoid 0/0.
  - The projection is singular where a rotated ray is parallel to the
    cylinder axis (X_x^2 + X_z^2 -> 0); scalar entry points raise
    ``PoleSingularity`` there, vectorized ones return a validity mask.
  - All public functions accept and return float64 arrays.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

# Below this angle (radians) the closed-form Rodrigues coefficients lose
# precision to cancellation; the series truncation error is ~theta^4 < 1e-32.
SMALL_ANGLE = 1e-8

# A rotated ray with X_x^2 + X_z^2 below this points at a cylinder pole and
# has no well-defined azimuth.  Rays of interest have norm >= 1, so the
# threshold is effectively an angular guard of ~1e-6 rad around the axis.
POLE_EPS = 1e-12


class PoleSingularity(ValueError):
    """Raised when a ray points along the cylinder axis and cannot be projected."""


# ---------------------------------------------------------------------------
# SO(3)
# ---------------------------------------------------------------------------

def skew(v: np.ndarray) -> np.ndarray:
    """Return the 3x3 matrix [v]_x with [v]_x w = v x w."""
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def rotation_from_axis_angle(theta: np.ndarray) -> np.ndarray:
    """Rodrigues formula: R = I + sin|t|/|t| [t]_x + (1-cos|t|)/|t|^2 [t]_x^2."""
    theta = np.asarray(theta, dtype=np.float64)
    angle = float(np.linalg.norm(theta))
    K = skew(theta)
    if angle < SMALL_ANGLE:
        # sin t / t = 1 - t^2/6, (1 - cos t)/t^2 = 1/2 - t^2/24
        a = 1.0 - angle**2 / 6.0
        b = 0.5 - angle**2 / 24.0
    else:
        a = np.sin(angle) / angle
        b = (1.0 - np.cos(angle)) / angle**2
    return np.eye(3) + a * K + b * (K @ K)


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    """Logarithm of a rotation matrix as an axis-angle vector in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    trace = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(trace))
    if angle < SMALL_ANGLE:
        # R ~ I + [theta]_x; read the vector off the antisymmetric part.
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle > np.pi - 1e-6:
        # Near pi the antisymmetric part vanishes; recover the axis from the
        # dominant column of R + I (eigenvector for eigenvalue +1).
        M = R + np.eye(3)
        col = int(np.argmax(np.diag(M)))
        axis = M[:, col]
        axis = axis / np.linalg.norm(axis)
        # Fix the sign using the antisymmetric part where it is nonzero.
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if w @ axis < 0.0:
            axis = -axis
        return angle * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return (angle / (2.0 * np.sin(angle))) * w


def so3_left_jacobian(theta: np.ndarray) -> np.ndarray:
    """Left Jacobian J_l with R(theta + d) ~= exp([J_l d]_x) R(theta).

    J_l = I + (1-cos|t|)/|t|^2 [t]_x + (|t|-sin|t|)/|t|^3 [t]_x^2, and maps a
    perturbation of the axis-angle vector to the equivalent left-multiplied
    rotation increment.  Singular only at |t| = 2 pi.
    """
    theta = np.asarray(theta, dtype=np.float64)
    angle = float(np.linalg.norm(theta))
    K = skew(theta)
    if angle < SMALL_ANGLE:
        b = 0.5 - angle**2 / 24.0
        c = 1.0 / 6.0 - angle**2 / 120.0
    else:
        b = (1.0 - np.cos(angle)) / angle**2
        c = (angle - np.sin(angle)) / angle**3
    return np.eye(3) + b * K + c * (K @ K)


# ---------------------------------------------------------------------------
# Camera model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; (cx, cy) in pixels, sensor size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 240
    height: int = 180

    def __post_init__(self) -> None:
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"sensor size must be positive, got {self.width}x{self.height}")

    @property
    def camera_matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @classmethod
    def from_file(cls, path) -> "CameraIntrinsics":
        """Parse a calibration file: one line ``fx fy cx cy [width height]``.

        Blank lines and lines starting with ``#`` are ignored.  Sensor size
        defaults to 240x180 when omitted.
        """
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                tokens = line.split()
                if len(tokens) not in (4, 6):
                    raise ValueError(
                        f"calibration line must have 4 or 6 numbers, got {len(tokens)}: {line!r}"
                    )
                fx, fy, cx, cy = (float(t) for t in tokens[:4])
                if len(tokens) == 6:
                    width, height = int(float(tokens[4])), int(float(tokens[5]))
                    return cls(fx, fy, cx, cy, width, height)
                return cls(fx, fy, cx, cy)
        raise ValueError(f"calibration file {path} contains no data line")


def backproject(x: float, y: float, intr: CameraIntrinsics) -> np.ndarray:
    """Camera ray K^-1 (x, y, 1), i.e. ((x-cx)/fx, (y-cy)/fy, 1)."""
    return np.array([(x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0])


def pixels_to_rays(x: np.ndarray, y: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized ``backproject``: (n,) pixel coords -> (n, 3) rays with z=1."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rays = np.empty((x.shape[0], 3))
    rays[:, 0] = (x - intr.cx) / intr.fx
    rays[:, 1] = (y - intr.cy) / intr.fy
    rays[:, 2] = 1.0
    return rays


@functools.lru_cache(maxsize=8)
def _pixel_grid_rays_cached(intr: CameraIntrinsics, stride: int) -> np.ndarray:
    ys, xs = np.mgrid[0:intr.height:stride, 0:intr.width:stride]
    rays = pixels_to_rays(xs.ravel(), ys.ravel(), intr)
    rays.setflags(write=False)
    return rays


def pixel_grid_rays(intr: CameraIntrinsics, stride: int = 1) -> np.ndarray:
    """Rays for every stride-th sensor pixel, row-major; cached per camera."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return _pixel_grid_rays_cached(intr, stride)


# ---------------------------------------------------------------------------
# Cylindrical panorama
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MapGeometry:
    """Size of the cylindrical panorama in pixels."""

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 2 or self.height < 2:
            raise ValueError(f"map must be at least 2x2 pixels, got {self.width}x{self.height}")

    @property
    def p_x(self) -> float:
        return self.width / 2.0

    @property
    def p_y(self) -> float:
        return self.height / 2.0

    @classmethod
    def for_camera(cls, intr: CameraIntrinsics, upsample: float = 1.0) -> "MapGeometry":
        """Panorama sized so map resolution matches the sensor at the equator.

        width = round(2 pi fx * upsample), height = round(pi fy * upsample),
        each rounded up to the next even number so the principal point
        (p_x, p_y) falls on a pixel boundary.
        """
        if upsample <= 0.0:
            raise ValueError(f"upsample must be positive, got {upsample}")
        width = int(round(2.0 * np.pi * intr.fx * upsample))
        height = int(round(np.pi * intr.fy * upsample))
        width += width % 2
        height += height % 2
        return cls(width, height)

    def wrap_u(self, u):
        """Wrap horizontal coordinates into [0, width)."""
        return np.mod(u, self.width)

    def wrapped_delta_u(self, du):
        """Shortest signed horizontal displacement, in (-width/2, width/2]."""
        half = self.width / 2.0
        return half - np.mod(half - du, self.width)

    def contains_v(self, v) -> np.ndarray:
        """True where v lies within pixel centers [0, height-1]."""
        return (np.asarray(v) >= 0.0) & (np.asarray(v) <= self.height - 1.0)


def project_rays(X: np.ndarray, geom: MapGeometry):
    """Project rotated rays (n, 3) onto the cylinder.

    Returns ``(u, v, valid)`` where u in [0, width) wraps, v is unbounded,
    and ``valid`` is False for rays at the pole singularity (their u, v are
    set to 0).  v in-bounds checks are the caller's concern.
    """
    X = np.asarray(X, dtype=np.float64)
    rho_sq = X[:, 0] ** 2 + X[:, 2] ** 2
    valid = rho_sq >= POLE_EPS
    safe = np.where(valid, rho_sq, 1.0)
    u = geom.p_x * (1.0 + np.arctan2(X[:, 0], X[:, 2]) / np.pi)
    v = geom.p_y * (1.0 + X[:, 1] / np.sqrt(safe))
    u = geom.wrap_u(u)
    u[~valid] = 0.0
    v[~valid] = 0.0
    return u, v, valid


def project_ray(X: np.ndarray, geom: MapGeometry) -> np.ndarray:
    """Project one rotated ray; raises PoleSingularity on the cylinder axis."""
    X = np.asarray(X, dtype=np.float64)
    rho_sq = X[0] ** 2 + X[2] ** 2
    if rho_sq < POLE_EPS:
        raise PoleSingularity(f"ray {X} is parallel to the cylinder axis")
    u = geom.p_x * (1.0 + np.arctan2(X[0], X[2]) / np.pi)
    v = geom.p_y * (1.0 + X[1] / np.sqrt(rho_sq))
    return np.array([float(geom.wrap_u(u)), v])


def project(x: float, y: float, theta: np.ndarray, intr: CameraIntrinsics,
            geom: MapGeometry) -> np.ndarray:
    """Map position of sensor pixel (x, y) under pose theta."""
    R = rotation_from_axis_angle(theta)
    return project_ray(R @ backproject(x, y, intr), geom)


def projection_jacobian(X: np.ndarray, geom: MapGeometry) -> np.ndarray:
    """d(u, v)/dX of the cylindrical projection at rotated ray X; (2, 3).

    With D = X_x^2 + X_z^2:
      du/dX = p_x/pi * ( X_z/D, 0, -X_x/D )
      dv/dX = p_y    * ( -X_x X_y / D^1.5, 1/sqrt(D), -X_z X_y / D^1.5 )
    Rows are orthogonal to X (the projection is scale invariant).
    """
    X = np.asarray(X, dtype=np.float64)
    D = X[0] ** 2 + X[2] ** 2
    if D < POLE_EPS:
        raise PoleSingularity(f"projection Jacobian undefined at pole, ray {X}")
    rho = np.sqrt(D)
    return np.array([
        [geom.p_x * X[2] / (np.pi * D), 0.0, -geom.p_x * X[0] / (np.pi * D)],
        [-geom.p_y * X[0] * X[1] / (D * rho), geom.p_y / rho, -geom.p_y * X[2] * X[1] / (D * rho)],
    ])


def projection_jacobians(X: np.ndarray, geom: MapGeometry):
    """Vectorized ``projection_jacobian``: (n, 3) rays -> ((n, 2, 3), valid)."""
    X = np.asarray(X, dtype=np.float64)
    D = X[:, 0] ** 2 + X[:, 2] ** 2
    valid = D >= POLE_EPS
    D = np.where(valid, D, 1.0)
    rho = np.sqrt(D)
    out = np.zeros((X.shape[0], 2, 3))
    out[:, 0, 0] = geom.p_x * X[:, 2] / (np.pi * D)
    out[:, 0, 2] = -geom.p_x * X[:, 0] / (np.pi * D)
    out[:, 1, 0] = -geom.p_y * X[:, 0] * X[:, 1] / (D * rho)
    out[:, 1, 1] = geom.p_y / rho
    out[:, 1, 2] = -geom.p_y * X[:, 2] * X[:, 1] / (D * rho)
    out[~valid] = 0.0
    return out, valid


def rotation_jacobian(theta: np.ndarray) -> np.ndarray:
    """Blocks d vec(R)/d(epsilon) for a left increment exp([eps]_x) R; (9, 3).

    Row-block i is -[r_i]_x where r_i is the i-th column of R = exp([theta]_x)
    and vec stacks columns.  This is the derivative with respect to a rotation
    increment applied on the left at theta; compose with ``so3_left_jacobian``
    to differentiate with respect to the axis-angle vector itself.
    """
    R = rotation_from_axis_angle(theta)
    return np.vstack([-skew(R[:, i]) for i in range(3)])


def transform_jacobian(X: np.ndarray) -> np.ndarray:
    """d(R X)/d vec(R) = X^T kron I_3; (3, 9) for column-stacked vec."""
    X = np.asarray(X, dtype=np.float64)
    out = np.zeros((3, 9))
    for i in range(3):
        out[:, 3 * i:3 * i + 3] = X[i] * np.eye(3)
    return out


def pose_projection_jacobian(x: float, y: float, theta: np.ndarray,
                             intr: CameraIntrinsics, geom: MapGeometry) -> np.ndarray:
    """Full chain d(u, v)/d theta for pixel (x, y) at pose theta; (2, 3).

    Uses the contraction transform_jacobian(X) @ rotation_jacobian(theta)
    = -[R X]_x, then composes with the left Jacobian:
      d phi / d theta = J_P(RX) (-[RX]_x) J_l(theta).
    """
    R = rotation_from_axis_angle(theta)
    Xr = R @ backproject(x, y, intr)
    return projection_jacobian(Xr, geom) @ (-skew(Xr)) @ so3_left_jacobian(theta)
