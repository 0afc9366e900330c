"""Per-packet pose estimation on the panoramic probability map.

Each event contributes a residual r_n = 1 - M(phi(x_n, theta)): it should
have fired where the map says events are likely.  A packet's pose minimizes

    E(theta) = alpha/2 |theta - theta_prev|^2 + 1/2 sum_n r_n(theta)^2

by damped Gauss-Newton with Nesterov extrapolation: each iteration forms the
lookahead pose, linearizes there, and solves the 3x3 normal equations

    theta_next = look - (J^T J + alpha I)^-1 (J^T r + alpha (look - theta_prev))

where J rows are d r_n / d theta = -grad M . d phi / d theta.  Events whose
projection leaves the map (vertical bounds or pole) are excluded from the
normal equations; the mean_residual statistic counts them as residual 1 so
that gating still sees them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import EventArray, EventPacket
from .geometry import (
    CameraIntrinsics,
    pixels_to_rays,
    project_rays,
    projection_jacobians,
    rotation_from_axis_angle,
    so3_left_jacobian,
)
from .mapping import PanoramicMap


class SingularSystem(RuntimeError):
    """Normal equations not solvable (alpha = 0 with rank-deficient J^T J)."""


@dataclass(frozen=True)
class TrackerConfig:
    alpha: float = 1.0
    beta: float = 0.4
    max_iters: int = 10
    min_valid_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not 0.0 <= self.min_valid_fraction <= 1.0:
            raise ValueError(
                f"min_valid_fraction must be in [0, 1], got {self.min_valid_fraction}")


@dataclass
class NormalEqStats:
    n_total: int
    n_valid: int
    mean_residual: float  # mean squared residual, invalid events counted as 1

    @property
    def valid_fraction(self) -> float:
        return self.n_valid / self.n_total if self.n_total else 0.0


@dataclass
class TrackResult:
    pose: np.ndarray
    mean_residual: float
    valid_fraction: float
    iterations_used: int
    low_confidence: bool = False
    iterates: list = field(default_factory=list)  # poses visited, theta_prev first


def _as_events(packet) -> EventArray:
    if isinstance(packet, EventPacket):
        return packet.events
    return packet


def _project_events(events: EventArray, theta, pmap: PanoramicMap,
                    intr: CameraIntrinsics):
    rays = pixels_to_rays(events.x, events.y, intr)
    R = rotation_from_axis_angle(theta)
    Xr = rays @ R.T
    u, v, ok = project_rays(Xr, pmap.geom)
    return Xr, u, v, ok


def residuals(packet, theta, pmap: PanoramicMap, intr: CameraIntrinsics):
    """Per-event residuals 1 - M and a validity mask.

    Masked entries (projection off the map) read as residual 1; they carry
    no gradient information and are excluded from the normal equations.
    """
    events = _as_events(packet)
    theta = np.asarray(theta, dtype=np.float64)
    if len(events) == 0:
        return np.empty(0), np.empty(0, dtype=bool)
    _, u, v, ok = _project_events(events, theta, pmap, intr)
    vals, inb = pmap.values_at(u, v)
    valid = ok & inb
    r = 1.0 - vals
    r[~valid] = 1.0
    return r, valid


def normal_equations(packet, theta, pmap: PanoramicMap, intr: CameraIntrinsics):
    """Accumulated (J^T J, J^T r, stats) of the packet at pose theta.

    Row n of J is d r_n / d theta = -grad M . J_P(X_n) (-[X_n]_x) J_l(theta),
    contracted as (X_n x a_n) J_l with a_n = grad M . J_P, so only (n, 3)
    intermediates are formed.
    """
    events = _as_events(packet)
    theta = np.asarray(theta, dtype=np.float64)
    n = len(events)
    if n == 0:
        return np.zeros((3, 3)), np.zeros(3), NormalEqStats(0, 0, 1.0)
    Xr, u, v, ok = _project_events(events, theta, pmap, intr)
    vals, inb = pmap.values_at(u, v)
    valid = ok & inb
    r = 1.0 - vals
    r[~valid] = 1.0

    gu, gv, _ = pmap.gradients_at(u, v)
    PJ, _ = projection_jacobians(Xr, pmap.geom)
    a = gu[:, None] * PJ[:, 0, :] + gv[:, None] * PJ[:, 1, :]
    rows = -(np.cross(Xr, a) @ so3_left_jacobian(theta))
    rows[~valid] = 0.0

    JtJ = rows.T @ rows
    Jtr = rows.T @ np.where(valid, r, 0.0)
    stats = NormalEqStats(n, int(np.count_nonzero(valid)), float(np.mean(r**2)))
    return JtJ, Jtr, stats


def gn_step(theta_k, theta_prev, JtJ, Jtr, alpha: float) -> np.ndarray:
    """One damped Gauss-Newton update of the Eq-13-style objective.

    Solves (J^T J + alpha I) delta = J^T r + alpha (theta_k - theta_prev) and
    returns theta_k - delta; pure damping (J = 0) therefore steps exactly to
    theta_prev, and alpha -> inf drives the update toward theta_prev.
    """
    theta_k = np.asarray(theta_k, dtype=np.float64)
    theta_prev = np.asarray(theta_prev, dtype=np.float64)
    A = JtJ + alpha * np.eye(3)
    g = Jtr + alpha * (theta_k - theta_prev)
    try:
        delta = np.linalg.solve(A, g)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"normal equations are singular: {exc}") from None
    if not np.all(np.isfinite(delta)):
        raise SingularSystem("normal equations produced a non-finite step")
    return theta_k - delta


def packet_energy(packet, theta, theta_prev, pmap: PanoramicMap,
                  intr: CameraIntrinsics, alpha: float) -> float:
    """Damped objective value: alpha/2 |theta - theta_prev|^2 + 1/2 sum r^2
    over valid events (the quantity the tracker descends)."""
    r, valid = residuals(packet, theta, pmap, intr)
    theta = np.asarray(theta, dtype=np.float64)
    theta_prev = np.asarray(theta_prev, dtype=np.float64)
    data = 0.5 * float(np.sum(r[valid] ** 2))
    return data + 0.5 * alpha * float(np.sum((theta - theta_prev) ** 2))


def track_packet(packet, theta_prev, pmap: PanoramicMap, intr: CameraIntrinsics,
                 cfg: TrackerConfig) -> TrackResult:
    """Refine the packet pose from theta_prev by accelerated Gauss-Newton.

    Iteration k: look = theta_k + beta (theta_k - theta_k-1); linearize at
    look; theta_k+1 = gn_step(look, ...).  theta_0 = theta_-1 = theta_prev.
    Degenerate packets (valid fraction below cfg.min_valid_fraction at any
    linearization point, or an empty packet) return theta_prev flagged
    low-confidence.  Final statistics are evaluated at the returned pose.
    """
    events = _as_events(packet)
    theta_prev = np.asarray(theta_prev, dtype=np.float64)
    iterates = [theta_prev.copy()]
    if len(events) == 0:
        return TrackResult(theta_prev.copy(), 1.0, 0.0, 0, True, iterates)

    th_k = theta_prev.copy()
    th_km1 = theta_prev.copy()
    for k in range(cfg.max_iters):
        look = th_k + cfg.beta * (th_k - th_km1)
        JtJ, Jtr, stats = normal_equations(events, look, pmap, intr)
        if stats.valid_fraction < cfg.min_valid_fraction:
            return TrackResult(theta_prev.copy(), stats.mean_residual,
                               stats.valid_fraction, k, True, iterates)
        th_km1, th_k = th_k, gn_step(look, theta_prev, JtJ, Jtr, cfg.alpha)
        iterates.append(th_k.copy())

    r, valid = residuals(events, th_k, pmap, intr)
    mean_residual = float(np.mean(r**2))
    valid_fraction = float(np.count_nonzero(valid)) / len(events)
    if valid_fraction < cfg.min_valid_fraction:
        return TrackResult(theta_prev.copy(), mean_residual, valid_fraction,
                           cfg.max_iters, True, iterates)
    return TrackResult(th_k, mean_residual, valid_fraction, cfg.max_iters,
                       False, iterates)
