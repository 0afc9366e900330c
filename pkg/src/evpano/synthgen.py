"""Synthetic event streams from a log-intensity panorama under pure rotation.

An event camera pixel fires when the scene's log-intensity at its line of
sight changes by more than a contrast threshold C.  Under rotation the line
of sight walks a path across the panorama; every map pixel of traversed
path is one firing opportunity (a "visit"), taken exactly when the
projection of the local log-intensity gradient onto the sweep direction s
exceeds C:

    |<grad log I(phi(x, theta)), s>| > C,   polarity = sign of the dot.

Event counts thus scale with sweep speed, and for a sweep direction uniform
on the unit circle a visit fires with probability
1 - (2/pi) asin(C / |grad log I|)  (0 when the gradient is at or below C),
which `event_probability` evaluates analytically and
`monte_carlo_event_probability` estimates by brute force.  The generated
streams therefore carry a known per-visit event statistic that the mapping
side of the pipeline can be validated against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .events import EventArray
from .geometry import (
    MapGeometry,
    pixel_grid_rays,
    project_rays,
    rotation_from_axis_angle,
)
from .mapping import _bilinear_indices, grid_gradients
from .trajectories import (
    PoseTrajectory,
    axis_angle_from_quat,
    quat_from_axis_angle,
    slerp_quat,
)

_ZERO_SEGMENT = 1e-12  # below this map-pixel displacement a segment is "no motion"


class DegenerateTrajectory(ValueError):
    """Trajectory has too few samples to define any motion."""


def event_probability(grad_mag, C):
    """Probability that a unit-direction segment fires a pixel whose
    log-intensity gradient magnitude is ``grad_mag``: zero at or below the
    contrast threshold, else 1 - (2/pi) asin(C / grad_mag).  Array-friendly.
    """
    g = np.asarray(grad_mag, dtype=np.float64)
    if np.any(g < 0.0):
        raise ValueError("gradient magnitude must be non-negative")
    if C < 0.0:
        raise ValueError("contrast threshold must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(g > C, C / np.where(g > 0.0, g, 1.0), 1.0)
        p = np.where(g > C, 1.0 - (2.0 / np.pi) * np.arcsin(ratio), 0.0)
    if np.ndim(grad_mag) == 0:
        return float(p)
    return p


def monte_carlo_event_probability(grad, C, n_samples: int, rng_seed: int = 0):
    """Brute-force estimate of the firing probability: the fraction of
    directions uniform on the unit circle whose dot with ``grad`` exceeds C
    in magnitude."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != (2,):
        raise ValueError("grad must be a 2-vector")
    rng = np.random.default_rng(rng_seed)
    hits = 0
    remaining = int(n_samples)
    while remaining > 0:
        chunk = min(remaining, 1 << 19)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=chunk)
        dots = g[0] * np.cos(phi) + g[1] * np.sin(phi)
        hits += int(np.count_nonzero(np.abs(dots) > C))
        remaining -= chunk
    return hits / float(n_samples)


class SynthPanorama:
    """Log-intensity panorama on the cylindrical grid plus its gradient
    field (central differences, 1/pixel, wrapped in u)."""

    __slots__ = ("log_intensity", "grad_u", "grad_v", "geom")

    def __init__(self, log_intensity: np.ndarray):
        grid = np.asarray(log_intensity, dtype=np.float64)
        if grid.ndim != 2:
            raise ValueError("log-intensity grid must be 2-D")
        if not np.isfinite(grid).all():
            raise ValueError("log-intensity grid contains non-finite values")
        self.log_intensity = grid
        self.grad_u, self.grad_v = grid_gradients(grid)
        self.geom = MapGeometry(grid.shape[1], grid.shape[0])

    @classmethod
    def from_intensity(cls, intensity: np.ndarray) -> "SynthPanorama":
        arr = np.asarray(intensity, dtype=np.float64)
        if np.any(arr <= 0.0):
            raise ValueError("intensity must be strictly positive")
        return cls(np.log(arr))

    @classmethod
    def from_image(cls, path) -> "SynthPanorama":
        """Load an 8/16-bit grayscale image; intensities are scaled to
        (0, 1] and converted as log(I + 1)."""
        img = Image.open(path)
        if img.mode not in ("L", "I", "I;16"):
            img = img.convert("L")
        raw = np.asarray(img, dtype=np.float64)
        full_scale = 65535.0 if img.mode in ("I", "I;16") else 255.0
        scaled = (raw + 1.0) / (full_scale + 1.0)
        return cls(np.log1p(scaled))

    @property
    def height(self) -> int:
        return self.log_intensity.shape[0]

    @property
    def width(self) -> int:
        return self.log_intensity.shape[1]

    @property
    def gradient_magnitude(self) -> np.ndarray:
        return np.hypot(self.grad_u, self.grad_v)

    def gradients_at(self, u, v):
        """Bilinear (d log I/du, d log I/dv) at continuous positions;
        returns (gu, gv, ok) with out-of-range v flagged invalid."""
        u = self.geom.wrap_u(np.asarray(u, dtype=np.float64))
        v = np.asarray(v, dtype=np.float64)
        ok = self.geom.contains_v(v)
        vs = np.where(ok, v, 0.0)
        idx, wts = _bilinear_indices(u, vs, self.width, self.height)
        gu = (self.grad_u.ravel()[idx] * wts).sum(axis=0)
        gv = (self.grad_v.ravel()[idx] * wts).sum(axis=0)
        gu[~ok] = 0.0
        gv[~ok] = 0.0
        return gu, gv, ok


def probability_panorama(pano: SynthPanorama, C: float) -> np.ndarray:
    """Analytic per-pixel firing probability grid for uniform directions."""
    return event_probability(pano.gradient_magnitude, C)


@dataclass(frozen=True)
class SynthConfig:
    C: float
    segment_length: float = 0.5   # map pixels per path sub-segment
    noise_rate: float = 0.0       # spurious events / pixel / second

    def __post_init__(self):
        if self.C <= 0.0:
            raise ValueError("contrast threshold C must be > 0")
        if self.segment_length <= 0.0:
            raise ValueError("segment_length must be > 0")
        if self.noise_rate < 0.0:
            raise ValueError("noise_rate must be >= 0")


def generate_events(pano: SynthPanorama, trajectory: PoseTrajectory,
                    intr, cfg: SynthConfig, rng_seed: int = 0):
    """Walk the pose path and emit threshold-crossing events.

    Each camera pixel's line of sight sweeps a path across the panorama;
    consecutive trajectory samples are interpolated and subdivided so no
    pixel moves more than ``cfg.segment_length`` map pixels per sub-segment.
    A pixel is *visited* once per map pixel of swept path, and each visit
    fires at most one event: exactly when the projection of the local
    log-intensity gradient onto the sweep direction exceeds C in magnitude
    (polarity = its sign).  Event counts therefore grow with path length —
    the same per-pixel-sweep accounting the occurrence map normalizes by —
    and under a uniformly random sweep direction a visit fires with the
    probability `event_probability` evaluates.  Poisson noise events are
    appended at ``cfg.noise_rate`` per pixel per second.

    Returns (events sorted by time, the ground-truth trajectory).
    """
    if not isinstance(trajectory, PoseTrajectory):
        raise TypeError("trajectory must be a PoseTrajectory")
    if len(trajectory) < 2:
        raise DegenerateTrajectory("need at least 2 trajectory samples")
    if np.any(np.diff(trajectory.t) <= 0.0):
        raise ValueError("trajectory timestamps must be strictly increasing")

    rng = np.random.default_rng(rng_seed)
    rays = pixel_grid_rays(intr)
    n_px = rays.shape[0]
    xs_all = np.tile(np.arange(intr.width, dtype=np.int32), intr.height)
    ys_all = np.repeat(np.arange(intr.height, dtype=np.int32), intr.width)
    quats = quat_from_axis_angle(trajectory.poses)

    ev_t, ev_x, ev_y, ev_p = [], [], [], []

    def positions(theta):
        R = rotation_from_axis_angle(theta)
        return project_rays(rays @ R.T, pano.geom)

    # Swept map-path length per pixel since its last visit; a visit (one
    # firing opportunity) happens each time this reaches a full map pixel.
    acc = np.zeros(n_px)

    u_a, v_a, ok_a = positions(trajectory.poses[0])
    for i in range(len(trajectory) - 1):
        t_a, t_b = trajectory.t[i], trajectory.t[i + 1]
        u_b, v_b, ok_b = positions(trajectory.poses[i + 1])
        du = pano.geom.wrapped_delta_u(u_b - u_a)
        disp = np.hypot(du, v_b - v_a)
        disp[~(ok_a & ok_b)] = 0.0
        max_disp = disp.max() if disp.size else 0.0
        m = max(1, int(np.ceil(max_disp / cfg.segment_length)))

        u_s, v_s, ok_s = u_a, v_a, ok_a
        for j in range(m):
            if j + 1 < m:
                frac = (j + 1) / m
                q = slerp_quat(quats[i][None], quats[i + 1][None],
                               np.array([frac]))
                theta_e = axis_angle_from_quat(q[0])
                u_e, v_e, ok_e = positions(theta_e)
            else:
                u_e, v_e, ok_e = u_b, v_b, ok_b
            t_e = t_a + (t_b - t_a) * (j + 1) / m

            su = pano.geom.wrapped_delta_u(u_e - u_s)
            sv = v_e - v_s
            norm = np.hypot(su, sv)
            pair_ok = ok_s & ok_e
            acc[~pair_ok] = 0.0
            live = pair_ok & (norm > _ZERO_SEGMENT)
            acc[live] += norm[live]
            ready = np.nonzero(live & (acc >= 1.0))[0]
            if ready.size:
                # All visits completed within one sub-segment share its
                # direction, so a single threshold test decides them all.
                visits = np.floor(acc[ready])
                acc[ready] -= visits
                gu, gv, ok_g = pano.gradients_at(u_s[ready], v_s[ready])
                dots = np.where(ok_g, (gu * su[ready] + gv * sv[ready])
                                / norm[ready], 0.0)
                fire = np.abs(dots) > cfg.C
                if np.any(fire):
                    idx = np.repeat(ready[fire], visits[fire].astype(np.int64))
                    ev_t.append(np.full(idx.shape[0], t_e))
                    ev_x.append(xs_all[idx])
                    ev_y.append(ys_all[idx])
                    ev_p.append(np.repeat(
                        np.where(dots[fire] > 0.0, 1, -1),
                        visits[fire].astype(np.int64)).astype(np.int8))
            u_s, v_s, ok_s = u_e, v_e, ok_e
        u_a, v_a, ok_a = u_b, v_b, ok_b

    t0, t1 = trajectory.time_span
    if cfg.noise_rate > 0.0 and t1 > t0:
        n_noise = int(rng.poisson(cfg.noise_rate * n_px * (t1 - t0)))
        if n_noise > 0:
            ev_t.append(rng.uniform(t0, t1, size=n_noise))
            ev_x.append(rng.integers(0, intr.width, size=n_noise,
                                     dtype=np.int32))
            ev_y.append(rng.integers(0, intr.height, size=n_noise,
                                     dtype=np.int32))
            ev_p.append((rng.integers(0, 2, size=n_noise) * 2 - 1).astype(np.int8))

    if not ev_t:
        return EventArray.empty(), trajectory
    t = np.concatenate(ev_t)
    x = np.concatenate(ev_x)
    y = np.concatenate(ev_y)
    p = np.concatenate(ev_p)
    order = np.argsort(t, kind="stable")
    return EventArray(t[order], x[order], y[order], p[order]), trajectory
