"""Panoramic event-occurrence map on a cylinder.

The map keeps two accumulator grids of shape (height, width):
  O  how much event mass each map pixel has received,
  N  how much camera-path length has swept across it.
Their ratio M = O / N (clipped to [0, 1], 0 where N = 0) estimates the
probability that a pixel fires an event while the camera sweeps one map
pixel across it, which is what the tracker matches events against.

Coordinates follow `geometry`: u wraps with period ``width``, v is valid on
pixel centers [0, height-1].  Deposits whose center leaves the vertical
range are skipped and counted in ``dropped_events``; samples outside it are
flagged invalid (vectorized) or raise ``OutOfBounds`` (scalar).

Deposits are splatted: bilinear 4-neighbor weights at native resolution,
and a truncated Gaussian (sigma = upsample / 2, cut at 2 sigma, mass
renormalized to 1) once ``upsample > GAUSSIAN_SPLAT_THRESHOLD``, so that a
sub-pixel event footprint still covers the finer grid.
"""

from __future__ import annotations

import numpy as np

from .geometry import (
    CameraIntrinsics,
    MapGeometry,
    pixel_grid_rays,
    project_rays,
    rotation_from_axis_angle,
)

# Above this upsampling factor a bilinear footprint no longer covers the
# finer grid densely; switch to the Gaussian splat.
GAUSSIAN_SPLAT_THRESHOLD = 1.5

_TOUCH_EPS = 1e-12  # splat weight below which a pixel does not count as touched


def grid_gradients(grid: np.ndarray):
    """Central-difference gradients of a cylindrical grid, in 1/pixel.

    u wraps with the grid width; v falls back to one-sided differences on
    the two boundary rows.  Shared by the map and by any other field that
    lives on the same cylinder.
    """
    gu = (np.roll(grid, -1, axis=1) - np.roll(grid, 1, axis=1)) * 0.5
    gv = np.empty_like(grid)
    gv[1:-1] = (grid[2:] - grid[:-2]) * 0.5
    gv[0] = grid[1] - grid[0]
    gv[-1] = grid[-1] - grid[-2]
    return gu, gv


class OutOfBounds(ValueError):
    """Sample position outside the vertical extent of the panorama."""


def _bilinear_indices(u, v, width: int, height: int):
    """Corner flat indices and weights for wrapped-u bilinear interpolation.

    Callers guarantee v in [0, height-1]; v = height-1 resolves to the top
    cell with fractional coordinate 1 so no index leaves the grid.
    """
    i0 = np.floor(u).astype(np.int64) % width
    i1 = (i0 + 1) % width
    j0 = np.floor(v).astype(np.int64)
    np.clip(j0, 0, height - 2, out=j0)
    fu = u - np.floor(u)
    fv = v - j0
    w00 = (1.0 - fu) * (1.0 - fv)
    w10 = fu * (1.0 - fv)
    w01 = (1.0 - fu) * fv
    w11 = fu * fv
    base0 = j0 * width
    base1 = base0 + width
    idx = np.stack([base0 + i0, base0 + i1, base1 + i0, base1 + i1])
    wts = np.stack([w00, w10, w01, w11])
    return idx, wts


class PanoramicMap:
    """Occurrence / normalization accumulator pair with bilinear access."""

    def __init__(self, width: int, height: int, upsample: float = 1.0):
        if upsample <= 0.0:
            raise ValueError(f"upsample must be positive, got {upsample}")
        self.geom = MapGeometry(width=int(width), height=int(height))
        self.upsample = float(upsample)
        self.occurrence = np.zeros((height, width))
        self.normalization = np.zeros((height, width))
        self.dropped_events = 0
        self._ratio = np.zeros((height, width))
        self._grad_u = np.zeros((height, width))
        self._grad_v = np.zeros((height, width))
        self._dirty = False

    @classmethod
    def for_camera(cls, intr: CameraIntrinsics, upsample: float = 1.0) -> "PanoramicMap":
        geom = MapGeometry.for_camera(intr, upsample)
        return cls(geom.width, geom.height, upsample)

    @property
    def width(self) -> int:
        return self.geom.width

    @property
    def height(self) -> int:
        return self.geom.height

    @property
    def uses_gaussian_splat(self) -> bool:
        return self.upsample > GAUSSIAN_SPLAT_THRESHOLD

    # -- ratio and gradient grids ------------------------------------------

    def _refresh(self) -> None:
        if not self._dirty:
            return
        covered = self.normalization > 0.0
        np.divide(self.occurrence, np.where(covered, self.normalization, 1.0),
                  out=self._ratio)
        self._ratio[~covered] = 0.0
        np.clip(self._ratio, 0.0, 1.0, out=self._ratio)
        self._grad_u, self._grad_v = grid_gradients(self._ratio)
        self._dirty = False

    def probability_grid(self) -> np.ndarray:
        """The current ratio grid M = clip(O/N, 0, 1); a defensive copy."""
        self._refresh()
        return self._ratio.copy()

    def values_at(self, u, v):
        """Bilinear M at continuous positions; invalid samples read as 0."""
        self._refresh()
        u = self.geom.wrap_u(np.asarray(u, dtype=np.float64))
        v = np.asarray(v, dtype=np.float64)
        ok = self.geom.contains_v(v)
        vs = np.where(ok, v, 0.0)
        idx, wts = _bilinear_indices(u, vs, self.width, self.height)
        vals = (self._ratio.ravel()[idx] * wts).sum(axis=0)
        vals[~ok] = 0.0
        return vals, ok

    def gradients_at(self, u, v):
        """Bilinear (dM/du, dM/dv); equals central differences of values_at
        in the grid interior because both operations are linear."""
        self._refresh()
        u = self.geom.wrap_u(np.asarray(u, dtype=np.float64))
        v = np.asarray(v, dtype=np.float64)
        ok = self.geom.contains_v(v)
        vs = np.where(ok, v, 0.0)
        idx, wts = _bilinear_indices(u, vs, self.width, self.height)
        gu = (self._grad_u.ravel()[idx] * wts).sum(axis=0)
        gv = (self._grad_v.ravel()[idx] * wts).sum(axis=0)
        gu[~ok] = 0.0
        gv[~ok] = 0.0
        return gu, gv, ok

    def map_value(self, u: float, v: float) -> float:
        vals, ok = self.values_at(np.array([u]), np.array([v]))
        if not ok[0]:
            raise OutOfBounds(f"sample position v={v} outside [0, {self.height - 1}]")
        return float(vals[0])

    def map_gradient(self, u: float, v: float) -> np.ndarray:
        gu, gv, ok = self.gradients_at(np.array([u]), np.array([v]))
        if not ok[0]:
            raise OutOfBounds(f"sample position v={v} outside [0, {self.height - 1}]")
        return np.array([float(gu[0]), float(gv[0])])

    # -- deposits -----------------------------------------------------------

    def _splat(self, grid: np.ndarray, u, v, weights) -> int:
        """Deposit ``weights`` at continuous positions; returns dropped count."""
        u = self.geom.wrap_u(np.asarray(u, dtype=np.float64))
        v = np.asarray(v, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        ok = self.geom.contains_v(v)
        dropped = int(np.count_nonzero(~ok))
        if dropped:
            u, v, weights = u[ok], v[ok], weights[ok]
        if u.size == 0:
            return dropped
        if not self.uses_gaussian_splat:
            idx, wts = _bilinear_indices(u, v, self.width, self.height)
            flat = np.bincount(idx.ravel(), weights=(wts * weights).ravel(),
                               minlength=grid.size)
        else:
            flat = self._gaussian_deposit(u, v, weights, grid.size)
        grid += flat.reshape(grid.shape)
        self._dirty = True
        return dropped

    def _gaussian_deposit(self, u, v, weights, size: int) -> np.ndarray:
        sigma = self.upsample / 2.0
        radius = int(np.ceil(2.0 * sigma))
        offs = np.arange(-radius, radius + 2, dtype=np.float64)
        # All (du, dv) pixel offsets around floor(u), floor(v).
        dv_off, du_off = np.meshgrid(offs, offs, indexing="ij")
        du_off = du_off.ravel()
        dv_off = dv_off.ravel()
        iu = np.floor(u)[:, None] + du_off[None, :]
        jv = np.floor(v)[:, None] + dv_off[None, :]
        d2 = (iu - u[:, None]) ** 2 + (jv - v[:, None]) ** 2
        w = np.exp(-d2 / (2.0 * sigma * sigma))
        w[d2 > (2.0 * sigma) ** 2] = 0.0
        w[(jv < 0) | (jv > self.height - 1)] = 0.0
        norm = w.sum(axis=1)
        live = norm > _TOUCH_EPS
        w[live] /= norm[live, None]
        w *= weights[:, None]
        idx = (jv.astype(np.int64).clip(0, self.height - 1) * self.width
               + (iu.astype(np.int64) % self.width))
        return np.bincount(idx.ravel(), weights=w.ravel(), minlength=size)

    def add_occurrences(self, u, v, weights=None) -> int:
        """Splat event mass into O; returns how many deposits were dropped."""
        u = np.asarray(u, dtype=np.float64)
        if weights is None:
            weights = np.ones_like(u)
        dropped = self._splat(self.occurrence, u, v, weights)
        self.dropped_events += dropped
        return dropped

    def update_occurrence(self, u: float, v: float) -> None:
        """Single-event O update; silently skipped (and counted) off-map."""
        self.add_occurrences(np.array([u]), np.array([v]))

    def seed_normalization(self, u, v) -> None:
        """Raise N to at least 1 on every pixel an occurrence splat touches.

        Used during bootstrap, before real path lengths exist, so that the
        ratio is well-defined where events have been deposited.
        """
        u = np.asarray(u, dtype=np.float64)
        touch = np.zeros_like(self.normalization)
        self._splat(touch, u, v, np.ones_like(u))
        np.maximum(self.normalization, (touch > _TOUCH_EPS) * 1.0,
                   out=self.normalization)
        self._dirty = True

    def update_normalization(self, theta_t, theta_prev, intr: CameraIntrinsics,
                             stride: int = 1) -> None:
        """Sweep update of N for a pose step theta_prev -> theta_t.

        Every stride-th sensor pixel is projected under both poses; the
        length of its map displacement is splatted at its new position.
        With stride > 1 each sample stands in for stride^2 pixels and its
        deposit is scaled accordingly.
        """
        rays = pixel_grid_rays(intr, stride)
        R_t = rotation_from_axis_angle(theta_t)
        R_p = rotation_from_axis_angle(theta_prev)
        u_t, v_t, ok_t = project_rays(rays @ R_t.T, self.geom)
        u_p, v_p, ok_p = project_rays(rays @ R_p.T, self.geom)
        ok = ok_t & ok_p
        du = self.geom.wrapped_delta_u(u_t - u_p)
        # Lengths are measured on the reference grid (upsample 1).  Events
        # deposit unit mass however fine the grid is, so visit lengths must
        # stay in the same units or the ratio dims by the upsample factor.
        lengths = (np.hypot(du, v_t - v_p)
                   * float(stride * stride) / self.upsample)
        self._splat(self.normalization, u_t[ok], v_t[ok], lengths[ok])
        self._dirty = True

    # -- export and persistence ---------------------------------------------

    def export_image(self) -> np.ndarray:
        """Ratio grid as uint8 (0..255), suitable for writing as an image."""
        self._refresh()
        return np.round(self._ratio * 255.0).astype(np.uint8)

    def save_checkpoint(self, path) -> None:
        """Binary checkpoint: ASCII header line, then O and N as <f4 row-major."""
        header = f"EVMAP1 {self.width} {self.height} {self.upsample!r}\n"
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(self.occurrence.astype("<f4").tobytes())
            fh.write(self.normalization.astype("<f4").tobytes())

    @classmethod
    def load_checkpoint(cls, path) -> "PanoramicMap":
        with open(path, "rb") as fh:
            header = fh.readline().decode("ascii", errors="replace").strip()
            tokens = header.split()
            if len(tokens) != 4 or tokens[0] != "EVMAP1":
                raise ValueError(f"not a map checkpoint: header {header!r}")
            width, height = int(tokens[1]), int(tokens[2])
            upsample = float(tokens[3])
            count = width * height
            raw = fh.read(2 * count * 4 + 1)
        if len(raw) != 2 * count * 4:
            raise ValueError(
                f"checkpoint payload has {len(raw)} bytes, expected {2 * count * 4}")
        m = cls(width, height, upsample)
        grids = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        m.occurrence = grids[:count].reshape(height, width).copy()
        m.normalization = grids[count:].reshape(height, width).copy()
        m._dirty = True
        return m
