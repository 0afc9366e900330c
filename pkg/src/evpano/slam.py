"""Simultaneous tracking and mapping over an event stream.

The pipeline folds packets through a track-then-map loop:

  bootstrap   first ``bootstrap_packets`` packets are mapped at the fixed
              pose (0,0,0) — no tracking — with the normalization seeded to
              1 on touched pixels so the ratio is immediately well-defined;
  track       each later packet is aligned to the map from the previous
              packet's pose;
  gate        if the packet's mean squared residual exceeds
              ``residual_gate`` the packet is rejected: the map is left
              untouched and the pose holds at the last accepted estimate
              (a burst of unmodeled events must corrupt neither);
  map         otherwise every event is deposited into O at the new pose,
              followed by one normalization sweep N for the pose step.

Everything is deterministic: identical stream and configuration reproduce
the trajectory and both map grids bit-for-bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .events import EventArray, EventPacket, PacketPolicy, iter_packets
from .geometry import CameraIntrinsics, pixels_to_rays, project_rays, rotation_from_axis_angle
from .mapping import PanoramicMap
from .tracker import TrackerConfig, residuals, track_packet
from .trajectories import PoseTrajectory


@dataclass(frozen=True)
class PipelineConfig:
    packet_policy: PacketPolicy = PacketPolicy.by_count(1500)
    tracker: TrackerConfig = TrackerConfig()
    bootstrap_packets: int = 10
    residual_gate: float = 0.85

    def __post_init__(self):
        if self.bootstrap_packets < 1:
            raise ValueError("bootstrap_packets must be >= 1")
        if not (0.0 < self.residual_gate <= 1.0):
            raise ValueError("residual_gate must be in (0, 1]")


@dataclass(frozen=True, eq=False)
class TrajectorySample:
    t: float
    pose: np.ndarray
    mean_residual: float
    valid_fraction: float
    gated: bool
    map_updated: bool
    low_confidence: bool


@dataclass
class RunStats:
    n_packets: int = 0
    n_bootstrap: int = 0
    n_gated: int = 0
    n_low_confidence: int = 0
    n_map_updates: int = 0
    n_iterations: int = 0
    events_total: int = 0
    events_dropped: int = 0
    track_seconds: float = 0.0
    map_seconds: float = 0.0
    total_seconds: float = 0.0

    @property
    def updates_per_second(self) -> float:
        return self.n_packets / self.total_seconds if self.total_seconds > 0 else 0.0

    @property
    def events_per_second(self) -> float:
        return self.events_total / self.total_seconds if self.total_seconds > 0 else 0.0

    @property
    def track_ms_per_packet(self) -> float:
        tracked = self.n_packets - self.n_bootstrap
        return 1e3 * self.track_seconds / tracked if tracked > 0 else 0.0

    @property
    def track_ms_per_iteration(self) -> float:
        return 1e3 * self.track_seconds / self.n_iterations if self.n_iterations else 0.0

    @property
    def map_ms_per_packet(self) -> float:
        return 1e3 * self.map_seconds / self.n_map_updates if self.n_map_updates else 0.0

    def summary_line(self) -> str:
        return (f"packets={self.n_packets} gated={self.n_gated} "
                f"low_confidence={self.n_low_confidence} "
                f"events={self.events_total} "
                f"updates_per_s={self.updates_per_second:.1f} "
                f"events_per_s={self.events_per_second:.0f}")

    def report(self) -> str:
        lines = [
            "component timings",
            f"  tracking: {self.track_ms_per_packet:.3f} ms/packet "
            f"({self.track_ms_per_iteration:.3f} ms/iteration)",
            f"  mapping:  {self.map_ms_per_packet:.3f} ms/packet",
            f"  total:    {self.total_seconds:.3f} s "
            f"({self.updates_per_second:.1f} pose updates/s, "
            f"{self.events_per_second:.0f} events/s)",
            "counters",
            f"  packets:        {self.n_packets}",
            f"  bootstrap:      {self.n_bootstrap}",
            f"  gated:          {self.n_gated}",
            f"  low confidence: {self.n_low_confidence}",
            f"  map updates:    {self.n_map_updates}",
            f"  events:         {self.events_total} "
            f"({self.events_dropped} deposits off-map)",
        ]
        return "\n".join(lines)


def _unpack(packet, fallback_t: float):
    if isinstance(packet, EventPacket):
        return packet.events, packet.t_end
    events = packet
    t_end = float(events.t[-1]) if len(events) else fallback_t
    return events, t_end


class Pipeline:
    """Stateful track-then-map loop over one event stream."""

    def __init__(self, intr: CameraIntrinsics, cfg: PipelineConfig = PipelineConfig(),
                 upsample: float = 1.0, pmap: PanoramicMap | None = None):
        self.intr = intr
        self.cfg = cfg
        self.pmap = pmap if pmap is not None else PanoramicMap.for_camera(intr, upsample)
        self.theta = np.zeros(3)
        self.packet_count = 0
        self.stats = RunStats()
        self._last_t = 0.0

    def _event_positions(self, events: EventArray, theta: np.ndarray):
        rays = pixels_to_rays(events.x, events.y, self.intr)
        R = rotation_from_axis_angle(theta)
        u, v, ok = project_rays(rays @ R.T, self.pmap.geom)
        return u[ok], v[ok]

    def _residual_stats(self, events: EventArray, theta: np.ndarray):
        if len(events) == 0:
            return 1.0, 0.0
        r, valid = residuals(events, theta, self.pmap, self.intr)
        return float(np.mean(r ** 2)), float(np.count_nonzero(valid) / len(events))

    def process_packet(self, packet) -> TrajectorySample:
        events, t_end = _unpack(packet, self._last_t)
        self._last_t = t_end
        self.stats.n_packets += 1
        self.stats.events_total += len(events)

        if self.packet_count < self.cfg.bootstrap_packets:
            self.packet_count += 1
            self.stats.n_bootstrap += 1
            pose = np.zeros(3)
            t0 = time.perf_counter()
            if len(events):
                u, v = self._event_positions(events, pose)
                self.pmap.add_occurrences(u, v)
                self.pmap.seed_normalization(u, v)
                self.stats.n_map_updates += 1
            self.stats.map_seconds += time.perf_counter() - t0
            mr, vf = self._residual_stats(events, pose)
            self.stats.events_dropped = self.pmap.dropped_events
            return TrajectorySample(t_end, pose, mr, vf,
                                    gated=False, map_updated=bool(len(events)),
                                    low_confidence=False)

        self.packet_count += 1
        t0 = time.perf_counter()
        result = track_packet(events, self.theta, self.pmap, self.intr, self.cfg.tracker)
        self.stats.track_seconds += time.perf_counter() - t0
        self.stats.n_iterations += result.iterations_used

        pose = np.asarray(result.pose, dtype=np.float64).copy()
        norm = np.linalg.norm(pose)
        if norm > np.pi:
            # Rewrap to the canonical axis-angle ball so later packets keep
            # linearizing near the origin of the chart.
            pose *= 1.0 - 2.0 * np.pi / norm

        gated = result.mean_residual > self.cfg.residual_gate
        if result.low_confidence:
            self.stats.n_low_confidence += 1
        if gated:
            # Rejected packet: hold the last accepted pose so a burst of
            # unmodeled events cannot walk the tracker off its own map.
            self.stats.n_gated += 1
            pose = self.theta.copy()
        else:
            t0 = time.perf_counter()
            if len(events):
                u, v = self._event_positions(events, pose)
                self.pmap.add_occurrences(u, v)
                self.pmap.update_normalization(pose, self.theta, self.intr)
                self.stats.n_map_updates += 1
            self.stats.map_seconds += time.perf_counter() - t0

        self.theta = pose
        self.stats.events_dropped = self.pmap.dropped_events
        return TrajectorySample(t_end, pose.copy(), result.mean_residual,
                                result.valid_fraction, gated=gated,
                                map_updated=not gated and bool(len(events)),
                                low_confidence=result.low_confidence)

    def run(self, stream: EventArray) -> list[TrajectorySample]:
        samples = []
        t0 = time.perf_counter()
        for packet in iter_packets(stream, self.cfg.packet_policy):
            samples.append(self.process_packet(packet))
        self.stats.total_seconds += time.perf_counter() - t0
        return samples


def run(stream: EventArray, intr: CameraIntrinsics,
        cfg: PipelineConfig = PipelineConfig(), upsample: float = 1.0):
    """Run the full pipeline over a stream.

    Returns (samples, map, stats) where samples is a list of
    TrajectorySample in stream order.
    """
    pipe = Pipeline(intr, cfg, upsample)
    samples = pipe.run(stream)
    return samples, pipe.pmap, pipe.stats


def samples_to_trajectory(samples) -> PoseTrajectory:
    if not samples:
        return PoseTrajectory.empty()
    t = np.array([s.t for s in samples])
    poses = np.array([s.pose for s in samples])
    return PoseTrajectory(t, poses)
