"""Event records, stream parsing, and packetization.

An event stream is kept as a struct-of-arrays (`EventArray`) so that packet
slicing and projection stay vectorized.  Text streams follow the common
``t x y p`` format: seconds, integer pixel coordinates, polarity in {0, 1}
or {-1, 1} (0 is read as -1).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class MalformedLine(ValueError):
    """A stream line that cannot be parsed; carries the 1-based line number."""

    def __init__(self, line_no: int, line: str, reason: str):
        super().__init__(f"line {line_no}: {reason}: {line!r}")
        self.line_no = line_no
        self.line = line
        self.reason = reason


class NonMonotoneTimestampWarning(UserWarning):
    """Timestamps decreased somewhere in the stream; it is accepted as-is."""


@dataclass(frozen=True)
class Event:
    t: float
    x: int
    y: int
    p: int


class EventArray:
    """Column store for events: t float64, x/y int32, p int8 in {-1, +1}."""

    __slots__ = ("t", "x", "y", "p")

    def __init__(self, t, x, y, p):
        self.t = np.ascontiguousarray(t, dtype=np.float64)
        self.x = np.ascontiguousarray(x, dtype=np.int32)
        self.y = np.ascontiguousarray(y, dtype=np.int32)
        self.p = np.ascontiguousarray(p, dtype=np.int8)
        n = self.t.shape[0]
        if not (self.x.shape[0] == self.y.shape[0] == self.p.shape[0] == n):
            raise ValueError("event columns must have equal length")
        if n and not np.isin(self.p, (-1, 1)).all():
            raise ValueError("polarity must be -1 or +1")

    @classmethod
    def empty(cls) -> "EventArray":
        return cls(np.empty(0), np.empty(0, np.int32), np.empty(0, np.int32), np.empty(0, np.int8))

    def __len__(self) -> int:
        return self.t.shape[0]

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            return Event(float(self.t[key]), int(self.x[key]), int(self.y[key]), int(self.p[key]))
        return EventArray(self.t[key], self.x[key], self.y[key], self.p[key])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def time_span(self):
        """(first, last) timestamp, or None for an empty stream."""
        if len(self) == 0:
            return None
        return float(self.t[0]), float(self.t[-1])

    def sorted_by_time(self) -> "EventArray":
        order = np.argsort(self.t, kind="stable")
        return self[order]

    @staticmethod
    def concatenate(parts) -> "EventArray":
        parts = list(parts)
        if not parts:
            return EventArray.empty()
        return EventArray(
            np.concatenate([p.t for p in parts]),
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.p for p in parts]),
        )


def _normalize_polarity(p: np.ndarray) -> np.ndarray:
    out = np.where(p == 0, -1, p)
    bad = ~np.isin(out, (-1, 1))
    if bad.any():
        raise ValueError(f"polarity must be in {{-1, 0, 1}}, got {out[bad][0]}")
    return out.astype(np.int8)


def parse_event_stream(lines) -> EventArray:
    """Parse ``t x y p`` lines (an iterable of strings) into an EventArray.

    Blank lines and ``#`` comments are skipped.  Raises MalformedLine on the
    first bad line; decreasing timestamps only produce a
    NonMonotoneTimestampWarning.
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    ts, xs, ys, ps = [], [], [], []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 4:
            raise MalformedLine(line_no, line, f"expected 4 fields, got {len(tokens)}")
        try:
            t = float(tokens[0])
            x = float(tokens[1])
            y = float(tokens[2])
            p = float(tokens[3])
        except ValueError:
            raise MalformedLine(line_no, line, "non-numeric field") from None
        if not (x.is_integer() and y.is_integer() and p.is_integer()):
            raise MalformedLine(line_no, line, "x, y, p must be integers")
        if x < 0 or y < 0:
            raise MalformedLine(line_no, line, "negative pixel coordinate")
        if int(p) not in (-1, 0, 1):
            raise MalformedLine(line_no, line, f"polarity {int(p)} not in {{-1, 0, 1}}")
        ts.append(t)
        xs.append(int(x))
        ys.append(int(y))
        ps.append(int(p))
    t_arr = np.asarray(ts, dtype=np.float64)
    _warn_if_non_monotone(t_arr)
    if not ts:
        return EventArray.empty()
    return EventArray(t_arr, xs, ys, _normalize_polarity(np.asarray(ps)))


def _warn_if_non_monotone(t: np.ndarray) -> None:
    if t.shape[0] > 1:
        drops = int(np.count_nonzero(np.diff(t) < 0.0))
        if drops:
            warnings.warn(
                f"timestamps decrease at {drops} position(s); stream kept as-is",
                NonMonotoneTimestampWarning,
                stacklevel=3,
            )


def load_events(path) -> EventArray:
    """Load an event file. Fast bulk path, with line-level diagnosis on error."""
    try:
        with warnings.catch_warnings():
            # An empty stream is legitimate (e.g. a featureless scene).
            warnings.filterwarnings("ignore", message=".*input contained no data.*")
            data = np.loadtxt(path, dtype=np.float64, comments="#", ndmin=2)
    except ValueError:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_event_stream(fh)
    if data.size == 0:
        return EventArray.empty()
    ok = (
        data.shape[1] == 4
        and np.isin(data[:, 3], (-1.0, 0.0, 1.0)).all()
        and (data[:, 1:3] >= 0).all()
        and (data[:, 1:3] == np.floor(data[:, 1:3])).all()
    )
    if not ok:
        # Reparse line by line to point at the offending line.
        with open(path, "r", encoding="utf-8") as fh:
            return parse_event_stream(fh)
    _warn_if_non_monotone(data[:, 0])
    return EventArray(data[:, 0], data[:, 1], data[:, 2], _normalize_polarity(data[:, 3]))


def save_events(path, events: EventArray) -> None:
    """Write ``t x y p`` with polarity encoded as {0, 1}."""
    p01 = (events.p > 0).astype(np.int64)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(events)):
            fh.write(f"{events.t[i]:.9f} {events.x[i]} {events.y[i]} {p01[i]}\n")


# ---------------------------------------------------------------------------
# Packetization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PacketPolicy:
    """How a stream is cut into packets: fixed count or fixed time window."""

    mode: str = "count"
    count: int = 1500
    dt: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("count", "time"):
            raise ValueError(f"mode must be 'count' or 'time', got {self.mode!r}")
        if self.mode == "count" and self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.mode == "time" and (self.dt is None or self.dt <= 0.0):
            raise ValueError(f"time mode needs dt > 0, got {self.dt}")

    @classmethod
    def by_count(cls, count: int) -> "PacketPolicy":
        return cls(mode="count", count=count)

    @classmethod
    def by_time(cls, dt: float) -> "PacketPolicy":
        return cls(mode="time", dt=dt)


@dataclass
class EventPacket:
    events: EventArray
    t_start: float
    t_end: float
    partial: bool = field(default=False)

    def __len__(self) -> int:
        return len(self.events)


def iter_packets(events: EventArray, policy: PacketPolicy):
    """Yield EventPackets in stream order.

    Count mode cuts every ``count`` events; a shorter trailing packet is
    emitted with ``partial=True``.  Time mode uses windows of ``dt`` seconds
    anchored at the first timestamp; empty windows yield nothing and the
    final window is flagged partial since the stream ends inside it.
    """
    n = len(events)
    if n == 0:
        return
    if policy.mode == "count":
        for start in range(0, n, policy.count):
            chunk = events[start:start + policy.count]
            yield EventPacket(
                events=chunk,
                t_start=float(chunk.t[0]),
                t_end=float(chunk.t[-1]),
                partial=len(chunk) < policy.count,
            )
    else:
        t0 = float(events.t[0])
        bins = np.floor((events.t - t0) / policy.dt).astype(np.int64)
        # Guard the last event landing exactly on a bin edge.
        bins = np.maximum(bins, 0)
        boundaries = np.flatnonzero(np.diff(bins)) + 1
        starts = np.concatenate(([0], boundaries))
        ends = np.concatenate((boundaries, [n]))
        for k, (s, e) in enumerate(zip(starts, ends)):
            b = int(bins[s])
            yield EventPacket(
                events=events[s:e],
                t_start=t0 + b * policy.dt,
                t_end=t0 + (b + 1) * policy.dt,
                partial=(k == len(starts) - 1),
            )


def packetize(events: EventArray, policy: PacketPolicy) -> list:
    return list(iter_packets(events, policy))
