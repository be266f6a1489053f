"""Event stream container and the two synchronous event representations.

A stream is stored as parallel arrays (t, u, v, p) sorted by time, with
p in {-1, +1}. Text files use `t u v p` per line with p in {0, 1} on disk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Event:
    t: float
    u: int
    v: int
    p: int

    def __post_init__(self):
        if self.p not in (-1, 1):
            raise ValueError(f"polarity must be +1 or -1, got {self.p}")


class EventStream:
    """Time-ordered events on a width x height sensor."""

    def __init__(self, t, u, v, p, width: int, height: int):
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        u = np.asarray(u, dtype=np.int64).reshape(-1)
        v = np.asarray(v, dtype=np.int64).reshape(-1)
        p = np.asarray(p, dtype=np.int8).reshape(-1)
        if not (len(t) == len(u) == len(v) == len(p)):
            raise ValueError("t, u, v, p must have equal length")
        if len(t) > 1 and np.any(np.diff(t) < 0):
            raise ValueError("event timestamps must be non-decreasing")
        if len(u) and (u.min() < 0 or u.max() >= width or v.min() < 0 or v.max() >= height):
            raise ValueError("event coordinates out of sensor bounds")
        if len(p) and not np.all(np.abs(p) == 1):
            raise ValueError("polarities must be +1 or -1")
        self.t = t
        self.u = u
        self.v = v
        self.p = p
        self.width = int(width)
        self.height = int(height)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> Event:
        return Event(float(self.t[i]), int(self.u[i]), int(self.v[i]), int(self.p[i]))

    def slice_time(self, t0: float, t1: float) -> "EventStream":
        """Events with t in [t0, t1] (inclusive both ends)."""
        i0 = int(np.searchsorted(self.t, t0, side="left"))
        i1 = int(np.searchsorted(self.t, t1, side="right"))
        return EventStream(
            self.t[i0:i1], self.u[i0:i1], self.v[i0:i1], self.p[i0:i1],
            self.width, self.height,
        )

    @property
    def t_min(self):
        return float(self.t[0]) if len(self.t) else None

    @property
    def t_max(self):
        return float(self.t[-1]) if len(self.t) else None

    @staticmethod
    def from_records(records, width, height) -> "EventStream":
        if len(records) == 0:
            return EventStream([], [], [], [], width, height)
        arr = np.asarray(records, dtype=float)
        return EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height)


@dataclass(frozen=True)
class TimeSurface:
    """Polarity-signed exponential decay of time since the last event per pixel."""

    values: np.ndarray      # (h, w) signed, in [-1, 1]
    t_ref: float
    eta: float
    t_last: np.ndarray      # (h, w), -inf where the pixel never fired

    @property
    def abs_values(self):
        return np.abs(self.values)


@dataclass(frozen=True)
class EventMat:
    """Binary accumulation frame: 255 where at least one event fell in the window."""

    values: np.ndarray      # (h, w) in {0, 255}, float
    t0: float
    dt: float

    @property
    def active_count(self):
        return int(np.count_nonzero(self.values))


def _last_event_index_per_pixel(stream: EventStream):
    """Index of the chronologically last event at each fired pixel.

    Ties at identical timestamps resolve to the later stream position,
    matching a sequential replay.
    """
    n = len(stream)
    lin = stream.v * stream.width + stream.u
    # first occurrence in the reversed stream == last occurrence forward
    rev = lin[::-1]
    uniq, first_rev = np.unique(rev, return_index=True)
    return uniq, (n - 1) - first_rev


def build_time_surface(stream: EventStream, t_ref: float, eta: float) -> TimeSurface:
    if eta <= 0:
        raise ValueError("decay constant eta must be positive")
    if len(stream) and t_ref < stream.t[0]:
        raise ValueError("t_ref must not precede the first event")
    h, w = stream.height, stream.width
    values = np.zeros((h, w))
    t_last = np.full((h, w), -np.inf)
    if len(stream):
        # only events at or before t_ref define the surface
        n_ok = int(np.searchsorted(stream.t, t_ref, side="right"))
        sub = EventStream(
            stream.t[:n_ok], stream.u[:n_ok], stream.v[:n_ok], stream.p[:n_ok], w, h
        )
        if len(sub):
            lin, idx = _last_event_index_per_pixel(sub)
            tl = sub.t[idx]
            pl = sub.p[idx].astype(float)
            vals = pl * np.exp(-(t_ref - tl) / eta)
            values.flat[lin] = vals
            t_last.flat[lin] = tl
    return TimeSurface(values=values, t_ref=float(t_ref), eta=float(eta), t_last=t_last)


def build_event_mat(stream: EventStream, t0: float, dt: float) -> EventMat:
    if dt <= 0:
        raise ValueError("window length dt must be positive")
    h, w = stream.height, stream.width
    values = np.zeros((h, w))
    sub = stream.slice_time(t0, t0 + dt)
    if len(sub):
        values[sub.v, sub.u] = 255.0
    return EventMat(values=values, t0=float(t0), dt=float(dt))


def load_events_text(path, width: int, height: int) -> EventStream:
    """Read `t u v p` lines; disk polarity {0,1} maps to {-1,+1}."""
    data = np.loadtxt(path, dtype=float, ndmin=2)
    if data.size == 0:
        return EventStream([], [], [], [], width, height)
    if data.shape[1] != 4:
        raise ValueError(f"expected 4 columns `t u v p` in {path}")
    t = data[:, 0]
    if np.any(np.diff(t) < 0):
        bad = int(np.argmax(np.diff(t) < 0)) + 2  # 1-based line of the offender
        raise ValueError(f"non-monotone event timestamp at line {bad} of {path}")
    p = np.where(data[:, 3] > 0.5, 1, -1)
    return EventStream(t, data[:, 1], data[:, 2], p, width, height)


def save_events_text(path, stream: EventStream):
    p_disk = (stream.p > 0).astype(int)
    with open(path, "w") as f:
        for t, u, v, p in zip(stream.t, stream.u, stream.v, p_disk):
            f.write(f"{t:.9f} {u} {v} {p}\n")
