"""Event data model, stream containers, and file I/O.

An event is a single (x, y, t, p) brightness-change record. Streams are
stored column-wise (one numpy array per field) so that million-event
files stay cheap to slice and warp. All containers are immutable after
construction and safe to share across threads.

File formats
------------
CSV: optional comment line ``# width=W height=H`` carrying sensor
geometry, then a header line ``t,x,y,p``, then one event per line as
decimal integers with p in {-1, 1}. Missing geometry is inferred as
max coordinate + 1.

Binary: magic bytes ``EVP1``, then u16 width, u16 height
(little-endian), then packed records (u64 t, u16 x, u16 y, i8 p),
little-endian throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataError

BIN_MAGIC = b"EVP1"

# Packed little-endian record layout of the binary format.
BIN_RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


class Event(NamedTuple):
    """A single brightness-change event."""

    x: int
    y: int
    t: int  # microseconds
    p: int  # polarity, exactly -1 or +1


@dataclass(frozen=True)
class SensorGeometry:
    """Pixel dimensions of the emitting sensor."""

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"sensor geometry must be positive, got {self.width}x{self.height}")


class Events:
    """Immutable, time-ordered event stream backed by column arrays.

    Behaves as an ordered sequence of :class:`Event`. Unsorted input is
    tolerated and stably sorted by timestamp on construction, so all
    downstream code may assume nondecreasing ``t``.
    """

    __slots__ = ("t", "x", "y", "p")

    def __init__(
        self,
        t: np.ndarray,
        x: np.ndarray,
        y: np.ndarray,
        p: np.ndarray,
        *,
        copy: bool = True,
        validate: bool = True,
    ) -> None:
        t = np.asarray(t, dtype=np.uint64)
        x = np.asarray(x, dtype=np.uint16)
        y = np.asarray(y, dtype=np.uint16)
        p = np.asarray(p, dtype=np.int8)
        if not (t.shape == x.shape == y.shape == p.shape) or t.ndim != 1:
            raise DataError("event columns must be 1-D arrays of equal length")
        if validate and p.size and not np.all(np.abs(p) == 1):
            bad = int(np.flatnonzero(np.abs(p) != 1)[0])
            raise DataError(f"polarity must be -1 or +1, got {int(p[bad])} at index {bad}")
        if t.size and np.any(t[1:] < t[:-1]):
            order = np.argsort(t, kind="stable")
            t, x, y, p = t[order], x[order], y[order], p[order]
        elif copy:
            t, x, y, p = t.copy(), x.copy(), y.copy(), p.copy()
        for arr in (t, x, y, p):
            arr.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "p", p)

    def __setattr__(self, name: str, value) -> None:
        raise AttributeError("Events is immutable")

    @classmethod
    def empty(cls) -> "Events":
        return cls(np.empty(0, np.uint64), np.empty(0, np.uint16), np.empty(0, np.uint16), np.empty(0, np.int8))

    @classmethod
    def from_events(cls, records: Iterable[Event | tuple]) -> "Events":
        recs = list(records)
        if not recs:
            return cls.empty()
        x, y, t, p = zip(*recs)
        return cls(np.array(t), np.array(x), np.array(y), np.array(p))

    def __len__(self) -> int:
        return self.t.size

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Event(int(self.x[idx]), int(self.y[idx]), int(self.t[idx]), int(self.p[idx]))
        return Events(self.t[idx], self.x[idx], self.y[idx], self.p[idx], validate=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Events):
            return NotImplemented
        return (
            len(self) == len(other)
            and bool(np.array_equal(self.t, other.t))
            and bool(np.array_equal(self.x, other.x))
            and bool(np.array_equal(self.y, other.y))
            and bool(np.array_equal(self.p, other.p))
        )

    def __repr__(self) -> str:
        if len(self) == 0:
            return "Events(0 events)"
        return f"Events({len(self)} events, t=[{int(self.t[0])}..{int(self.t[-1])}] us)"

    def select(self, mask_or_index: np.ndarray) -> "Events":
        """Subset by boolean mask or index array, preserving order."""
        return self[mask_or_index]

    def time_slice(self, t_lo: int, t_hi: int) -> "Events":
        """Events with t_lo <= t <= t_hi (inclusive both ends)."""
        lo = int(np.searchsorted(self.t, np.uint64(t_lo), side="left"))
        hi = int(np.searchsorted(self.t, np.uint64(t_hi), side="right"))
        return self[lo:hi]

    def infer_geometry(self) -> SensorGeometry:
        if len(self) == 0:
            return SensorGeometry(1, 1)
        return SensorGeometry(int(self.x.max()) + 1, int(self.y.max()) + 1)


def concat_events(parts: Sequence[Events]) -> Events:
    """Concatenate already-ordered streams (re-sorted if needed)."""
    parts = [p for p in parts if len(p)]
    if not parts:
        return Events.empty()
    return Events(
        np.concatenate([p.t for p in parts]),
        np.concatenate([p.x for p in parts]),
        np.concatenate([p.y for p in parts]),
        np.concatenate([p.p for p in parts]),
        validate=False,
    )


@dataclass(frozen=True)
class EventBundle:
    """A fixed-interval slice of a stream: events with t_start <= t <= t_end."""

    events: Events
    t_start: int
    t_end: int

    def __post_init__(self) -> None:
        if self.t_end < self.t_start:
            raise DataError("bundle interval is inverted")
        if len(self.events):
            t = self.events.t
            if int(t[0]) < self.t_start or int(t[-1]) > self.t_end:
                raise DataError("bundle contains events outside its interval")

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class EventBatch:
    """Time-contiguous concatenation of bundles grown by the batching policy."""

    bundles: tuple[EventBundle, ...]

    def __post_init__(self) -> None:
        for prev, cur in zip(self.bundles, self.bundles[1:]):
            if cur.t_start != prev.t_end:
                raise DataError("batch bundles are not time-contiguous")

    @property
    def n_events(self) -> int:
        return sum(len(b) for b in self.bundles)

    @property
    def t_start(self) -> int:
        return self.bundles[0].t_start

    @property
    def t_end(self) -> int:
        return self.bundles[-1].t_end

    def events(self) -> Events:
        return concat_events([b.events for b in self.bundles])


def slice_bundles(events: Events, dt_us: int) -> list[EventBundle]:
    """Partition a stream into contiguous bundles of constant interval dt_us.

    Bundle m covers [t0 + m*dt, t0 + (m+1)*dt] where t0 is the first event
    timestamp. An event exactly on a bundle edge belongs to the earlier
    bundle. Intervals with no events yield empty bundles so the partition
    stays contiguous. Empty input yields an empty list.
    """
    if dt_us <= 0:
        raise ConfigError(f"bundle interval must be positive, got {dt_us}")
    if len(events) == 0:
        return []
    t0 = int(events.t[0])
    d = (events.t - np.uint64(t0)).astype(np.int64)
    dt = np.int64(dt_us)
    idx = np.maximum((d + dt - 1) // dt - 1, 0)
    n_bundles = int(idx[-1]) + 1
    # Sorted t implies sorted idx; bundle boundaries via searchsorted.
    edges = np.searchsorted(idx, np.arange(n_bundles + 1))
    out = []
    for m in range(n_bundles):
        lo, hi = int(edges[m]), int(edges[m + 1])
        out.append(
            EventBundle(
                events=events[lo:hi],
                t_start=t0 + m * dt_us,
                t_end=t0 + (m + 1) * dt_us,
            )
        )
    return out


# --- CSV ---


def _write_csv(events: Events, geometry: SensorGeometry, path: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# width={geometry.width} height={geometry.height}\n")
        fh.write("t,x,y,p\n")
        for i in range(len(events)):
            fh.write(f"{int(events.t[i])},{int(events.x[i])},{int(events.y[i])},{int(events.p[i])}\n")


def _read_csv(path: str) -> tuple[Events, SensorGeometry]:
    geometry = None
    rows_t, rows_x, rows_y, rows_p = [], [], [], []
    with open(path, "r") as fh:
        header_seen = False
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                fields = dict(
                    part.split("=", 1) for part in line[1:].split() if "=" in part
                )
                if "width" in fields and "height" in fields:
                    try:
                        geometry = SensorGeometry(int(fields["width"]), int(fields["height"]))
                    except ValueError as exc:
                        raise DataError(f"{path}:{lineno}: bad geometry comment: {line}") from exc
                continue
            if not header_seen:
                if line != "t,x,y,p":
                    raise DataError(f"{path}:{lineno}: expected header 't,x,y,p', got {line!r}")
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                t, x, y, p = (int(v) for v in parts)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer field in {line!r}") from exc
            if p not in (-1, 1):
                raise DataError(f"{path}:{lineno}: polarity must be -1 or 1, got {p}")
            if t < 0 or x < 0 or y < 0:
                raise DataError(f"{path}:{lineno}: negative field in {line!r}")
            if x >= 2**16 or y >= 2**16 or t >= 2**64:
                raise DataError(f"{path}:{lineno}: field out of range in {line!r}")
            rows_t.append(t)
            rows_x.append(x)
            rows_y.append(y)
            rows_p.append(p)
        if not header_seen:
            raise DataError(f"{path}: missing 't,x,y,p' header")
    events = Events(
        np.array(rows_t, dtype=np.uint64),
        np.array(rows_x, dtype=np.uint16),
        np.array(rows_y, dtype=np.uint16),
        np.array(rows_p, dtype=np.int8),
        validate=False,
    )
    if geometry is None:
        geometry = events.infer_geometry()
    return events, geometry


# --- Binary ---


def _write_bin(events: Events, geometry: SensorGeometry, path: str) -> None:
    records = np.empty(len(events), dtype=BIN_RECORD_DTYPE)
    records["t"] = events.t
    records["x"] = events.x
    records["y"] = events.y
    records["p"] = events.p
    header = np.array([(geometry.width, geometry.height)], dtype=np.dtype([("w", "<u2"), ("h", "<u2")]))
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC)
        fh.write(header.tobytes())
        fh.write(records.tobytes())


def _read_bin(path: str) -> tuple[Events, SensorGeometry]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != BIN_MAGIC:
        raise DataError(f"{path}: offset 0: bad magic {blob[:4]!r}, expected {BIN_MAGIC!r}")
    if len(blob) < 8:
        raise DataError(f"{path}: offset 4: truncated header")
    header = np.frombuffer(blob[4:8], dtype=np.dtype([("w", "<u2"), ("h", "<u2")]))[0]
    body = blob[8:]
    if len(body) % BIN_RECORD_DTYPE.itemsize:
        raise DataError(
            f"{path}: offset {8 + len(body) - len(body) % BIN_RECORD_DTYPE.itemsize}: truncated record"
        )
    records = np.frombuffer(body, dtype=BIN_RECORD_DTYPE)
    p = records["p"]
    if p.size and not np.all(np.abs(p) == 1):
        bad = int(np.flatnonzero(np.abs(p) != 1)[0])
        raise DataError(
            f"{path}: offset {8 + bad * BIN_RECORD_DTYPE.itemsize}: polarity must be -1 or 1, got {int(p[bad])}"
        )
    events = Events(records["t"], records["x"], records["y"], p, validate=False)
    return events, SensorGeometry(int(header["w"]), int(header["h"]))


def read_events(path: str, format: str = "csv") -> tuple[Events, SensorGeometry]:
    """Read an event file. Events come back sorted by timestamp."""
    if format == "csv":
        return _read_csv(path)
    if format == "bin":
        return _read_bin(path)
    raise ConfigError(f"unknown event file format {format!r} (expected 'csv' or 'bin')")


def write_events(events: Events, geometry: SensorGeometry, path: str, format: str = "csv") -> None:
    """Write an event file; read_events(write_events(E)) == E bit-exactly."""
    if len(events) and np.any(events.t[1:] < events.t[:-1]):
        raise DataError("events must be sorted by timestamp before writing")
    if len(events) and (int(events.x.max()) >= geometry.width or int(events.y.max()) >= geometry.height):
        raise DataError("event coordinates exceed sensor geometry")
    if format == "csv":
        _write_csv(events, geometry, path)
    elif format == "bin":
        _write_bin(events, geometry, path)
    else:
        raise ConfigError(f"unknown event file format {format!r} (expected 'csv' or 'bin')")
