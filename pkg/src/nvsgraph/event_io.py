"""Event data model and the two on-disk stream formats.

CSV layout::

    width,height
    x,y,t,p
    ...

Binary layout (little-endian): a 16-byte header ``b"EVG1"``, u16 width,
u16 height, u64 event count, followed by 16-byte records
``u16 x, u16 y, u64 t, i8 p, 3 pad bytes``.

Timestamps are integer microseconds; polarity is stored as +1/-1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

BIN_MAGIC = b"EVG1"
_HEADER = struct.Struct("<4sHHQ")
RECORD_DTYPE = np.dtype(
    {
        "names": ["x", "y", "t", "p"],
        "formats": ["<u2", "<u2", "<u8", "i1"],
        "offsets": [0, 2, 4, 12],
        "itemsize": 16,
    }
)


class EventFormatError(ValueError):
    """Raised when an event file cannot be parsed or violates stream invariants."""


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """Column-oriented AER stream.

    ``x``/``y`` are 0-based pixel column/row, ``t`` microseconds, ``p`` +1/-1.
    Events are kept sorted by ``t`` (stable for equal timestamps).
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int
    label: int | None = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.int8).reshape(-1)
        n = len(self.x)
        if not (len(self.y) == len(self.t) == len(self.p) == n):
            raise ValueError("event columns have different lengths")

    @classmethod
    def from_events(cls, events, width: int, height: int, label: int | None = None) -> "EventStream":
        rows = [tuple(e) for e in events]
        if rows:
            x, y, t, p = (np.array(c) for c in zip(*rows))
        else:
            x = y = t = p = np.zeros(0, dtype=np.int64)
        return cls(x, y, t, p, width, height, label).sorted()

    @classmethod
    def empty(cls, width: int, height: int, label: int | None = None) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height, label)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    @property
    def events(self) -> list[Event]:
        return list(self)

    @property
    def duration(self) -> int:
        """Span in microseconds from the first to one past the last timestamp."""
        if len(self) == 0:
            return 0
        return int(self.t[-1] - self.t[0]) + 1

    def take(self, index) -> "EventStream":
        index = np.asarray(index)
        return EventStream(self.x[index], self.y[index], self.t[index], self.p[index],
                           self.width, self.height, self.label)

    def sorted(self) -> "EventStream":
        order = np.argsort(self.t, kind="stable")
        return self.take(order)

    def window(self, t_start: int, t_end: int) -> "EventStream":
        """Events with ``t_start <= t < t_end``."""
        lo = np.searchsorted(self.t, t_start, side="left")
        hi = np.searchsorted(self.t, t_end, side="left")
        return self.take(np.arange(lo, hi))

    def validate(self) -> None:
        if len(self) == 0:
            return
        if np.any(np.diff(self.t) < 0):
            raise EventFormatError("events are not sorted by timestamp")
        _check_columns(self.x, self.y, self.t, self.p, self.width, self.height)

    def equals(self, other: "EventStream") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.label == other.label
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )


def _check_columns(x, y, t, p, width, height, where=None) -> None:
    def fail(mask, msg):
        i = int(np.flatnonzero(mask)[0])
        loc = f" ({where(i)})" if where else f" (event {i})"
        raise EventFormatError(msg + loc)

    bad = (x < 0) | (x >= width) | (y < 0) | (y >= height)
    if bad.any():
        fail(bad, f"coordinate outside {width}x{height} geometry")
    bad = (p != 1) & (p != -1)
    if bad.any():
        fail(bad, "polarity must be +1 or -1")
    bad = t < 0
    if bad.any():
        fail(bad, "negative timestamp")


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = "bin" if path.suffix.lower() in (".bin", ".evg") else "csv"
    if fmt not in ("csv", "bin"):
        raise ValueError(f"unknown event format {fmt!r}")
    return fmt


def read_stream(path, fmt: str | None = None, label: int | None = None) -> EventStream:
    """Read an event file; the result is sorted by timestamp."""
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        return _read_csv(path, label)
    return _read_bin(path, label)


def _read_csv(path: Path, label) -> EventStream:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].strip():
        raise EventFormatError(f"{path}: missing 'width,height' header (line 1)")
    try:
        width, height = (int(v) for v in lines[0].split(","))
    except ValueError:
        raise EventFormatError(f"{path}: malformed header on line 1: {lines[0]!r}") from None
    rows = []
    linenos = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventFormatError(f"{path}: malformed record on line {lineno}: {line!r}")
        try:
            rows.append([int(v) for v in parts])
        except ValueError:
            raise EventFormatError(f"{path}: malformed record on line {lineno}: {line!r}") from None
        linenos.append(lineno)
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    x, y, t, p = arr.T
    _check_columns(x, y, t, p, width, height, where=lambda i: f"{path}: line {linenos[i]}")
    return EventStream(x, y, t, p, width, height, label).sorted()


def _read_bin(path: Path, label) -> EventStream:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise EventFormatError(f"{path}: truncated header (byte 0)")
    magic, width, height, count = _HEADER.unpack_from(raw, 0)
    if magic != BIN_MAGIC:
        raise EventFormatError(f"{path}: bad magic {magic!r} at byte 0")
    body = len(raw) - _HEADER.size
    if body != count * RECORD_DTYPE.itemsize:
        raise EventFormatError(
            f"{path}: expected {count} records, body has {body} bytes (byte {_HEADER.size})"
        )
    rec = np.frombuffer(raw, dtype=RECORD_DTYPE, count=count, offset=_HEADER.size)
    x = rec["x"].astype(np.int64)
    y = rec["y"].astype(np.int64)
    t = rec["t"].astype(np.int64)
    p = rec["p"].astype(np.int64)
    _check_columns(x, y, t, p, width, height,
                   where=lambda i: f"{path}: byte {_HEADER.size + i * RECORD_DTYPE.itemsize}")
    return EventStream(x, y, t, p, width, height, label).sorted()


def write_stream(stream: EventStream, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    stream.validate()
    if fmt == "csv":
        cols = np.stack([stream.x, stream.y, stream.t, stream.p.astype(np.int64)], axis=1)
        body = "".join(f"{a},{b},{c},{d}\n" for a, b, c, d in cols.tolist())
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{stream.width},{stream.height}\n")
            fh.write(body)
        return
    rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["t"] = stream.t
    rec["p"] = stream.p
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BIN_MAGIC, stream.width, stream.height, len(stream)))
        fh.write(rec.tobytes())
