"""Event stream I/O, augmentations, and the synthetic oriented-bar generator.

An event is (x, y, t, p): pixel coordinates, a microsecond timestamp, and a
polarity in {-1, +1}. Streams are immutable column arrays sorted by t.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np

EVT1_MAGIC = b"EVT1"
_EVT1_HEADER = struct.Struct("<4sHHQ")
# Packed little-endian record: u64 t, u16 x, u16 y, i8 p. 13 bytes, no padding.
_EVT1_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])

# Half-width of the synthetic bar: generated events lie within this
# perpendicular distance of the class line before rounding to pixels.
BAR_HALF_WIDTH = 1.5


def round_half_up(values):
    """Round with ties going up (0.5 -> 1, 1.5 -> 2), elementwise."""
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5)


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class EventStream:
    """Immutable event recording for a width x height sensor.

    Arrays are one entry per event, sorted non-decreasing in t. Timestamps are
    microseconds, held as int64 (validated non-negative) and serialized as u64.
    Construction validates bounds and repairs ordering with a stable sort.
    """

    width: int
    height: int
    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    ps: np.ndarray
    label: int | None = None
    sample_id: str = ""

    def __post_init__(self):
        if not (0 < self.width <= 0xFFFF and 0 < self.height <= 0xFFFF):
            raise ValueError(f"sensor size {self.width}x{self.height} out of range")
        xs = np.asarray(self.xs, dtype=np.int64)
        ys = np.asarray(self.ys, dtype=np.int64)
        ts = np.asarray(self.ts, dtype=np.int64)
        ps = np.asarray(self.ps, dtype=np.int8)
        n = xs.shape[0]
        if not (xs.ndim == 1 and ys.shape == xs.shape == ts.shape == ps.shape):
            raise ValueError("event columns must be 1-d arrays of equal length")
        if n:
            if xs.min() < 0 or xs.max() >= self.width:
                raise ValueError("event x coordinate out of sensor bounds")
            if ys.min() < 0 or ys.max() >= self.height:
                raise ValueError("event y coordinate out of sensor bounds")
            if ts.min() < 0:
                raise ValueError("negative timestamp")
            if not np.all(np.abs(ps) == 1):
                raise ValueError("polarity must be -1 or +1")
            if np.any(np.diff(ts) < 0):
                order = np.argsort(ts, kind="stable")
                xs, ys, ts, ps = xs[order], ys[order], ts[order], ps[order]
        for arr, name in ((xs, "xs"), (ys, "ys"), (ts, "ts"), (ps, "ps")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.xs.shape[0]

    def events(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.xs, self.ys, self.ts, self.ps):
            yield Event(int(x), int(y), int(t), int(p))


def parse_stream(data: bytes, format: str = "evt1", *, label: int | None = None,
                 sample_id: str = "") -> EventStream:
    """Parse EVT1 binary or CSV bytes into a validated EventStream."""
    fmt = format.lower()
    if fmt == "evt1":
        return _parse_evt1(data, label, sample_id)
    if fmt == "csv":
        return _parse_csv(data, label, sample_id)
    raise ValueError(f"unknown stream format {format!r}")


def _parse_evt1(data: bytes, label, sample_id) -> EventStream:
    if len(data) < _EVT1_HEADER.size:
        raise ValueError("truncated EVT1 header")
    magic, width, height, count = _EVT1_HEADER.unpack_from(data)
    if magic != EVT1_MAGIC:
        raise ValueError("bad EVT1 magic")
    body = data[_EVT1_HEADER.size:]
    expected = count * _EVT1_RECORD.itemsize
    if len(body) < expected:
        raise ValueError(f"truncated EVT1 record data: {len(body)} < {expected} bytes")
    if len(body) > expected:
        raise ValueError("trailing bytes after EVT1 records")
    rec = np.frombuffer(body, dtype=_EVT1_RECORD, count=count)
    return EventStream(width, height, rec["x"], rec["y"], rec["t"], rec["p"],
                       label=label, sample_id=sample_id)


def _parse_csv(data: bytes, label, sample_id) -> EventStream:
    lines = [ln for ln in data.decode("utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty CSV stream")
    try:
        width, height = (int(v) for v in lines[0].split(","))
    except ValueError as exc:
        raise ValueError(f"malformed CSV header {lines[0]!r}") from exc
    xs, ys, ts, ps = [], [], [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 4:
            raise ValueError(f"malformed CSV event row {ln!r}")
        try:
            x, y, t, p = (int(v) for v in parts)
        except ValueError as exc:
            raise ValueError(f"malformed CSV event row {ln!r}") from exc
        if p == 0:
            p = -1
        elif p not in (-1, 1):
            raise ValueError(f"polarity {p} not in {{-1, 0, 1}}")
        xs.append(x); ys.append(y); ts.append(t); ps.append(p)
    return EventStream(width, height, np.array(xs, dtype=np.int64),
                       np.array(ys, dtype=np.int64), np.array(ts, dtype=np.int64),
                       np.array(ps, dtype=np.int8), label=label, sample_id=sample_id)


def write_stream(stream: EventStream, format: str = "evt1") -> bytes:
    """Serialize a stream. EVT1 output round-trips byte-identically."""
    fmt = format.lower()
    if fmt == "evt1":
        rec = np.empty(len(stream), dtype=_EVT1_RECORD)
        rec["t"] = stream.ts.astype(np.uint64)
        rec["x"] = stream.xs
        rec["y"] = stream.ys
        rec["p"] = stream.ps
        header = _EVT1_HEADER.pack(EVT1_MAGIC, stream.width, stream.height, len(stream))
        return header + rec.tobytes()
    if fmt == "csv":
        rows = [f"{stream.width},{stream.height}"]
        rows.extend(f"{x},{y},{t},{p}" for x, y, t, p in stream.events())
        return ("\n".join(rows) + "\n").encode("utf-8")
    raise ValueError(f"unknown stream format {format!r}")


def hflip(stream: EventStream) -> EventStream:
    """Mirror events horizontally: x -> width-1-x. Order preserved."""
    return replace(stream, xs=stream.width - 1 - stream.xs)


def treverse(stream: EventStream) -> EventStream:
    """Reverse time: t -> t_max - t, polarity flipped, re-sorted ascending.

    Reversing time inverts the sign of every brightness change, hence the
    polarity flip. Events are fed back in reversed array order so the stable
    sort in the constructor keeps equal-t groups deterministic.
    """
    if len(stream) == 0:
        return stream
    new_t = int(stream.ts.max()) - stream.ts
    return replace(stream, xs=stream.xs[::-1], ys=stream.ys[::-1],
                   ts=new_t[::-1], ps=-stream.ps[::-1])


def jitter(stream: EventStream, J: int, seed: int) -> EventStream:
    """Translate all events by one (dx, dy) drawn uniformly from [-J, J]^2.

    Events pushed outside the sensor are dropped. J=0 is the identity.
    """
    if J < 0:
        raise ValueError("J must be >= 0")
    rng = np.random.default_rng(seed)
    dx, dy = rng.integers(-J, J + 1, size=2)
    xs = stream.xs + int(dx)
    ys = stream.ys + int(dy)
    keep = (xs >= 0) & (xs < stream.width) & (ys >= 0) & (ys < stream.height)
    return replace(stream, xs=xs[keep], ys=ys[keep], ts=stream.ts[keep],
                   ps=stream.ps[keep])


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Parameters for the oriented-bar synthetic benchmark."""

    num_classes: int
    samples_per_class: int
    width: int = 64
    height: int = 64
    events_per_sample: int = 2000
    noise_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.samples_per_class < 1 or self.events_per_sample < 1:
            raise ValueError("samples_per_class and events_per_sample must be >= 1")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ValueError("noise_fraction must be in [0, 1]")


def bar_direction(class_index: int, num_classes: int) -> tuple[float, float]:
    """Unit direction of class c's bar: angle c*pi/num_classes."""
    theta = class_index * math.pi / num_classes
    return math.cos(theta), math.sin(theta)


def gen_synthetic(spec: SyntheticDatasetSpec) -> list[EventStream]:
    """Generate labeled bar streams, class-major, deterministic given seed.

    Class c's signal events sit within BAR_HALF_WIDTH of the line through the
    sensor center at angle c*pi/num_classes (then rounded to pixels, which can
    add up to half a pixel); the rest are uniform noise. Signal and noise are
    interleaved at random and share one sorted timestamp axis.
    """
    rng = np.random.default_rng(spec.seed)
    cx, cy = spec.width // 2, spec.height // 2
    half_span = 0.5 * math.hypot(spec.width, spec.height)
    streams = []
    for c in range(spec.num_classes):
        dx, dy = bar_direction(c, spec.num_classes)
        for s in range(spec.samples_per_class):
            n_total = spec.events_per_sample
            n_noise = int(round(n_total * spec.noise_fraction))
            n_signal = n_total - n_noise
            xs_parts, ys_parts = [], []
            got = 0
            while got < n_signal:
                want = n_signal - got
                along = rng.uniform(-half_span, half_span, size=2 * want + 8)
                across = rng.uniform(-BAR_HALF_WIDTH, BAR_HALF_WIDTH,
                                     size=along.shape[0])
                px = round_half_up(cx + along * dx - across * dy)
                py = round_half_up(cy + along * dy + across * dx)
                ok = (px >= 0) & (px < spec.width) & (py >= 0) & (py < spec.height)
                px, py = px[ok][:want], py[ok][:want]
                xs_parts.append(px.astype(np.int64))
                ys_parts.append(py.astype(np.int64))
                got += px.shape[0]
            xs = np.concatenate(xs_parts) if xs_parts else np.empty(0, np.int64)
            ys = np.concatenate(ys_parts) if ys_parts else np.empty(0, np.int64)
            if n_noise:
                xs = np.concatenate([xs, rng.integers(0, spec.width, size=n_noise)])
                ys = np.concatenate([ys, rng.integers(0, spec.height, size=n_noise)])
            perm = rng.permutation(n_total)
            ps = rng.choice(np.array([-1, 1], dtype=np.int8), size=n_total)
            ts = np.sort(rng.integers(0, 1_000_000, size=n_total))
            streams.append(EventStream(
                spec.width, spec.height, xs[perm], ys[perm], ts, ps,
                label=c, sample_id=f"{c:03d}_{s:05d}"))
    return streams
