"""Event-to-frame conversion: windowing, 2-channel histograms, colorization.

A stream is chunked into windows of N consecutive events, each window is
counted into positive/negative per-pixel histograms, jointly normalized to
[0,1], and colorized to an 8-bit RGB frame with white marking empty pixels.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .events import EventStream, round_half_up

GRAY = "gray"
RED_BLUE = "red_blue"
COLORMAPS = (GRAY, RED_BLUE)

FRM1_MAGIC = b"FRM1"
_FRM1_HEADER = struct.Struct("<4sHHH")


@dataclass(frozen=True)
class WindowingConfig:
    """N consecutive events per window plus a trailing-remainder policy.

    own_window_if_ge_half: a remainder of at least ceil(N/2) events becomes
    its own final window, anything smaller merges into the last full window.
    merge_into_last: the remainder always merges.
    """

    n: int = 20_000
    remainder_policy: str = "own_window_if_ge_half"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("N must be >= 1")
        if self.remainder_policy not in ("own_window_if_ge_half", "merge_into_last"):
            raise ValueError(f"unknown remainder policy {self.remainder_policy!r}")


@dataclass(frozen=True)
class EventWindow:
    """A contiguous, time-ordered slice of a stream's events."""

    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    ps: np.ndarray

    def __len__(self) -> int:
        return self.xs.shape[0]


@dataclass(frozen=True)
class Histogram2:
    """Per-pixel counts of positive and negative events, shape (height, width)."""

    pos: np.ndarray
    neg: np.ndarray

    @property
    def width(self) -> int:
        return self.pos.shape[1]

    @property
    def height(self) -> int:
        return self.pos.shape[0]


@dataclass(frozen=True)
class EventFrame:
    histogram: Histogram2
    rgb: np.ndarray  # (height, width, 3) uint8
    colormap: str


def window_bounds(num_events: int, cfg: WindowingConfig) -> list[tuple[int, int]]:
    """[start, end) index pairs for each window of a num_events stream."""
    n = cfg.n
    if num_events == 0:
        return []
    if num_events <= n:
        return [(0, num_events)]
    full = num_events // n
    remainder = num_events - full * n
    bounds = [(i * n, (i + 1) * n) for i in range(full)]
    if remainder:
        own = (cfg.remainder_policy == "own_window_if_ge_half"
               and remainder >= (n + 1) // 2)
        if own:
            bounds.append((full * n, num_events))
        else:
            bounds[-1] = (bounds[-1][0], num_events)
    return bounds


def window_events(stream: EventStream, cfg: WindowingConfig) -> list[EventWindow]:
    """Chunk a sorted stream into consecutive windows, preserving order."""
    return [EventWindow(stream.xs[a:b], stream.ys[a:b], stream.ts[a:b],
                        stream.ps[a:b])
            for a, b in window_bounds(len(stream), cfg)]


def build_histogram(window: EventWindow, width: int, height: int) -> Histogram2:
    """Count positive and negative events per pixel."""
    flat = window.ys * width + window.xs
    size = width * height
    pos = np.bincount(flat[window.ps > 0], minlength=size)
    neg = np.bincount(flat[window.ps < 0], minlength=size)
    return Histogram2(pos.reshape(height, width), neg.reshape(height, width))


def normalize(hist: Histogram2) -> tuple[np.ndarray, np.ndarray]:
    """Divide both channels by their joint maximum count; zero stays zero."""
    m = max(int(hist.pos.max()), int(hist.neg.max())) if hist.pos.size else 0
    if m == 0:
        z = np.zeros(hist.pos.shape, dtype=np.float64)
        return z, z.copy()
    return hist.pos / m, hist.neg / m


def colorize(pn: np.ndarray, nn: np.ndarray, colormap: str = GRAY) -> np.ndarray:
    """Map normalized channel pair to 8-bit RGB; empty pixels become white.

    gray: v = min(round(127*pn + 127*nn), 254), RGB (v, v, v). The cap keeps
    occupied pixels from colliding with the 255 background sentinel.
    red_blue: RGB (round(255*pn), 0, round(255*nn)).
    Rounding is half-up for bit-exact results across platforms.
    """
    if colormap == GRAY:
        v = np.minimum(round_half_up(127.0 * pn + 127.0 * nn), 254.0)
        rgb = np.repeat(v[:, :, None], 3, axis=2)
    elif colormap == RED_BLUE:
        rgb = np.zeros(pn.shape + (3,), dtype=np.float64)
        rgb[:, :, 0] = round_half_up(255.0 * pn)
        rgb[:, :, 2] = round_half_up(255.0 * nn)
    else:
        raise ValueError(f"unknown colormap {colormap!r}")
    rgb = rgb.astype(np.uint8)
    rgb[(pn == 0) & (nn == 0)] = 255
    return rgb


def convert(stream: EventStream, cfg: WindowingConfig | None = None,
            colormap: str = GRAY) -> list[EventFrame]:
    """Full event-to-frame pipeline: window, count, normalize, colorize."""
    cfg = cfg or WindowingConfig()
    frames = []
    for w in window_events(stream, cfg):
        hist = build_histogram(w, stream.width, stream.height)
        pn, nn = normalize(hist)
        frames.append(EventFrame(hist, colorize(pn, nn, colormap), colormap))
    return frames


def resize_center_crop(rgb: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize so the shorter side equals `side`, then center crop."""
    if side < 1:
        raise ValueError("side must be >= 1")
    h, w = rgb.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("degenerate image")
    if min(h, w) != side:
        scale = side / min(h, w)
        nw = side if w <= h else max(side, int(round(w * scale)))
        nh = side if h < w else max(side, int(round(h * scale)))
        img = Image.fromarray(rgb).resize((nw, nh), Image.BILINEAR)
        rgb = np.asarray(img)
        h, w = nh, nw
    top = (h - side) // 2
    left = (w - side) // 2
    return rgb[top:top + side, left:left + side]


def frame_to_png(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    return buf.getvalue()


def write_frames(frames: list[EventFrame]) -> bytes:
    """Serialize frames as FRM1: all frames must share one geometry."""
    if not frames:
        raise ValueError("no frames to write")
    h, w = frames[0].rgb.shape[:2]
    for f in frames:
        if f.rgb.shape != (h, w, 3):
            raise ValueError("FRM1 frames must share one geometry")
    header = _FRM1_HEADER.pack(FRM1_MAGIC, len(frames), h, w)
    return header + b"".join(np.ascontiguousarray(f.rgb).tobytes() for f in frames)


def read_frames(data: bytes) -> list[np.ndarray]:
    """Parse FRM1 bytes into a list of (H, W, 3) uint8 arrays."""
    if len(data) < _FRM1_HEADER.size:
        raise ValueError("truncated FRM1 header")
    magic, m, h, w = _FRM1_HEADER.unpack_from(data)
    if magic != FRM1_MAGIC:
        raise ValueError("bad FRM1 magic")
    body = data[_FRM1_HEADER.size:]
    expected = m * h * w * 3
    if len(body) != expected:
        raise ValueError("FRM1 payload size mismatch")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(m, h, w, 3)
    return [arr[i].copy() for i in range(m)]
