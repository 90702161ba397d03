"""Windowing, histogram, normalization, colorization, preprocessing, FRM1."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evrec.events import EventStream, hflip
from evrec.frames import (
    EventWindow,
    WindowingConfig,
    build_histogram,
    colorize,
    convert,
    frame_to_png,
    normalize,
    read_frames,
    resize_center_crop,
    window_bounds,
    window_events,
    write_frames,
)


def counting_oracle(window, width, height):
    """Independent per-event counting loop (the histogram ground truth)."""
    pos = np.zeros((height, width), dtype=np.int64)
    neg = np.zeros((height, width), dtype=np.int64)
    for x, y, p in zip(window.xs.tolist(), window.ys.tolist(), window.ps.tolist()):
        if p > 0:
            pos[y][x] += 1
        else:
            neg[y][x] += 1
    return pos, neg


def random_stream(rng, n, width, height):
    xs = rng.integers(0, width, size=n)
    ys = rng.integers(0, height, size=n)
    ts = np.sort(rng.integers(0, 10**6, size=n))
    ps = rng.choice(np.array([-1, 1], dtype=np.int8), size=n)
    return EventStream(width, height, xs, ys, ts, ps)


class TestWindowing:
    def test_small_remainder_merges(self):
        cfg = WindowingConfig(n=20_000)
        assert window_bounds(25_000, cfg) == [(0, 25_000)]

    def test_large_remainder_owns_final_window(self):
        cfg = WindowingConfig(n=20_000)
        assert window_bounds(35_000, cfg) == [(0, 20_000), (20_000, 35_000)]

    def test_exact_division(self):
        cfg = WindowingConfig(n=20_000)
        assert window_bounds(40_000, cfg) == [(0, 20_000), (20_000, 40_000)]

    def test_fewer_than_n_single_window(self):
        assert window_bounds(7, WindowingConfig(n=100)) == [(0, 7)]

    def test_empty_stream_no_windows(self):
        assert window_bounds(0, WindowingConfig(n=100)) == []

    def test_merge_into_last_policy(self):
        cfg = WindowingConfig(n=20_000, remainder_policy="merge_into_last")
        assert window_bounds(35_000, cfg) == [(0, 35_000)]

    def test_odd_n_half_threshold(self):
        # ceil(5/2) = 3: remainder 3 stands alone, remainder 2 merges.
        cfg = WindowingConfig(n=5)
        assert window_bounds(8, cfg) == [(0, 5), (5, 8)]
        assert window_bounds(7, cfg) == [(0, 7)]

    @given(st.integers(0, 500), st.integers(1, 40))
    @settings(max_examples=100, deadline=None)
    def test_windows_partition_the_stream(self, num, n):
        for policy in ("own_window_if_ge_half", "merge_into_last"):
            bounds = window_bounds(num, WindowingConfig(n=n, remainder_policy=policy))
            flat = [i for a, b in bounds for i in range(a, b)]
            assert flat == list(range(num))

    def test_window_events_preserves_order(self):
        rng = np.random.default_rng(0)
        s = random_stream(rng, 50, 8, 8)
        ws = window_events(s, WindowingConfig(n=20))
        assert [len(w) for w in ws] == [20, 20, 10]
        np.testing.assert_array_equal(np.concatenate([w.ts for w in ws]), s.ts)


class TestHistogram:
    def test_worked_example(self):
        w = EventWindow(np.array([1, 1, 0]), np.array([0, 0, 1]),
                        np.array([1, 2, 3]), np.array([1, 1, -1]))
        h = build_histogram(w, 2, 2)
        assert h.pos[0, 1] == 2 and h.pos.sum() == 2
        assert h.neg[1, 0] == 1 and h.neg.sum() == 1

    def test_empty_window_all_zero(self):
        w = EventWindow(*(np.empty(0, dtype=np.int64) for _ in range(4)))
        h = build_histogram(w, 3, 2)
        assert h.pos.sum() == 0 and h.neg.sum() == 0
        assert h.pos.shape == (2, 3)

    def test_thousand_random_events_match_oracle(self):
        rng = np.random.default_rng(42)
        s = random_stream(rng, 1000, 17, 11)
        w = window_events(s, WindowingConfig(n=2000))[0]
        h = build_histogram(w, 17, 11)
        pos, neg = counting_oracle(w, 17, 11)
        np.testing.assert_array_equal(h.pos, pos)
        np.testing.assert_array_equal(h.neg, neg)

    @given(st.integers(0, 200), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_count_conservation(self, n, seed):
        rng = np.random.default_rng(seed)
        s = random_stream(rng, n, 9, 7) if n else EventStream(
            9, 7, *(np.empty(0, dtype=np.int64) for _ in range(4)))
        for w in window_events(s, WindowingConfig(n=64)):
            h = build_histogram(w, 9, 7)
            assert int(h.pos.sum() + h.neg.sum()) == len(w)

    def test_hflip_commutes_with_column_mirror(self):
        rng = np.random.default_rng(3)
        s = random_stream(rng, 300, 13, 9)
        w = window_events(s, WindowingConfig(n=1000))[0]
        h = build_histogram(w, 13, 9)
        wf = window_events(hflip(s), WindowingConfig(n=1000))[0]
        hf = build_histogram(wf, 13, 9)
        np.testing.assert_array_equal(hf.pos, h.pos[:, ::-1])
        np.testing.assert_array_equal(hf.neg, h.neg[:, ::-1])


class TestNormalize:
    def test_joint_max_rule(self):
        from evrec.frames import Histogram2
        h = Histogram2(np.array([[2, 0]]), np.array([[0, 1]]))
        pn, nn = normalize(h)
        assert pn[0, 0] == 1.0 and nn[0, 1] == 0.5

    def test_all_zero_histogram(self):
        from evrec.frames import Histogram2
        h = Histogram2(np.zeros((2, 2), dtype=np.int64),
                       np.zeros((2, 2), dtype=np.int64))
        pn, nn = normalize(h)
        assert pn.sum() == 0.0 and nn.sum() == 0.0

    def test_range_and_peak(self):
        rng = np.random.default_rng(1)
        s = random_stream(rng, 500, 10, 10)
        w = window_events(s, WindowingConfig(n=1000))[0]
        pn, nn = normalize(build_histogram(w, 10, 10))
        both = np.stack([pn, nn])
        assert both.min() >= 0.0 and both.max() == 1.0


class TestColorize:
    def test_gray_full_positive(self):
        rgb = colorize(np.array([[1.0]]), np.array([[0.0]]), "gray")
        assert tuple(rgb[0, 0]) == (127, 127, 127)

    def test_empty_pixel_white(self):
        rgb = colorize(np.array([[0.0]]), np.array([[0.0]]), "gray")
        assert tuple(rgb[0, 0]) == (255, 255, 255)
        rgb = colorize(np.array([[0.0]]), np.array([[0.0]]), "red_blue")
        assert tuple(rgb[0, 0]) == (255, 255, 255)

    def test_red_blue_half_rounds_up(self):
        rgb = colorize(np.array([[1.0]]), np.array([[0.5]]), "red_blue")
        assert tuple(rgb[0, 0]) == (255, 0, 128)

    def test_gray_cap_at_254(self):
        rgb = colorize(np.array([[1.0]]), np.array([[1.0]]), "gray")
        assert tuple(rgb[0, 0]) == (254, 254, 254)

    def test_unknown_colormap(self):
        with pytest.raises(ValueError, match="colormap"):
            colorize(np.zeros((1, 1)), np.zeros((1, 1)), "viridis")


class TestConvert:
    def test_composition_identity(self):
        rng = np.random.default_rng(5)
        s = random_stream(rng, 700, 12, 8)
        cfg = WindowingConfig(n=256)
        frames = convert(s, cfg, "red_blue")
        manual = []
        for w in window_events(s, cfg):
            h = build_histogram(w, s.width, s.height)
            pn, nn = normalize(h)
            manual.append(colorize(pn, nn, "red_blue"))
        assert len(frames) == len(manual)
        for f, m in zip(frames, manual):
            np.testing.assert_array_equal(f.rgb, m)

    def test_empty_stream_zero_frames(self):
        s = EventStream(4, 4, *(np.empty(0, dtype=np.int64) for _ in range(4)))
        assert convert(s) == []


class TestResizeCenterCrop:
    def test_identity_when_already_square(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, size=(224, 224, 3)).astype(np.uint8)
        out = resize_center_crop(img, 224)
        assert np.max(np.abs(out.astype(int) - img.astype(int))) <= 1

    def test_solid_color_preserved(self):
        img = np.full((448, 448, 3), 37, dtype=np.uint8)
        out = resize_center_crop(img, 224)
        assert out.shape == (224, 224, 3)
        assert np.all(out == 37)

    def test_wide_image_crops_central_columns(self):
        # 448x224: shorter side already equals 224, so no resize happens and
        # the crop must take columns [112, 336).
        img = np.zeros((224, 448, 3), dtype=np.uint8)
        img[:, :, 0] = np.tile(np.arange(448) % 251, (224, 1)).astype(np.uint8)
        out = resize_center_crop(img, 224)
        np.testing.assert_array_equal(out, img[:, 112:336])

    def test_degenerate_input(self):
        with pytest.raises(ValueError, match="degenerate"):
            resize_center_crop(np.zeros((0, 4, 3), dtype=np.uint8), 2)


class TestSerialization:
    def test_frm1_round_trip(self):
        rng = np.random.default_rng(6)
        s = random_stream(rng, 400, 10, 6)
        frames = convert(s, WindowingConfig(n=100), "gray")
        data = write_frames(frames)
        arrays = read_frames(data)
        assert len(arrays) == len(frames)
        for arr, f in zip(arrays, frames):
            np.testing.assert_array_equal(arr, f.rgb)

    def test_frm1_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            read_frames(b"XXXX" + b"\x00" * 6)

    def test_frm1_geometry_mismatch(self):
        from evrec.frames import EventFrame, Histogram2
        z = Histogram2(np.zeros((2, 2), dtype=np.int64),
                       np.zeros((2, 2), dtype=np.int64))
        a = EventFrame(z, np.zeros((2, 2, 3), dtype=np.uint8), "gray")
        b = EventFrame(z, np.zeros((3, 2, 3), dtype=np.uint8), "gray")
        with pytest.raises(ValueError, match="geometry"):
            write_frames([a, b])

    def test_png_bytes_deterministic(self):
        rng = np.random.default_rng(7)
        img = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
        assert frame_to_png(img) == frame_to_png(img)
