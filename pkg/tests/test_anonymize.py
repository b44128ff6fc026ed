"""Feature extraction: closed-form checks, non-invertibility, pause stats."""

import json
import math
import random

import numpy as np
import pytest

from cusco.anonymize import (
    LiveAudioFeatureTap,
    extract_audio_features,
    extract_motion_features,
    mono_mixdown,
    pause_statistics,
    to_ndjson,
)
from cusco.errors import ConfigError
from cusco.streams import VadSegment


def sine(rate, dur_s, freq=440.0, amp=1.0, phase=0.0):
    t = np.arange(int(rate * dur_s)) / rate
    return amp * np.sin(2 * math.pi * freq * t + phase)


# --- audio features -------------------------------------------------------------

def test_silence_features():
    frames = extract_audio_features(np.zeros(16000), 16000, window_ms=500)
    assert len(frames) == 2
    for f in frames:
        assert f.rms_db == -96.0
        assert f.zero_crossing_rate == 0.0
        assert not f.voiced


def test_full_scale_sine_rms_closed_form():
    # RMS of a full-scale sine is 1/sqrt(2) -> 20*log10 = -3.0103 dBFS
    frames = extract_audio_features(sine(16000, 1.0), 16000, window_ms=500)
    for f in frames:
        assert f.rms_db == pytest.approx(-3.01, abs=0.05)
        assert f.voiced


def test_sine_zero_crossing_rate_closed_form():
    # Two crossings per cycle: 440 Hz -> 880 crossings/s
    frames = extract_audio_features(sine(16000, 2.0, freq=440), 16000, window_ms=500)
    for f in frames:
        assert f.zero_crossing_rate == pytest.approx(880, abs=2)


def test_window_floor_enforced():
    with pytest.raises(ConfigError):
        extract_audio_features(np.zeros(16000), 16000, window_ms=50)


def test_windows_tile_without_overlap():
    frames = extract_audio_features(np.zeros(48000), 16000, window_ms=250)
    for a, b in zip(frames, frames[1:]):
        assert b.t_start_s == a.t_end_s


def test_phase_shift_many_to_one():
    """A sine and its phase-shifted copy must be indistinguishable in
    feature space: the map is many-to-one, so no inversion exists."""
    rate = 16000
    for phase in (1.2, 2.8, 4.4):
        a = extract_audio_features(sine(rate, 3.0, phase=0.37), rate, window_ms=500)
        b = extract_audio_features(sine(rate, 3.0, phase=0.37 + phase), rate, window_ms=500)
        assert a == b


def test_feature_bytes_below_one_percent_of_media():
    rate = 16000
    x = sine(rate, 10.0)
    media_bytes = x.size * 2  # s16le on disk
    frames = extract_audio_features(x, rate, window_ms=500)
    assert len(to_ndjson(frames).encode()) <= media_bytes * 0.01


def test_live_tap_equals_offline(tmp_path):
    rate = 16000
    x = sine(rate, 3.0, freq=317, amp=0.6) + 0.05 * sine(rate, 3.0, freq=1290)
    offline = extract_audio_features(x, rate, window_ms=500)
    tap = LiveAudioFeatureTap(rate, window_ms=500)
    live = []
    rng = random.Random(5)
    pos = 0
    while pos < x.size:
        step = rng.randint(100, 2600)
        live.extend(tap.feed(x[pos:pos + step]))
        pos += step
    live.extend(tap.flush())
    assert live == offline


def test_mono_mixdown_s16le_stereo():
    left = (np.ones(100) * 16384).astype("<i2")
    right = np.zeros(100, dtype="<i2")
    inter = np.empty(200, dtype="<i2")
    inter[0::2] = left
    inter[1::2] = right
    mono = mono_mixdown(inter.tobytes(), "s16le", 2)
    assert mono == pytest.approx(np.full(100, 0.25))


# --- motion features --------------------------------------------------------------

def test_motion_identical_frames_zero():
    f = np.random.default_rng(0).integers(0, 255, (64, 64), dtype=np.uint8)
    out = extract_motion_features([f, f.copy()], grid=4)
    assert len(out) == 1
    assert all(v == 0.0 for row in out[0].grid for v in row)


def test_motion_inverted_frame_uniform_maximal():
    # checkerboard vs its inverse: every pixel differs by 255
    base = np.indices((32, 32)).sum(axis=0) % 2 * 255
    a = base.astype(np.uint8)
    b = (255 - base).astype(np.uint8)
    out = extract_motion_features([a, b], grid=4)
    values = {v for row in out[0].grid for v in row}
    assert values == {1.0}


def test_motion_confined_to_quadrant():
    a = np.zeros((40, 40), dtype=np.uint8)
    b = a.copy()
    b[:20, :20] = 200  # motion only in the top-left quadrant
    out = extract_motion_features([a, b], grid=2)
    g = out[0].grid
    assert g[0][0] > 0
    assert g[0][1] == g[1][0] == g[1][1] == 0.0


def test_motion_brightness_offset_invariance():
    rng = np.random.default_rng(3)
    a = rng.integers(20, 100, (48, 48), dtype=np.uint8)
    b = rng.integers(20, 100, (48, 48), dtype=np.uint8)
    base = extract_motion_features([a, b], grid=4)
    shifted = extract_motion_features([a + 50, b + 50], grid=4)
    assert base[0].grid == shifted[0].grid


def test_motion_geometry_change_rejected():
    with pytest.raises(ValueError):
        extract_motion_features(
            [np.zeros((10, 10), np.uint8), np.zeros((10, 12), np.uint8)]
        )


def test_motion_grid_cap():
    frames = [np.zeros((16, 16), np.uint8)] * 2
    with pytest.raises(ConfigError):
        extract_motion_features(frames, grid=9)


def test_motion_bytes_below_one_percent_of_media():
    rng = np.random.default_rng(1)
    frames = [rng.integers(0, 255, (240, 320), dtype=np.uint8) for _ in range(20)]
    media_bytes = sum(f.nbytes for f in frames)
    out = extract_motion_features(frames, grid=4)
    assert len(to_ndjson(out).encode()) <= media_bytes * 0.01


# --- pause statistics ---------------------------------------------------------------

def test_pause_stats_hand_computed():
    segs = [VadSegment(0.0, 1.0), VadSegment(2.0, 3.0)]
    stats = pause_statistics(segs, 4.0)
    assert stats.pause_count == 2          # [1,2] and [3,4]
    assert stats.mean_pause_s == 1.0
    assert stats.median_pause_s == 1.0
    assert stats.total_pause_ratio == 0.5


def test_pause_stats_full_speech():
    stats = pause_statistics([VadSegment(0.0, 4.0)], 4.0)
    assert stats.pause_count == 0
    assert stats.total_pause_ratio == 0.0


def test_pause_stats_no_speech():
    stats = pause_statistics([], 7.5)
    assert stats.pause_count == 1
    assert stats.total_pause_ratio == 1.0
    assert stats.mean_pause_s == 7.5


def test_pause_stats_complement_identity():
    rng = random.Random(2)
    for _ in range(50):
        span = rng.uniform(5, 60)
        cursor = 0.0
        segs = []
        while cursor < span - 1:
            a = cursor + rng.uniform(0, 1.5)
            b = a + rng.uniform(0.1, 2.0)
            if b >= span:
                break
            segs.append(VadSegment(a, b))
            cursor = b
        stats = pause_statistics(segs, span)
        assert stats.total_pause_ratio + stats.speech_ratio == 1.0
        assert 0.0 <= stats.total_pause_ratio <= 1.0


def test_pause_stats_segment_outside_span_rejected():
    with pytest.raises(ValueError):
        pause_statistics([VadSegment(1.0, 5.0)], 4.0)
    with pytest.raises(ValueError):
        pause_statistics([VadSegment(1.0, 2.0), VadSegment(1.5, 3.0)], 4.0)


def test_ndjson_records_parse_and_carry_version():
    frames = extract_audio_features(sine(16000, 1.0), 16000, window_ms=500)
    for line in to_ndjson(frames).splitlines():
        doc = json.loads(line)
        assert doc["v"] == 1
        assert doc["type"] == "audio_features"
