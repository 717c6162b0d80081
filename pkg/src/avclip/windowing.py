"""Sliding-window decomposition of paired audio/video media.

Windows are one second long with 75% overlap by default (hop 0.25 s); each
window carries the 16 video frame indices fed to the video encoder and the
half-open audio sample range at 16 kHz.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ValidationError

# float slack for placement tests; durations are given in seconds with at most microsecond meaning
_EPS = 1e-9


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class WindowSpec:
    window_len_s: float = 1.0
    overlap: float = 0.75
    fps: float = 32.0
    n_frames: int = 16
    sample_rate: int = 16000

    def __post_init__(self):
        if not self.window_len_s > 0:
            raise ConfigError(f"window_len_s must be positive, got {self.window_len_s}")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError(f"overlap must lie in [0, 1), got {self.overlap}")
        if self.hop <= 0:
            raise ConfigError("hop must be positive")
        if self.fps <= 0 or self.sample_rate <= 0 or self.n_frames < 1:
            raise ConfigError("fps, sample_rate and n_frames must be positive")
        if self.n_frames > self.fps * self.window_len_s + _EPS:
            raise ConfigError(
                f"{self.n_frames} frames do not fit in a {self.window_len_s}s window at {self.fps} fps"
            )

    @property
    def hop(self) -> float:
        return self.window_len_s * (1.0 - self.overlap)


@dataclass(frozen=True)
class Window:
    index: int
    start_s: float
    end_s: float
    frame_indices: tuple
    audio_sample_range: tuple


@dataclass(frozen=True)
class WindowManifest:
    source_id: str
    windows: tuple

    def __len__(self):
        return len(self.windows)

    def to_json(self) -> dict:
        return {
            "source_id": self.source_id,
            "windows": [
                {
                    "index": w.index,
                    "start_s": w.start_s,
                    "end_s": w.end_s,
                    "frame_indices": list(w.frame_indices),
                    "audio_sample_range": list(w.audio_sample_range),
                }
                for w in self.windows
            ],
        }

    @classmethod
    def from_json(cls, obj) -> "WindowManifest":
        wins = tuple(
            Window(int(w["index"]), float(w["start_s"]), float(w["end_s"]),
                   tuple(int(i) for i in w["frame_indices"]), tuple(int(i) for i in w["audio_sample_range"]))
            for w in obj["windows"]
        )
        return cls(str(obj["source_id"]), wins)


def window_count(duration_s: float, spec: WindowSpec) -> int:
    if duration_s + _EPS < spec.window_len_s:
        return 0
    return int(math.floor((duration_s - spec.window_len_s) / spec.hop + _EPS)) + 1


def frame_indices(window, spec: WindowSpec = WindowSpec()) -> list[int]:
    """``n_frames`` evenly strided frame indices starting at the window's first frame."""
    start_s, end_s = window
    frames_in_window = (end_s - start_s) * spec.fps
    if frames_in_window + _EPS < spec.n_frames:
        raise ValidationError(
            f"window of {frames_in_window:g} frames cannot supply {spec.n_frames} distinct frames"
        )
    start_frame = round_half_up(start_s * spec.fps)
    stride = frames_in_window / spec.n_frames
    return [round_half_up(start_frame + k * stride) for k in range(spec.n_frames)]


def audio_sample_range(window, sample_rate: int = 16000) -> tuple[int, int]:
    """Half-open ``(start_sample, end_sample)`` for a window given in seconds."""
    start_s, end_s = window
    return round_half_up(start_s * sample_rate), round_half_up(end_s * sample_rate)


def compute_windows(duration_s: float, spec: WindowSpec = WindowSpec(), *,
                    source_id: str = "", trim_s: float = 0.0) -> WindowManifest:
    """All full-length windows of a clip; a tail shorter than one window is dropped.

    ``trim_s`` discards that many leading seconds before placing windows.
    """
    if duration_s < 0 or trim_s < 0:
        raise ValidationError("duration_s and trim_s must be non-negative")
    usable = max(duration_s - trim_s, 0.0)
    windows = []
    for i in range(window_count(usable, spec)):
        start = trim_s + i * spec.hop
        end = start + spec.window_len_s
        windows.append(
            Window(i, start, end, tuple(frame_indices((start, end), spec)),
                   audio_sample_range((start, end), spec.sample_rate))
        )
    return WindowManifest(source_id, tuple(windows))


def resample_linear(pcm, from_rate: float, to_rate: float) -> np.ndarray:
    """Linear-interpolation resampling; positions past the last input sample clamp to it."""
    if from_rate <= 0 or to_rate <= 0:
        raise ConfigError("sample rates must be positive")
    x = np.asarray(pcm, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    if from_rate == to_rate:
        return x.copy()
    n_out = round_half_up(x.size * to_rate / from_rate)
    pos = np.arange(n_out) * (from_rate / to_rate)
    return np.interp(pos, np.arange(x.size), x)


def read_media_info(path) -> dict:
    with open(path) as fh:
        info = json.load(fh)
    missing = {"source_id", "duration_s"} - set(info)
    if missing:
        raise ValidationError(f"media info {path} lacks keys {sorted(missing)}")
    return info


def spec_dict(spec: WindowSpec) -> dict:
    return asdict(spec)
