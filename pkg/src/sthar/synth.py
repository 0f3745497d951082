"""Deterministic six-class moving-square video generator.

Three classes translate a bright square at slow/medium/fast constant speed
(bouncing off the borders); three are "gestures" in place: horizontal
oscillation, vertical oscillation and a periodic change of scale.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import ClipRecord, DatasetManifest
from .errors import ConfigError

SYNTH_CLASSES = (
    "oscillate_horizontal",
    "oscillate_vertical",
    "pulse_scale",
    "translate_fast",
    "translate_medium",
    "translate_slow",
)
# pixels per frame at a 32-pixel frame width; scaled with the frame
SPEEDS = {"translate_slow": 0.5, "translate_medium": 1.0, "translate_fast": 2.0}


@dataclass
class SyntheticSpec:
    clips_per_class: int = 100
    frame_shape: tuple[int, int, int] = (1, 32, 32)
    clip_length: int = 32
    subjects: int = 25
    noise: float = 0.05
    seed: int = 0
    max_context: int = 24
    fps: float = 25.0
    format: str = "pgm"

    def __post_init__(self):
        self.frame_shape = tuple(int(v) for v in self.frame_shape)

    @property
    def classes(self) -> tuple[str, ...]:
        return SYNTH_CLASSES

    def validate(self) -> "SyntheticSpec":
        if self.clip_length < self.max_context:
            raise ConfigError(
                f"clip_length {self.clip_length} is shorter than the largest context length {self.max_context}"
            )
        if self.clips_per_class < 1 or self.subjects < 1:
            raise ConfigError("clips_per_class and subjects must be positive")
        if len(self.frame_shape) != 3 or self.frame_shape[0] != 1:
            raise ConfigError(f"synthetic frames are single-channel (1, H, W), got {self.frame_shape}")
        if min(self.frame_shape[1:]) < 16:
            raise ConfigError(f"synthetic frames must be at least 16×16, got {self.frame_shape}")
        if self.noise < 0:
            raise ConfigError("noise level must be non-negative")
        if self.format not in ("pgm", "raw"):
            raise ConfigError(f"format must be pgm or raw, got {self.format!r}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frame_shape"] = list(self.frame_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel [j, j+1) covered by the interval [lo, hi)."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1.0, hi) - np.maximum(edges, lo), 0.0, 1.0)


def render_square(h: int, w: int, cx: float, cy: float, size: float, brightness: float) -> np.ndarray:
    """Anti-aliased axis-aligned square centred at (cx, cy), values in [0, brightness]."""
    half = size / 2.0
    cols = _coverage(cx - half, cx + half, w)
    rows = _coverage(cy - half, cy + half, h)
    return brightness * np.outer(rows, cols)


def _fold(x: float, lo: float, hi: float) -> float:
    """Reflect an unbounded coordinate into [lo, hi] (bounce at the borders)."""
    span = hi - lo
    if span <= 0:
        return lo
    u = (x - lo) % (2 * span)
    return lo + (u if u <= span else 2 * span - u)


def pulse_period(spec: SyntheticSpec, class_index: int, clip_index: int) -> int:
    """Integer period (frames) of a pulse-scale clip."""
    return int(_clip_rng(spec, class_index, clip_index).integers(8, 13))


def _clip_rng(spec: SyntheticSpec, class_index: int, clip_index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, 2, class_index, clip_index])


def _subject_traits(spec: SyntheticSpec, subject: int) -> dict:
    rng = np.random.default_rng([spec.seed, 1, subject])
    return {
        "size_offset": float(rng.integers(-1, 2)),
        "shift": rng.uniform(-2.0, 2.0, size=2),
        "brightness": float(rng.uniform(0.8, 1.0)),
    }


def generate_clip(spec: SyntheticSpec, class_index: int, clip_index: int, subject: int) -> np.ndarray:
    """Frames (T, 1, H, W) in [0, 1] (float64) for one clip, before quantisation."""
    _, h, w = spec.frame_shape
    name = SYNTH_CLASSES[class_index]
    traits = _subject_traits(spec, subject)
    rng = _clip_rng(spec, class_index, clip_index)
    scale = min(h, w) / 32.0
    size = max(3.0, round(min(h, w) / 5.0) + traits["size_offset"] * scale)
    bright = traits["brightness"]
    sx, sy = traits["shift"] * scale
    T = spec.clip_length
    frames = np.zeros((T, 1, h, w), dtype=np.float64)

    if name == "pulse_scale":
        period = int(rng.integers(8, 13))
        cx = w / 2.0 + sx + rng.uniform(-3, 3) * scale
        cy = h / 2.0 + sy + rng.uniform(-3, 3) * scale
        phase0 = int(rng.integers(0, period))
        for t in range(T):
            phase = ((t + phase0) % period) / period
            s = size * (1.0 + 0.6 * np.sin(2 * np.pi * phase))
            frames[t, 0] = render_square(h, w, cx, cy, s, bright)
    elif name.startswith("oscillate"):
        period = rng.uniform(10.0, 14.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = 8.0 * scale
        cx = w / 2.0 + sx + rng.uniform(-2, 2) * scale
        cy = h / 2.0 + sy + rng.uniform(-2, 2) * scale
        for t in range(T):
            d = amp * np.sin(2 * np.pi * t / period + phase)
            x, y = (cx + d, cy) if name == "oscillate_horizontal" else (cx, cy + d)
            frames[t, 0] = render_square(h, w, x, y, size, bright)
    else:
        speed = SPEEDS[name] * scale
        quadrant = int(rng.integers(0, 4))
        angle = np.pi / 4 + quadrant * np.pi / 2 + rng.uniform(-np.pi / 12, np.pi / 12)
        vx, vy = speed * np.cos(angle), speed * np.sin(angle)
        half = size / 2.0
        x0 = rng.uniform(half, w - half) + sx
        y0 = rng.uniform(half, h - half) + sy
        for t in range(T):
            x = _fold(x0 + vx * t, half, w - half)
            y = _fold(y0 + vy * t, half, h - half)
            frames[t, 0] = render_square(h, w, x, y, size, bright)

    if spec.noise > 0:
        frames = frames + rng.normal(0.0, spec.noise, size=frames.shape)
    return np.clip(frames, 0.0, 1.0)


def quantize(frames: np.ndarray) -> np.ndarray:
    return np.rint(frames * 255.0).astype(np.uint8)


def synth_generate(spec: SyntheticSpec) -> DatasetManifest:
    """Build the whole dataset in memory; identical output for identical specs."""
    spec.validate()
    records = []
    for c, name in enumerate(SYNTH_CLASSES):
        for k in range(spec.clips_per_class):
            subject = k % spec.subjects
            frames = quantize(generate_clip(spec, c, k, subject))
            subj = f"person{subject + 1:02d}"
            records.append(
                ClipRecord(frames, c, name, subj, f"{name}/{subj}/{name}_{k:04d}", seed=spec.seed)
            )
    # lexicographic by path, the order load_dataset produces
    records.sort(key=lambda r: tuple(part.encode("utf-8") for part in r.path.split("/")))
    return DatasetManifest(list(SYNTH_CLASSES), records, tuple(spec.frame_shape), spec.fps)
