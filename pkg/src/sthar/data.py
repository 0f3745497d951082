"""Clip records, on-disk dataset layout, temporal windows and subject splits.

Layout::

    <root>/manifest.json                               (optional)
    <root>/<class>/<subject>/<clip>/frame_00000.pgm    8-bit grayscale frames
    <root>/<class>/<subject>/<clip>.sthar              or one raw-clip file

Raw-clip files are ``b"STHAR1"`` followed by little-endian u32 T, C, H, W
and then T·C·H·W bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, IngestionError

RAW_MAGIC = b"STHAR1"
RAW_SUFFIX = ".sthar"
MANIFEST_NAME = "manifest.json"
DEFAULT_FPS = 25.0
_FRAME_RE = re.compile(r"^frame_(\d{5})\.(pgm|ppm)$")


@dataclass(eq=False)
class ClipRecord:
    """One labelled clip. ``frames`` is uint8 with shape (T, C, H, W)."""

    frames: np.ndarray
    label: int
    class_name: str
    subject: str
    path: str
    seed: int | None = None

    def __post_init__(self):
        if self.frames.ndim != 4 or len(self.frames) < 1:
            raise ContractError(f"{self.path}: frames must be T×C×H×W with T >= 1, got {self.frames.shape}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])

    def normalized(self, dtype=np.float32) -> np.ndarray:
        return normalize(self.frames, dtype)


def normalize(frames: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 pixels → [0, 1]."""
    return frames.astype(dtype) / dtype(255.0)


@dataclass(eq=False)
class DatasetManifest:
    classes: list[str]
    records: list[ClipRecord] = field(default_factory=list)
    frame_shape: tuple[int, int, int] | None = None
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ContractError(f"class names are not unique: {self.classes}")
        for r in self.records:
            if not 0 <= r.label < len(self.classes):
                raise ContractError(f"{r.path}: label {r.label} out of range for {len(self.classes)} classes")
            if self.frame_shape is not None and r.frame_shape != tuple(self.frame_shape):
                raise ContractError(f"{r.path}: frame shape {r.frame_shape} != {tuple(self.frame_shape)}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def subjects(self) -> list[str]:
        return sorted({r.subject for r in self.records})

    def to_json(self) -> dict:
        """Schema: classes[], records[{path,label,subject,frames}], shape, fps."""
        return {
            "classes": list(self.classes),
            "records": [
                {"path": r.path, "label": r.label, "subject": r.subject, "frames": len(r)} for r in self.records
            ],
            "shape": list(self.frame_shape) if self.frame_shape is not None else None,
            "fps": self.fps,
        }

    def fingerprint(self) -> str:
        """SHA-256 over the JSON export plus every frame byte, in record order."""
        h = hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode())
        for r in self.records:
            h.update(r.class_name.encode())
            h.update(np.ascontiguousarray(r.frames, dtype=np.uint8).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# netpbm and raw-clip codecs


def _pnm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError("truncated header")
        tokens.append(data[start:i])
    return tokens, i + 1  # single whitespace byte ends the header


def read_pnm(path: Path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file as a (1, H, W) uint8 array.

    Colour images are converted to luminance.
    """
    data = path.read_bytes()
    try:
        (magic, w, h, maxval), offset = _pnm_tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise IngestionError(f"{path}: malformed netpbm header ({exc})") from None
    if maxval < 1 or maxval > 255:
        raise IngestionError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise IngestionError(f"{path}: unsupported netpbm type {magic!r}")
    need = w * h * channels
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset) if len(data) - offset >= need else None
    if pixels is None:
        raise IngestionError(f"{path}: expected {need} pixel bytes, found {len(data) - offset}")
    if channels == 3:
        rgb = pixels.reshape(h, w, 3).astype(np.float64)
        gray = np.rint(rgb @ np.array([0.299, 0.587, 0.114]))
        pixels = np.clip(gray, 0, 255).astype(np.uint8)
    img = pixels.reshape(1, h, w)
    if maxval != 255:
        img = np.rint(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return img


def write_pgm(path: Path, frame: np.ndarray) -> None:
    """Write a (1, H, W) or (H, W) uint8 frame as binary PGM."""
    img = np.asarray(frame, dtype=np.uint8)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ContractError(f"PGM frames must have one channel, got {img.shape[0]}")
        img = img[0]
    h, w = img.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def write_raw_clip(path: Path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    t, c, h, w = frames.shape
    path.write_bytes(RAW_MAGIC + struct.pack("<4I", t, c, h, w) + frames.tobytes())


def read_raw_clip(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if data[: len(RAW_MAGIC)] != RAW_MAGIC:
        raise IngestionError(f"{path}: bad raw-clip magic")
    head = len(RAW_MAGIC) + 16
    if len(data) < head:
        raise IngestionError(f"{path}: truncated raw-clip header")
    t, c, h, w = struct.unpack("<4I", data[len(RAW_MAGIC) : head])
    if t < 1:
        raise IngestionError(f"{path}: raw clip has no frames")
    need = t * c * h * w
    if len(data) - head != need:
        raise IngestionError(f"{path}: expected {need} pixel bytes, found {len(data) - head}")
    return np.frombuffer(data, dtype=np.uint8, offset=head).reshape(t, c, h, w).copy()


# ---------------------------------------------------------------------------
# loading and writing datasets


def _sorted_entries(path: Path) -> list[Path]:
    # byte-wise ordering so results do not depend on the platform's listing order
    return sorted(path.iterdir(), key=lambda p: p.name.encode("utf-8"))


def _read_frame_dir(clip_dir: Path) -> np.ndarray:
    indexed: dict[int, Path] = {}
    for entry in _sorted_entries(clip_dir):
        m = _FRAME_RE.match(entry.name)
        if not m or not entry.is_file():
            raise IngestionError(f"{entry}: unexpected entry in clip directory")
        idx = int(m.group(1))
        if idx in indexed:
            raise IngestionError(f"{entry}: duplicate frame index {idx}")
        indexed[idx] = entry
    if not indexed:
        raise IngestionError(f"{clip_dir}: clip directory holds no frames")
    expected = set(range(len(indexed)))
    if set(indexed) != expected:
        missing = sorted(expected - set(indexed))
        first = missing[0] if missing else max(indexed)
        raise IngestionError(f"{clip_dir}: missing frames (first gap at frame_{first:05d})")
    frames = [read_pnm(indexed[i]) for i in range(len(indexed))]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise IngestionError(f"{clip_dir}: frames have inconsistent shapes {sorted(shapes)}")
    return np.stack(frames)


def load_dataset(root) -> DatasetManifest:
    """Read a dataset tree into a manifest with lexicographic record order.

    When ``manifest.json`` is present its class list defines the labels and
    any other class directory is rejected; otherwise every directory under
    ``root`` is a class, labelled by sorted name.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root}: dataset root is not a directory")
    fps = DEFAULT_FPS
    declared: list[str] | None = None
    shape = None
    mpath = root / MANIFEST_NAME
    if mpath.exists():
        try:
            meta = json.loads(mpath.read_text())
            declared = list(meta["classes"])
            fps = float(meta.get("fps", DEFAULT_FPS))
            shape = tuple(meta["shape"]) if meta.get("shape") else None
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestionError(f"{mpath}: unreadable manifest ({exc})") from None

    class_dirs = []
    for entry in _sorted_entries(root):
        if entry.name == MANIFEST_NAME:
            continue
        if not entry.is_dir():
            raise IngestionError(f"{entry}: unexpected file at class level")
        class_dirs.append(entry)
    classes = declared if declared is not None else [d.name for d in class_dirs]
    for d in class_dirs:
        if d.name not in classes:
            raise IngestionError(f"{d}: unknown class directory (not in {MANIFEST_NAME})")

    records: list[ClipRecord] = []
    for class_dir in class_dirs:
        label = classes.index(class_dir.name)
        for subject_dir in _sorted_entries(class_dir):
            if not subject_dir.is_dir():
                raise IngestionError(f"{subject_dir}: expected a subject directory")
            for clip in _sorted_entries(subject_dir):
                if clip.is_dir():
                    frames, name = _read_frame_dir(clip), clip.name
                elif clip.suffix == RAW_SUFFIX:
                    frames, name = read_raw_clip(clip), clip.stem
                else:
                    raise IngestionError(f"{clip}: neither a frame directory nor a {RAW_SUFFIX} clip")
                rel = f"{class_dir.name}/{subject_dir.name}/{name}"
                if shape is None:
                    shape = frames.shape[1:]
                if frames.shape[1:] != tuple(shape):
                    raise IngestionError(f"{clip}: frame shape {frames.shape[1:]} differs from {tuple(shape)}")
                records.append(ClipRecord(frames, label, class_dir.name, subject_dir.name, rel))
    return DatasetManifest(classes, records, tuple(shape) if shape is not None else None, fps)


def write_dataset(manifest: DatasetManifest, root, fmt: str = "pgm") -> None:
    """Write ``manifest`` under ``root`` in the layout :func:`load_dataset` reads."""
    if fmt not in ("pgm", "raw"):
        raise ContractError(f"unknown dataset format {fmt!r}; expected pgm or raw")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for r in manifest.records:
        target = root / r.path
        target.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "raw":
            write_raw_clip(target.with_name(target.name + RAW_SUFFIX), r.frames)
        else:
            target.mkdir(exist_ok=True)
            for i, frame in enumerate(r.frames):
                write_pgm(target / f"frame_{i:05d}.pgm", frame)
    text = json.dumps(manifest.to_json(), indent=2) + "\n"
    tmp = root / (MANIFEST_NAME + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, root / MANIFEST_NAME)


# ---------------------------------------------------------------------------
# temporal windows


def window_start(length: int, n: int, mode: str = "center", rng=None) -> int:
    if n < 1:
        raise ContractError(f"context length must be positive, got {n}")
    if length < n:
        raise ContractError(f"clip of {length} frames is shorter than context length {n}")
    if mode == "center":
        return (length - n) // 2
    if mode == "random":
        if rng is None or isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        return int(rng.integers(0, length - n + 1))
    raise ContractError(f"unknown window mode {mode!r}; expected center or random")


def sample_window(clip, n: int, mode: str = "center", rng=None) -> np.ndarray:
    """``n`` consecutive frames: the central ones, or a seeded random window.

    ``clip`` is a :class:`ClipRecord` or a frame array; ``rng`` is a
    ``numpy.random.Generator`` or an integer seed (random mode only).
    """
    frames = clip.frames if isinstance(clip, ClipRecord) else np.asarray(clip)
    start = window_start(len(frames), n, mode, rng)
    return frames[start : start + n]


# ---------------------------------------------------------------------------
# subject-disjoint splits

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        for i in range(3):
            for j in range(i + 1, 3):
                both = sets[i] & sets[j]
                if both:
                    raise ContractError(f"subjects {sorted(both)} appear in both {SPLIT_NAMES[i]} and {SPLIT_NAMES[j]}")

    def subjects(self, name: str) -> tuple[str, ...]:
        if name not in SPLIT_NAMES:
            raise ContractError(f"unknown split {name!r}; expected one of {SPLIT_NAMES}")
        return getattr(self, name)

    def records(self, manifest: DatasetManifest, name: str) -> list[ClipRecord]:
        wanted = set(self.subjects(name))
        return [r for r in manifest.records if r.subject in wanted]

    def to_json(self) -> dict:
        return {k: list(getattr(self, k)) for k in SPLIT_NAMES}


def _split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [r * n for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    remainder = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def split_by_subject(manifest: DatasetManifest, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> SplitSpec:
    """Shuffle subject ids with ``seed`` and cut them into train/val/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    subjects = manifest.subjects()
    counts = _split_counts(len(subjects), ratios)
    if min(counts) < 1:
        raise ContractError(f"{len(subjects)} subjects are too few for ratios {ratios} (split sizes {counts})")
    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    a, b = counts[0], counts[0] + counts[1]
    return SplitSpec(tuple(sorted(shuffled[:a])), tuple(sorted(shuffled[a:b])), tuple(sorted(shuffled[b:])))
