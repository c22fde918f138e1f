"""Frame-directory loading, grayscale conversion and clip assembly."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import netpbm
from .errors import FormatError, InputError
from .tensor_core import FeatureTensor

LUMA = np.array([0.299, 0.587, 0.114])
FRAME_RE = re.compile(r"^frame_(\d{6})\.(pgm|ppm)$")


@dataclass(frozen=True)
class FrameSequence:
    """Frames as an (N, H, W, C) array: uint8 as loaded, float in [0, 1] after to_grayscale."""

    frames: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim == 3:
            f = f[..., None]
        if f.ndim != 4 or f.shape[0] < 1 or f.shape[3] not in (1, 3):
            raise FormatError(f"frames must be (N, H, W, 1|3) with N >= 1, got {f.shape}")
        f = f.copy()
        f.setflags(write=False)
        object.__setattr__(self, "frames", f)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def channels(self) -> int:
        return self.frames.shape[3]


@dataclass(frozen=True)
class CropBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise InputError(f"degenerate crop box {self}")
        if self.x0 < 0 or self.y0 < 0:
            raise InputError(f"crop box {self} has negative origin")

    def check_within(self, height: int, width: int) -> None:
        if self.x1 > width or self.y1 > height:
            raise InputError(f"crop box {self} exceeds {height}x{width} frame")

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Crop the (H, W) axes at positions 1 and 2 of a frame stack."""
        return a[:, self.y0:self.y1, self.x0:self.x1]


@dataclass(frozen=True)
class Clip:
    data: FeatureTensor  # (time, height, width), values in [0, 1] for raw clips
    source_id: str = ""
    start_index: int = 0
    stride: int = 1
    rgb: Optional[FeatureTensor] = field(default=None, compare=False)  # (time, height, width, channel)

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def array(self) -> np.ndarray:
        return self.data.data

    @classmethod
    def from_array(cls, a, source_id="", start_index=0, stride=1, rgb=None) -> "Clip":
        t = FeatureTensor(("time", "height", "width"), np.asarray(a))
        rgb_t = None if rgb is None else FeatureTensor(("time", "height", "width", "channel"), np.asarray(rgb))
        return cls(t, source_id, start_index, stride, rgb_t)


def load_sequence(path, frame_rate: float = 25.0) -> FrameSequence:
    """Read ``frame_%06d.pgm|ppm`` files numbered consecutively from 0."""
    path = Path(path)
    if not path.is_dir():
        raise FormatError(f"{path} is not a directory")
    found = {}
    for entry in path.iterdir():
        m = FRAME_RE.match(entry.name)
        if m:
            idx = int(m.group(1))
            if idx in found:
                raise FormatError(f"frame index {idx} appears twice in {path}")
            found[idx] = entry
    if not found:
        raise FormatError(f"no frame_%06d.pgm/ppm files in {path}")
    for i in range(len(found)):
        if i not in found:
            raise FormatError(f"missing frame index {i} in {path}")
    frames = []
    for i in range(len(found)):
        img = netpbm.read(found[i])
        if img.ndim == 2:
            img = img[..., None]
        if frames and img.shape != frames[0].shape:
            raise FormatError(f"frame {i} has shape {img.shape}, expected {frames[0].shape}")
        frames.append(img)
    return FrameSequence(np.stack(frames), frame_rate)


def write_sequence(path, frames: np.ndarray) -> None:
    """Write (N, H, W) or (N, H, W, 3) frames; floats are taken as [0, 1] and quantized."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        frames = np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)
    ext = "ppm" if frames.ndim == 4 and frames.shape[3] == 3 else "pgm"
    for i, img in enumerate(frames):
        netpbm.write(path / f"frame_{i:06d}.{ext}", img)


def to_grayscale(seq: FrameSequence) -> FrameSequence:
    f = seq.frames
    f = f.astype(np.float64) / 255.0 if f.dtype == np.uint8 else f.astype(np.float64)
    if f.shape[3] == 3:
        f = (f @ LUMA)[..., None]
    return FrameSequence(f, seq.frame_rate)


def clip_count(n_frames: int, length: int, stride: int, hop: int) -> int:
    span = (length - 1) * stride + 1
    if n_frames < span:
        return 0
    return (n_frames - span) // hop + 1


def make_clips(seq: FrameSequence, length: int = 32, stride: int = 1, hop: int = 32,
               crop: Optional[CropBox] = None, source_id: str = "") -> list[Clip]:
    """Cut windows of ``length`` frames sampled every ``stride`` frames, window starts ``hop`` apart."""
    if length < 2 or stride < 1 or hop < 1:
        raise InputError(f"need length >= 2, stride >= 1, hop >= 1 (got {length}, {stride}, {hop})")
    n = clip_count(len(seq), length, stride, hop)
    if n == 0:
        raise InputError(f"{len(seq)} frames cannot hold a clip spanning {(length - 1) * stride + 1}")
    color = seq.frames.shape[3] == 3
    rgb_all = None
    if color:
        rgb_all = seq.frames.astype(np.float64) / (255.0 if seq.frames.dtype == np.uint8 else 1.0)
    gray = to_grayscale(seq).frames[..., 0]
    if crop is not None:
        crop.check_within(seq.height, seq.width)
        gray = crop.apply(gray)
        if rgb_all is not None:
            rgb_all = crop.apply(rgb_all)
    clips = []
    for k in range(n):
        start = k * hop
        idx = np.arange(length) * stride + start
        rgb = rgb_all[idx] if rgb_all is not None else None
        clips.append(Clip.from_array(gray[idx], source_id, start, stride, rgb))
    return clips


def load_crops(path) -> dict[str, CropBox]:
    raw = json.loads(Path(path).read_text())
    try:
        return {k: CropBox(int(v["x0"]), int(v["y0"]), int(v["x1"]), int(v["y1"])) for k, v in raw.items()}
    except (KeyError, TypeError, AttributeError) as exc:
        raise FormatError(f"malformed crops file {path}: {exc}") from None
