"""Seeded synthetic clips: smooth moving texture ("real") and the same with a planted local flicker ("fake")."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .ingest import Clip, write_sequence

MOTIONS = ("static", "drift", "breathing")


@dataclass(frozen=True)
class Flicker:
    center: tuple[float, float]  # (cy, cx) in pixels
    radius: float = 8.0
    bins: tuple[int, ...] = (3, 5, 7)
    amplitude: float = 0.08


@dataclass(frozen=True)
class SynthSpec:
    height: int = 64
    width: int = 64
    length: int = 32
    motion: str = "drift"
    flicker: Optional[Flicker] = None
    noise_sigma: float = 0.01
    seed: int = 0
    background: float = 0.5
    contrast: float = 0.15
    speed: float = 0.5  # drift in px/frame, or breathing zoom depth in percent
    center_margin: float = 16.0  # make_dataset keeps flicker centers this far from the border

    def validate(self) -> None:
        if min(self.height, self.width) < 4 or self.length < 4 or self.length % 2:
            raise ConfigError("frames must be at least 4x4 and the clip length even and >= 4")
        if self.motion not in MOTIONS:
            raise ConfigError(f"unknown motion {self.motion!r}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        f = self.flicker
        if f is None:
            return
        cy, cx = f.center
        if f.radius <= 0 or not (f.radius <= cy <= self.height - 1 - f.radius
                                 and f.radius <= cx <= self.width - 1 - f.radius):
            raise ConfigError(f"flicker disc {f} does not fit a {self.height}x{self.width} frame")
        if not f.bins or any(not (1 <= k <= self.length // 2 - 1) for k in f.bins):
            raise ConfigError(f"flicker bins {f.bins} outside [1, {self.length // 2 - 1}]")
        if f.amplitude <= 0:
            raise ConfigError("flicker amplitude must be > 0")


def _texture(rng, n_waves=4):
    """Random low-frequency plane waves: (freqs (n, 2) cycles/px, phases, weights)."""
    freq = rng.uniform(0.008, 0.04, size=(n_waves, 2)) * rng.choice([-1.0, 1.0], size=(n_waves, 2))
    phase = rng.uniform(0, 2 * np.pi, size=n_waves)
    weight = rng.uniform(0.5, 1.0, size=n_waves)
    return freq, phase, weight / weight.sum()


def flicker_pattern(spec: SynthSpec, rng) -> np.ndarray:
    """Per-pixel sign field (+1/-1 inside the disc, 0 outside) so the flicker is spatially fine-grained."""
    f = spec.flicker
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    inside = (yy - f.center[0]) ** 2 + (xx - f.center[1]) ** 2 <= f.radius ** 2
    signs = rng.choice([-1.0, 1.0], size=(spec.height, spec.width))
    return np.where(inside, signs, 0.0)


def generate(spec: SynthSpec) -> tuple[Clip, dict]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w, t = spec.height, spec.width, spec.length
    freq, phase, weight = _texture(rng)
    direction = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    frames = np.empty((t, h, w))
    for i in range(t):
        if spec.motion == "drift":
            py = yy - spec.speed * i * np.sin(direction)
            px = xx - spec.speed * i * np.cos(direction)
        elif spec.motion == "breathing":
            zoom = 1.0 + 0.01 * spec.speed * np.sin(2 * np.pi * i / t)
            py, px = cy + (yy - cy) / zoom, cx + (xx - cx) / zoom
        else:
            py, px = yy, xx
        arg = 2 * np.pi * (py[..., None] * freq[:, 0] + px[..., None] * freq[:, 1]) + phase
        frames[i] = spec.background + spec.contrast * (np.cos(arg) @ weight)
    truth = {"label": 0, "seed": spec.seed, "motion": spec.motion}
    if spec.flicker is not None:
        f = spec.flicker
        pattern = flicker_pattern(spec, rng)
        phases = rng.uniform(0, 2 * np.pi, size=len(f.bins))
        tt = np.arange(t)
        trace = sum(f.amplitude * np.cos(2 * np.pi * k * tt / t + ph) for k, ph in zip(f.bins, phases))
        frames += trace[:, None, None] * pattern
        truth.update(label=1, center=[float(f.center[0]), float(f.center[1])], radius=float(f.radius),
                     bins=[int(k) for k in f.bins], amplitude=float(f.amplitude))
    if spec.noise_sigma > 0:
        frames += rng.normal(0.0, spec.noise_sigma, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)
    return Clip.from_array(frames, source_id=f"synth-{spec.seed}"), truth


@dataclass
class SynthDataset:
    clips: list[Clip]
    labels: list[int]
    manifest: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.clips)

    def save(self, out_dir) -> Path:
        """Write one frame directory per clip plus ``manifest.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for clip, entry in zip(self.clips, self.manifest):
            write_sequence(out / entry["source_id"], clip.array)
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=1))
        return out


def make_dataset(n_real: int, n_fake: int, template: SynthSpec = SynthSpec(), seed: int = 0) -> SynthDataset:
    """Balanced-by-construction labelled clips; fake clips get random centres and bin subsets."""
    if n_real < 1 or n_fake < 1:
        raise ConfigError("need at least one clip per label")
    rng = np.random.default_rng(seed)
    base_flicker = template.flicker or Flicker(center=(template.height / 2, template.width / 2))
    labels = [0] * n_real + [1] * n_fake
    order = rng.permutation(len(labels))
    clips, out_labels, manifest = [], [], []
    for j, i in enumerate(order):
        label = labels[i]
        clip_seed = int(rng.integers(0, 2**31 - 1))
        flicker = None
        if label:
            lo_y = max(min(template.center_margin, (template.height - 1) / 2), base_flicker.radius)
            lo_x = max(min(template.center_margin, (template.width - 1) / 2), base_flicker.radius)
            if lo_y > template.height - 1 - lo_y or lo_x > template.width - 1 - lo_x:
                raise ConfigError(f"flicker radius {base_flicker.radius} does not fit the frame")
            cy = rng.uniform(lo_y, template.height - 1 - lo_y)
            cx = rng.uniform(lo_x, template.width - 1 - lo_x)
            n_b = int(rng.integers(1, len(base_flicker.bins) + 1))
            bins = tuple(sorted(rng.choice(base_flicker.bins, size=n_b, replace=False).tolist()))
            flicker = replace(base_flicker, center=(float(cy), float(cx)), bins=bins)
        spec = replace(template, flicker=flicker, seed=clip_seed)
        clip, truth = generate(spec)
        source_id = f"clip_{j:04d}"
        clips.append(Clip(clip.data, source_id))
        out_labels.append(label)
        manifest.append({"source_id": source_id, **truth})
    return SynthDataset(clips, out_labels, manifest)


def spec_to_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
