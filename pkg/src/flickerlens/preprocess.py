"""Residual frames: each frame minus a spatially filtered copy of itself."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError
from .ingest import LUMA, Clip
from .tensor_core import FeatureTensor

FILTERS = ("median", "mean", "none")


@dataclass(frozen=True)
class ResidualConfig:
    filter_kind: str = "median"
    kernel: int = 3
    filter_before_gray: bool = False

    def __post_init__(self):
        if self.filter_kind not in FILTERS:
            raise ConfigError(f"unknown filter {self.filter_kind!r}; choose from {FILTERS}")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 3, got {self.kernel}")


def _check_kernel(kernel: int) -> None:
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"kernel must be odd, got {kernel}")


def median_stack(frames: np.ndarray, kernel: int) -> np.ndarray:
    """kernel x kernel median over the trailing (H, W) axes with edge replication."""
    _check_kernel(kernel)
    size = (1,) * (frames.ndim - 2) + (kernel, kernel)
    return ndimage.median_filter(np.asarray(frames, dtype=np.float64), size=size, mode="nearest")


def mean_stack(frames: np.ndarray, kernel: int) -> np.ndarray:
    _check_kernel(kernel)
    size = (1,) * (frames.ndim - 2) + (kernel, kernel)
    return ndimage.uniform_filter(np.asarray(frames, dtype=np.float64), size=size, mode="nearest")


def spatial_median(frame: FeatureTensor, kernel: int = 3) -> FeatureTensor:
    return FeatureTensor(frame.dims, median_stack(frame.data, kernel))


def residual_array(frames: np.ndarray, cfg: ResidualConfig) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if cfg.filter_kind == "none":
        return frames
    if cfg.kernel > min(frames.shape[-2:]):
        raise ConfigError(f"kernel {cfg.kernel} larger than frame {frames.shape[-2:]}")
    filt = median_stack if cfg.filter_kind == "median" else mean_stack
    return frames - filt(frames, cfg.kernel)


def residual_clip(clip: Clip, cfg: ResidualConfig = ResidualConfig()) -> Clip:
    """Per-frame ``frame - filter(frame)``; ``filter_kind="none"`` returns the frames unchanged.

    With ``filter_before_gray`` and a colour clip, each RGB channel is filtered and
    the channel residuals are then combined with the luma weights.
    """
    if cfg.filter_before_gray and cfg.filter_kind != "none":
        if clip.rgb is None:
            raise InputError("filter_before_gray needs a clip that carries RGB frames")
        rgb = np.moveaxis(clip.rgb.data.astype(np.float64), -1, 0)  # (3, T, H, W)
        res = np.tensordot(LUMA, residual_array(rgb, cfg), axes=1)
    else:
        res = residual_array(clip.array, cfg)
    return Clip.from_array(res, clip.source_id, clip.start_index, clip.stride)
