"""Per-pixel temporal spectra of residual clips.

Each pixel's intensity trace over the T frames of a clip is Fourier transformed
on its own; the first T/2 bins (DC included, Nyquist dropped) form the
frequency volume consumed by the detector.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .ingest import Clip
from .tensor_core import FeatureTensor

MODES = ("magnitude", "phase", "both")


def dft_oracle(v) -> np.ndarray:
    """Naive O(T^2) DFT along the last axis, float64/complex128."""
    v = np.asarray(v, dtype=np.float64 if not np.iscomplexobj(v) else np.complex128)
    n = v.shape[-1]
    if n < 2:
        raise ConfigError("DFT length must be >= 2")
    kt = np.outer(np.arange(n), np.arange(n)) % n  # exact integer phase index
    basis = np.exp(-2j * np.pi * kt / n)
    return v @ basis.T


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(v) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis.

    Leading axes are batch axes; every batch row is transformed with exactly
    the same sequence of operations, so results do not depend on how rows are
    grouped into calls.
    """
    x = np.asarray(v)
    n = x.shape[-1]
    if not _is_pow2(n) or n < 2:
        raise ConfigError(f"FFT length must be a power of two >= 2, got {n}")
    x = x.astype(np.complex128)[..., _bit_reverse(n)]
    batch = x.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = x.reshape(batch + (n // m, m))
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        x = np.concatenate((even + odd, even - odd), axis=-1).reshape(batch + (n,))
        m *= 2
    return x


@dataclass(frozen=True)
class SpectrumVolume:
    """(bin, height, width) frequency volume; ``mode="both"`` stacks magnitude bins over phase bins."""

    data: FeatureTensor
    mode: str = "magnitude"
    bin_hz: float = 0.0
    drop_dc: bool = False

    @property
    def n_bins(self) -> int:
        k = self.data.shape[0]
        return k // 2 if self.mode == "both" else k

    @property
    def array(self) -> np.ndarray:
        return self.data.data

    def magnitude(self) -> np.ndarray:
        if self.mode == "phase":
            raise DomainError("volume holds phase only")
        return self.array[: self.n_bins]


def spectrum_array(frames: np.ndarray, mode: str = "magnitude", drop_dc: bool = False,
                   workers: int = 1) -> np.ndarray:
    """(T, H, W) residual frames to a (K, H, W) float64 volume (2K bins for ``both``)."""
    if mode not in MODES:
        raise ConfigError(f"unknown spectrum mode {mode!r}")
    frames = np.asarray(frames, dtype=np.float64)
    t, h, w = frames.shape
    k = t // 2
    lo = 1 if drop_dc else 0
    pix = np.ascontiguousarray(np.moveaxis(frames, 0, -1)).reshape(h * w, t)

    def run(rows):
        return fft(pix[rows])[:, lo:lo + k]

    if workers <= 1 or h * w < 2:
        spec = run(slice(None))
    else:
        bounds = np.linspace(0, h * w, min(workers, h * w) + 1).astype(int)
        chunks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            spec = np.concatenate(list(pool.map(run, chunks)), axis=0)
    if mode == "magnitude":
        out = np.abs(spec)
    elif mode == "phase":
        out = np.arctan2(spec.imag, spec.real)
    else:
        out = np.concatenate((np.abs(spec), np.arctan2(spec.imag, spec.real)), axis=1)
    return np.moveaxis(out.reshape(h, w, -1), -1, 0)


def extract_spectrum(clip: Clip, mode: str = "magnitude", drop_dc: bool = False,
                     workers: int = 1, frame_rate: float = 25.0) -> SpectrumVolume:
    t = clip.length
    if not _is_pow2(t) or t < 2:
        raise ConfigError(f"clip length must be a power of two, got {t}")
    vol = spectrum_array(clip.array, mode, drop_dc, workers)
    bin_hz = frame_rate / (clip.stride * t)
    return SpectrumVolume(FeatureTensor(("bin", "height", "width"), vol), mode, bin_hz, drop_dc)


def band_energy_array(mag: np.ndarray, k_lo: int, k_hi: int) -> np.ndarray:
    k = mag.shape[0]
    if not (0 <= k_lo <= k_hi < k):
        raise DomainError(f"band [{k_lo}, {k_hi}] outside 0..{k - 1}")
    band = np.asarray(mag[k_lo:k_hi + 1], dtype=np.float64)
    return np.einsum("khw,khw->hw", band, band)


def band_energy_map(vol: SpectrumVolume, k_lo: int, k_hi: int) -> FeatureTensor:
    """Per-pixel sum of squared magnitudes over bins k_lo..k_hi inclusive."""
    if vol.mode != "magnitude":
        raise DomainError("band energy needs a magnitude volume")
    return FeatureTensor(("height", "width"), band_energy_array(vol.array, k_lo, k_hi))
