"""Attention proposal: part-centre regression, soft rectangular masks, masked crops.

Coordinate convention: ``a`` is the column (x) centre and ``b`` the row (y)
centre of a part, both in pixels of the frequency volume.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ShapeError
from .spectrum import SpectrumVolume
from .tensor_core import FeatureTensor

DEFAULT_THETA = 44.0
DEFAULT_SCALE = 10.0


@dataclass(frozen=True)
class SoftMaskParams:
    a: float  # x centre
    b: float  # y centre
    theta: float = DEFAULT_THETA
    scale: float = DEFAULT_SCALE

    def __post_init__(self):
        if not (self.theta > 0 and self.scale > 0):
            raise ConfigError("theta and scale must be positive")
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ConfigError("part centre must be finite")


@dataclass(frozen=True)
class PartSet:
    parts: tuple[SoftMaskParams, ...]

    def __len__(self):
        return len(self.parts)

    def __iter__(self):
        return iter(self.parts)

    def boxes(self) -> list[dict]:
        return [{"part": i, "a": p.a, "b": p.b, "theta": p.theta} for i, p in enumerate(self.parts)]


def _ramp(coord: np.ndarray, centre: float, theta: float, s: float) -> np.ndarray:
    return expit(s * (coord - (centre - theta))) - expit(s * (coord - (centre + theta)))


def _ramp_dcentre(coord: np.ndarray, centre: float, theta: float, s: float) -> np.ndarray:
    lo = expit(s * (coord - (centre - theta)))
    hi = expit(s * (coord - (centre + theta)))
    return -s * lo * (1 - lo) + s * hi * (1 - hi)


def soft_mask_array(p: SoftMaskParams, h: int, w: int) -> np.ndarray:
    """(h, w) mask: logistic-edged rectangle [a-theta, a+theta] x [b-theta, b+theta] on the pixel grid."""
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    return np.outer(_ramp(ys, p.b, p.theta, p.scale), _ramp(xs, p.a, p.theta, p.scale))


def soft_mask(p: SoftMaskParams, h: int, w: int) -> FeatureTensor:
    return FeatureTensor(("height", "width"), soft_mask_array(p, h, w))


def soft_mask_grad(p: SoftMaskParams, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (dM/da, dM/db) on the pixel grid."""
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    ry, rx = _ramp(ys, p.b, p.theta, p.scale), _ramp(xs, p.a, p.theta, p.scale)
    return (np.outer(ry, _ramp_dcentre(xs, p.a, p.theta, p.scale)),
            np.outer(_ramp_dcentre(ys, p.b, p.theta, p.scale), rx))


@dataclass
class CropCache:
    masked: np.ndarray  # zero-padded masked volume
    pad: int
    y0: int
    x0: int
    fy: float
    fx: float
    size: int


def _shifted(v: np.ndarray, y0: int, x0: int, s: int) -> np.ndarray:
    return v[..., y0:y0 + s, x0:x0 + s]


def crop_array(vol: np.ndarray, p: SoftMaskParams, size: int, mask: np.ndarray | None = None):
    """Mask a (K, H, W) volume and resample the size x size window whose top-left sample is (b, a) - size/2.

    Samples sit on ``a - size/2 + j`` (columns) and ``b - size/2 + i`` (rows); an
    integer centre hits the lattice exactly. Returns the patch and a cache.
    """
    if size < 1:
        raise ShapeError("crop size must be >= 1")
    k, h, w = vol.shape
    if mask is None:
        mask = soft_mask_array(p, h, w)
    pad = size + 2
    masked = np.pad(vol * mask, ((0, 0), (pad, pad), (pad, pad)))
    top, left = p.b - size / 2.0, p.a - size / 2.0
    y0, x0 = int(math.floor(top)), int(math.floor(left))
    fy, fx = top - y0, left - x0
    yi, xi = y0 + pad, x0 + pad
    if yi < 0 or xi < 0 or yi + size + 1 > h + 2 * pad or xi + size + 1 > w + 2 * pad:
        raise ShapeError(f"crop window at ({p.b}, {p.a}) falls outside the padded volume")
    patch = (1 - fy) * (1 - fx) * _shifted(masked, yi, xi, size)
    if fx:
        patch = patch + (1 - fy) * fx * _shifted(masked, yi, xi + 1, size)
    if fy:
        patch = patch + fy * (1 - fx) * _shifted(masked, yi + 1, xi, size)
    if fx and fy:
        patch = patch + fy * fx * _shifted(masked, yi + 1, xi + 1, size)
    return patch, CropCache(masked, pad, yi, xi, fy, fx, size)


def mask_crop(vol: SpectrumVolume, p: SoftMaskParams, out_size: int | None = None) -> FeatureTensor:
    size = int(round(2 * p.theta)) if out_size is None else out_size
    patch, _ = crop_array(vol.array.astype(np.float64), p, size)
    return FeatureTensor(("bin", "height", "width"), patch)


def crop_coordinate_grad(vol: np.ndarray, p: SoftMaskParams, size: int, g_patch: np.ndarray) -> tuple[float, float]:
    """Exact chain-rule (dL/da, dL/db) through mask and bilinear resampling, given dL/dpatch.

    At lattice-aligned centres the one-sided (right) derivative of the interpolant is used.
    """
    k, h, w = vol.shape
    dma, dmb = soft_mask_grad(p, h, w)
    patch_a, _ = crop_array(vol, p, size, mask=dma)
    patch_b, _ = crop_array(vol, p, size, mask=dmb)
    _, c = crop_array(vol, p, size)
    m, s = c.masked, size
    r00 = _shifted(m, c.y0, c.x0, s)
    r01 = _shifted(m, c.y0, c.x0 + 1, s)
    r10 = _shifted(m, c.y0 + 1, c.x0, s)
    r11 = _shifted(m, c.y0 + 1, c.x0 + 1, s)
    d_dx = (1 - c.fy) * (r01 - r00) + c.fy * (r11 - r10)
    d_dy = (1 - c.fx) * (r10 - r00) + c.fx * (r11 - r01)
    da = float(np.sum(g_patch * (patch_a + d_dx)))
    db = float(np.sum(g_patch * (patch_b + d_dy)))
    return da, db


def _sq_sum(x: np.ndarray) -> float:
    # exactly rounded, so the value does not depend on element order
    return math.fsum(np.square(x, dtype=np.float64).ravel().tolist())


def apm_coordinate_gradient(grad: np.ndarray, p: SoftMaskParams, normalize: bool = False) -> tuple[float, float]:
    """Left/right gradient-energy rule for moving a part centre.

    ``grad`` is a (K, H, W) upstream gradient laid out on the same pixel grid as
    ``p``. Pixels inside the part window are split at the centre column into a
    left and a right segment (and at the centre row into upper and lower ones).
    Returns the displacement ``(da, db) = (|R|^2 - |L|^2, |D|^2 - |U|^2)``: the
    centre moves toward the segment carrying more gradient energy, so the value
    fed to a descent optimiser as dL/da is ``-da``. With ``normalize`` the
    differences are divided by the total energy of both segments.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim == 2:
        grad = grad[None]
    _, h, w = grad.shape
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    rows = np.abs(ys - p.b) <= p.theta
    cols = np.abs(xs - p.a) <= p.theta
    win = grad[:, rows][:, :, cols]
    wy, wx = ys[rows], xs[cols]
    left, right = _sq_sum(win[:, :, wx < p.a]), _sq_sum(win[:, :, wx > p.a])
    up, down = _sq_sum(win[:, wy < p.b, :]), _sq_sum(win[:, wy > p.b, :])
    da, db = right - left, down - up
    if normalize:
        da = da / (right + left) if right + left > 0 else 0.0
        db = db / (down + up) if down + up > 0 else 0.0
    return da, db


def patch_frame(size: int) -> SoftMaskParams:
    """Params describing a size x size patch in its own coordinates (centre between the two middle pixels)."""
    c = (size - 1) / 2.0
    return SoftMaskParams(c, c, theta=size / 2.0)


def theta_margin(theta: float, h: int, w: int) -> float:
    return min(theta, (min(h, w) - 2) / 2.0)


def apm_features(mag: np.ndarray, taps: list[np.ndarray], grid: int = 8) -> np.ndarray:
    """Pooled inputs of the regressor: the band-energy (bins >= 1) layout of the volume and each tap's
    activation layout, each pooled onto a grid x grid raster and normalised to unit sum.

    ``grid=1`` reduces every summary to a global average (a constant after normalisation).
    """
    maps = [np.square(mag[1:]).sum(axis=0)] + [t.sum(axis=0) for t in taps]
    out = []
    for m in maps:
        h, w = m.shape
        g = min(grid, h, w)
        ey, ex = np.linspace(0, h, g + 1).astype(int), np.linspace(0, w, g + 1).astype(int)
        cells = np.add.reduceat(np.add.reduceat(m, ey[:-1], axis=0), ex[:-1], axis=1)
        total = cells.sum()
        out.append((cells / total if total > 0 else np.full_like(cells, 1.0 / cells.size)).ravel())
    return np.concatenate(out)


def initial_layout(n_parts: int) -> np.ndarray:
    """Spread of initial part centres in the unit square, frame centre first."""
    pts = [(0.5, 0.5)]
    ring = [(0.2, 0.2), (0.2, 0.8), (0.8, 0.2), (0.8, 0.8), (0.5, 0.15), (0.5, 0.85), (0.15, 0.5), (0.85, 0.5)]
    pts += ring
    golden = 0.6180339887498949
    while len(pts) < n_parts:
        j = len(pts)
        pts.append((0.1 + 0.8 * ((j * golden) % 1.0), 0.1 + 0.8 * ((j * golden * golden) % 1.0)))
    return np.array(pts[:n_parts])


@dataclass
class ApmRegressor:
    """Linear map from pooled features to 2P logits, squashed into the admissible centre range."""

    weight: np.ndarray  # (2P, F); row 2p -> a_p, row 2p+1 -> b_p
    bias: np.ndarray  # (2P,)
    height: int
    width: int
    theta: float = DEFAULT_THETA
    scale: float = DEFAULT_SCALE
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, n_parts: int, n_features: int, height: int, width: int, theta: float = DEFAULT_THETA,
               scale: float = DEFAULT_SCALE, spread: bool = True) -> "ApmRegressor":
        """Zero weights; biases either zero (all parts at the frame centre) or spread over the frame."""
        bias = np.zeros(2 * n_parts)
        if spread and n_parts > 1:
            lay = initial_layout(n_parts)
            bias[0::2] = np.log(lay[:, 1] / (1 - lay[:, 1]))
            bias[1::2] = np.log(lay[:, 0] / (1 - lay[:, 0]))
        return cls(np.zeros((2 * n_parts, n_features)), bias, height, width, theta, scale)

    @property
    def n_parts(self) -> int:
        return self.bias.shape[0] // 2

    def ranges(self):
        m = theta_margin(self.theta, self.height, self.width)
        return (m, self.width - 1 - m), (m, self.height - 1 - m)

    def forward(self, features: np.ndarray):
        """Return (a, b, squash slopes) arrays of length P."""
        features = np.asarray(features, dtype=np.float64)
        if features.shape != (self.weight.shape[1],):
            raise ShapeError(f"regressor expects {self.weight.shape[1]} features, got {features.shape}")
        u = self.weight @ features + self.bias
        s = expit(u)
        (xlo, xhi), (ylo, yhi) = self.ranges()
        span = np.empty_like(u)
        span[0::2], span[1::2] = xhi - xlo, yhi - ylo
        lo = np.empty_like(u)
        lo[0::2], lo[1::2] = xlo, ylo
        coords = lo + span * s
        slope = span * s * (1 - s)
        return coords[0::2], coords[1::2], slope

    def parts(self, features) -> PartSet:
        a, b, _ = self.forward(features)
        return PartSet(tuple(SoftMaskParams(float(x), float(y), self.theta, self.scale) for x, y in zip(a, b)))


def regress_parts(reg: ApmRegressor, vol: SpectrumVolume, pooled_feats) -> PartSet:
    """Part centres for one clip; ``pooled_feats`` are the pooled tap summaries (see apm_features)."""
    if vol.array.shape[1:] != (reg.height, reg.width):
        raise ShapeError(f"volume {vol.array.shape[1:]} does not match regressor frame {(reg.height, reg.width)}")
    feats = np.concatenate([np.ravel(f) for f in pooled_feats]) if len(pooled_feats) else np.zeros(0)
    return reg.parts(feats)


def with_centre(p: SoftMaskParams, a: float, b: float) -> SoftMaskParams:
    return replace(p, a=a, b=b)
