"""Named-axis dense tensors, the few numeric kernels built on them, and the FLT1 file format.

Values are stored as float32; reductions and products accumulate in float64.
Interpolation uses the align-corners convention throughout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, FormatError, ShapeError

FLT1_MAGIC = b"FLT1"


@dataclass(frozen=True)
class FeatureTensor:
    """Immutable float32 array whose axes carry names, e.g. ``("bin", "height", "width")``."""

    dims: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(self.dims)
        if len(set(dims)) != len(dims):
            raise ShapeError(f"axis names must be unique, got {dims}")
        data = np.asarray(self.data, dtype=np.float32, order="C")
        if data.ndim != len(dims):
            raise ShapeError(f"{len(dims)} axis names for a rank-{data.ndim} array")
        if not np.all(np.isfinite(data)):
            raise DomainError("tensor contains non-finite values")
        if data is self.data:
            data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array, dims: Sequence[str]) -> "FeatureTensor":
        return cls(tuple(dims), np.asarray(array))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def axis(self, name: str) -> int:
        try:
            return self.dims.index(name)
        except ValueError:
            raise ShapeError(f"no axis named {name!r} in {self.dims}") from None

    def extent(self, name: str) -> int:
        return self.data.shape[self.axis(name)]

    def __eq__(self, other):
        if not isinstance(other, FeatureTensor):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.dims, self.data.tobytes()))

    def __add__(self, other: "FeatureTensor") -> "FeatureTensor":
        return _elementwise(self, other, np.add)

    def __sub__(self, other: "FeatureTensor") -> "FeatureTensor":
        return _elementwise(self, other, np.subtract)

    def __mul__(self, other):
        if isinstance(other, FeatureTensor):
            return _elementwise(self, other, np.multiply)
        return FeatureTensor(self.dims, self.data.astype(np.float64) * float(other))

    __rmul__ = __mul__


def _elementwise(a: FeatureTensor, b: FeatureTensor, op) -> FeatureTensor:
    if a.dims != b.dims or a.shape != b.shape:
        raise ShapeError(f"elementwise op on {a.dims}{a.shape} and {b.dims}{b.shape}")
    return FeatureTensor(a.dims, op(a.data.astype(np.float64), b.data))


def matmul(a: FeatureTensor, b: FeatureTensor) -> FeatureTensor:
    """Matrix product of two rank-2 tensors; result axes are (a rows, b columns)."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul needs rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    rows, cols = a.dims[0], b.dims[1]
    if rows == cols:
        cols = cols + "_2"
    out = a.data.astype(np.float64) @ b.data.astype(np.float64)
    return FeatureTensor((rows, cols), out)


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) align-corners linear interpolation weights."""
    if n_in < 1 or n_out < 1:
        raise ShapeError("interpolation extents must be >= 1")
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_weights(y: float, x: float, h: int, w: int):
    """Four (row, col, weight) taps for a bilinear query; lattice points yield a single unit tap."""
    if not (0.0 <= y <= h - 1) or not (0.0 <= x <= w - 1):
        raise DomainError(f"query ({y}, {x}) outside [0,{h - 1}]x[0,{w - 1}]")
    y0 = min(int(np.floor(y)), max(h - 2, 0))
    x0 = min(int(np.floor(x)), max(w - 2, 0))
    fy, fx = y - y0, x - x0
    taps = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            wgt = wy * wx
            if wgt != 0.0:
                taps.append((y0 + dy, x0 + dx, wgt))
    return taps


def bilinear_sample_array(grid: np.ndarray, y: float, x: float) -> np.ndarray:
    """Bilinear sample of the trailing two axes of ``grid``."""
    h, w = grid.shape[-2:]
    out = np.zeros(grid.shape[:-2], dtype=np.float64)
    for r, c, wgt in bilinear_weights(y, x, h, w):
        out = out + wgt * grid[..., r, c].astype(np.float64)
    return out


def bilinear_sample(t: FeatureTensor, y: float, x: float) -> np.ndarray:
    """Per-channel bilinear interpolation of a C x H x W tensor at (y, x)."""
    if t.data.ndim != 3:
        raise ShapeError("bilinear_sample expects a C x H x W tensor")
    return bilinear_sample_array(t.data, y, x)


def resize_array(a: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Align-corners bilinear resize of the last two axes (float64 result)."""
    if h_out < 1 or w_out < 1:
        raise ShapeError("target extents must be >= 1")
    h, w = a.shape[-2:]
    if (h, w) == (h_out, w_out):
        return a.astype(np.float64)
    rh = interp_matrix(h, h_out)
    rw = interp_matrix(w, w_out)
    return rh @ a.astype(np.float64) @ rw.T


def resize_bilinear(t: FeatureTensor, h_out: int, w_out: int) -> FeatureTensor:
    if t.data.ndim < 2:
        raise ShapeError("resize needs at least two spatial axes")
    if (h_out, w_out) == t.shape[-2:]:
        return t
    return FeatureTensor(t.dims, resize_array(t.data, h_out, w_out))


def reduce_mean(t: FeatureTensor, axis: str) -> FeatureTensor:
    ax = t.axis(axis)
    out = t.data.astype(np.float64).mean(axis=ax)
    return FeatureTensor(t.dims[:ax] + t.dims[ax + 1:], out)


# FLT1 persistence: b"FLT1", u8 rank, per axis (u8 name length, name, u32 LE extent), f32 LE payload.

def encode_flt1(t: FeatureTensor) -> bytes:
    parts = [FLT1_MAGIC, struct.pack("<B", len(t.dims))]
    for name, n in zip(t.dims, t.shape):
        raw = name.encode("utf-8")
        if len(raw) > 255:
            raise FormatError(f"axis name too long: {name!r}")
        parts.append(struct.pack("<B", len(raw)) + raw + struct.pack("<I", n))
    parts.append(t.data.astype("<f4").tobytes())
    return b"".join(parts)


def decode_flt1(buf: bytes) -> FeatureTensor:
    if buf[:4] != FLT1_MAGIC:
        raise FormatError("missing FLT1 magic")
    try:
        pos = 4
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims, shape = [], []
        for _ in range(rank):
            (nlen,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims.append(buf[pos:pos + nlen].decode("utf-8"))
            pos += nlen
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape.append(n)
    except struct.error as exc:
        raise FormatError(f"truncated FLT1 header: {exc}") from None
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - pos != 4 * count:
        raise FormatError(f"FLT1 payload holds {len(buf) - pos} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
    return FeatureTensor(tuple(dims), data.astype(np.float32))


def write_flt1(path, t: FeatureTensor) -> None:
    Path(path).write_bytes(encode_flt1(t))


def read_flt1(path) -> FeatureTensor:
    return decode_flt1(Path(path).read_bytes())
