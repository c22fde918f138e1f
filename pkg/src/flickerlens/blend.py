"""Feature blender: 1x1 mixing of global and part frequency features, added into the frozen context stack."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import channel_mix
from .errors import ConfigError, ShapeError
from .tensor_core import FeatureTensor, interp_matrix

MODES = ("conv1x1", "conv1x1x2", "add", "concat", "none")


@dataclass
class OneByOneMix:
    weight: np.ndarray  # (C_out, C_in)
    bias: np.ndarray

    @classmethod
    def create(cls, c_in, c_out, rng=None, zero=False, identity=False):
        if identity:
            return cls(np.eye(c_out, c_in), np.zeros(c_out))
        if zero or rng is None:
            return cls(np.zeros((c_out, c_in)), np.zeros(c_out))
        return cls(rng.normal(0.0, np.sqrt(1.0 / c_in), size=(c_out, c_in)), np.zeros(c_out))

    def __call__(self, x):
        if x.shape[0] != self.weight.shape[1]:
            raise ShapeError(f"mix expects {self.weight.shape[1]} channels, got {x.shape[0]}")
        return channel_mix(self.weight, x, self.bias)

    def backward(self, g, x):
        """Return (dL/dx, dL/dW, dL/db)."""
        axes = tuple(range(1, x.ndim))
        gw = np.tensordot(g, x, axes=(axes, axes))
        gb = g.sum(axis=axes)
        return np.tensordot(self.weight, g, axes=(0, 0)), gw, gb


@dataclass
class BottleneckMix:
    """C -> C/2 -> ReLU -> C, second layer zero at creation so the output starts identically zero."""

    first: OneByOneMix
    second: OneByOneMix

    @classmethod
    def create(cls, channels: int, rng):
        half = max(channels // 2, 1)
        return cls(OneByOneMix.create(channels, half, rng), OneByOneMix.create(half, channels, zero=True))

    def forward(self, x):
        pre = self.first(x)
        hid = np.maximum(pre, 0.0)
        return self.second(hid), (x, pre, hid)

    def backward(self, g, cache):
        x, pre, hid = cache
        g_hid, gw2, gb2 = self.second.backward(g, hid)
        g_x, gw1, gb1 = self.first.backward(np.where(pre > 0, g_hid, 0.0), x)
        return g_x, {"first.weight": gw1, "first.bias": gb1, "second.weight": gw2, "second.bias": gb2}


def resize_pair(h_in, w_in, h_out, w_out):
    return interp_matrix(h_in, h_out), interp_matrix(w_in, w_out)


def _resize(x, mats):
    rh, rw = mats
    return rh @ x @ rw.T


def _resize_backward(g, mats):
    rh, rw = mats
    return rh.T @ g @ rw


class BlendTap:
    """Mixer for one tap i: z~ = F(sum_p Mix_p(resize(z^p)) + Mix_0(z^0)) in the default mode."""

    def __init__(self, channels: int, n_parts: int, mode: str = "conv1x1", rng=None):
        if mode not in MODES:
            raise ConfigError(f"unknown blend mode {mode!r}; choose from {MODES}")
        rng = rng or np.random.default_rng(0)
        self.mode, self.channels, self.n_parts = mode, channels, n_parts
        self.mix0 = self.mixp = self.bottleneck = self.proj = None
        if mode in ("conv1x1", "conv1x1x2"):
            self.mix0 = [OneByOneMix.create(channels, channels, rng)]
            self.mixp = [[OneByOneMix.create(channels, channels, rng)] for _ in range(n_parts)]
            if mode == "conv1x1x2":
                self.mix0.append(OneByOneMix.create(channels, channels, rng))
                for m in self.mixp:
                    m.append(OneByOneMix.create(channels, channels, rng))
            self.bottleneck = BottleneckMix.create(channels, rng)
        elif mode == "concat":
            self.proj = OneByOneMix(rng.normal(0.0, 0.01, size=(channels, channels * (n_parts + 1))), np.zeros(channels))

    # parameter access as name -> (owner, attribute) so the optimiser can update in place
    def named_mixes(self):
        out = {}
        if self.mix0:
            for j, m in enumerate(self.mix0):
                out[f"mix0.{j}"] = m
            for p, chain in enumerate(self.mixp):
                for j, m in enumerate(chain):
                    out[f"mix{p + 1}.{j}"] = m
            out["f.first"] = self.bottleneck.first
            out["f.second"] = self.bottleneck.second
        if self.proj is not None:
            out["concat"] = self.proj
        return out

    def parameters(self):
        params = {}
        for name, m in self.named_mixes().items():
            params[name + ".weight"] = m.weight
            params[name + ".bias"] = m.bias
        return params

    @staticmethod
    def _chain(chain, x):
        acts = [x]
        for j, m in enumerate(chain):
            x = m(x)
            if j < len(chain) - 1:
                x = np.maximum(x, 0.0)
            acts.append(x)
        return x, acts

    @staticmethod
    def _chain_backward(chain, g, acts, prefix, grads):
        for j in reversed(range(len(chain))):
            if j < len(chain) - 1:
                g = np.where(acts[j + 1] > 0, g, 0.0)
            g, gw, gb = chain[j].backward(g, acts[j])
            grads[f"{prefix}.{j}.weight"] = gw
            grads[f"{prefix}.{j}.bias"] = gb
        return g

    def forward(self, z0: np.ndarray, zps: list[np.ndarray]):
        """Return (z~ or None, cache). Part features are resized to z0's spatial extent first."""
        c, h, w = z0.shape
        if c != self.channels:
            raise ShapeError(f"tap expects {self.channels} channels, got {c}")
        if self.mode != "none" and self.mode != "add" and len(zps) != self.n_parts:
            raise ShapeError(f"expected {self.n_parts} part features, got {len(zps)}")
        mats = [resize_pair(zp.shape[1], zp.shape[2], h, w) for zp in zps]
        rzp = [_resize(zp, m) if zp.shape[1:] != (h, w) else zp for zp, m in zip(zps, mats)]
        cache = {"mats": mats, "rzp": rzp, "z0": z0}
        if self.mode == "none":
            return None, cache
        if self.mode == "add":
            return z0 + sum(rzp, np.zeros_like(z0)), cache
        if self.mode == "concat":
            cat = np.concatenate([z0] + rzp, axis=0)
            cache["cat"] = cat
            return self.proj(cat), cache
        s, acts0 = self._chain(self.mix0, z0)
        actsp = []
        for chain, x in zip(self.mixp, rzp):
            y, acts = self._chain(chain, x)
            s = s + y
            actsp.append(acts)
        out, cb = self.bottleneck.forward(s)
        cache.update(acts0=acts0, actsp=actsp, bottleneck=cb)
        return out, cache

    def backward(self, g: np.ndarray, cache):
        """Return (parameter grads, list of dL/dz^p at the parts' own resolution)."""
        grads = {}
        if self.mode == "none" or g is None:
            return grads, [None] * len(cache["rzp"])
        if self.mode == "add":
            g_r = [g] * len(cache["rzp"])
        elif self.mode == "concat":
            g_cat, gw, gb = self.proj.backward(g, cache["cat"])
            grads["concat.weight"], grads["concat.bias"] = gw, gb
            c = self.channels
            g_r = [g_cat[c * (p + 1): c * (p + 2)] for p in range(len(cache["rzp"]))]
        else:
            g_s, bg = self.bottleneck.backward(g, cache["bottleneck"])
            for k, v in bg.items():
                grads["f." + k] = v
            self._chain_backward(self.mix0, g_s, cache["acts0"], "mix0", grads)
            g_r = [self._chain_backward(chain, g_s, acts, f"mix{p + 1}", grads)
                   for p, (chain, acts) in enumerate(zip(self.mixp, cache["actsp"]))]
        g_zp = []
        for gr, mats, rz in zip(g_r, cache["mats"], cache["rzp"]):
            same = mats[0].shape[0] == mats[0].shape[1] and mats[1].shape[0] == mats[1].shape[1]
            g_zp.append(gr if same else _resize_backward(gr, mats))
        return grads, g_zp


def mix_frequency_features(z0: FeatureTensor, zp_list: list[FeatureTensor], tap: BlendTap) -> FeatureTensor:
    out, _ = tap.forward(z0.data.astype(np.float64), [z.data.astype(np.float64) for z in zp_list])
    if out is None:
        out = np.zeros(z0.shape)
    return FeatureTensor(z0.dims, out)


def residual_blend(z_tilde: FeatureTensor, zplus: FeatureTensor, stage) -> FeatureTensor:
    """stage(Z+ + z~ broadcast over time); ``stage`` maps a (C, T, H, W) array to an array."""
    zt, zp = z_tilde.data.astype(np.float64), zplus.data.astype(np.float64)
    if zp.ndim != 4 or zt.shape != (zp.shape[0],) + zp.shape[2:]:
        raise ShapeError(f"cannot broadcast {zt.shape} over {zp.shape}")
    out = stage(zp + zt[:, None])
    dims = zplus.dims if out.ndim == 4 else tuple(f"d{i}" for i in range(out.ndim))
    return FeatureTensor(dims, out)
