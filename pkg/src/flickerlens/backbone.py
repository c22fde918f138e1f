"""Frozen feature stacks standing in for the pretrained 2D and 3D backbones.

Both stacks are a sequence of stages ``relu(W @ avgpool(x) + b)`` with fixed
random weights. The 2D stack reads a frequency volume (bins as channels); the
3D stack reads the raw clip and keeps a time axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

PROFILES = {
    # channels per stage, spatial pooling per stage; stage 0 of the 3D stack also halves time
    "toy": dict(channels=(8, 16, 16, 32, 32), pools=(2, 2, 2, 2, 1)),
    # terminal context shape 1024 x 16 x 14 x 14 for a 224 x 224 x 32 clip (shape checks only)
    "paper-shape": dict(channels=(64, 256, 512, 1024, 1024), pools=(4, 2, 2, 1, 1)),
}


def avg_pool(x: np.ndarray, p: int) -> np.ndarray:
    """Non-overlapping p x p mean over the last two axes."""
    if p == 1:
        return x
    h, w = x.shape[-2:]
    if h % p or w % p:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by pool {p}")
    return x.reshape(x.shape[:-2] + (h // p, p, w // p, p)).mean(axis=(-3, -1))


def avg_pool_backward(g: np.ndarray, p: int) -> np.ndarray:
    if p == 1:
        return g
    return np.repeat(np.repeat(g, p, axis=-2), p, axis=-1) / (p * p)


def channel_mix(w: np.ndarray, x: np.ndarray, b=None) -> np.ndarray:
    """1x1 convolution: mixes axis 0 of ``x`` with the (C_out, C_in) matrix ``w``."""
    out = np.tensordot(w, x, axes=(1, 0))
    if b is not None:
        out = out + b.reshape((-1,) + (1,) * (x.ndim - 1))
    return out


@dataclass
class Stage:
    weight: np.ndarray  # (C_out, C_in)
    bias: np.ndarray  # (C_out,)
    pool: int
    time_pool: int = 1

    def forward(self, x: np.ndarray):
        pooled = avg_pool(x, self.pool)
        if self.time_pool > 1:
            t = pooled.shape[1]
            if t % self.time_pool:
                raise ShapeError(f"time extent {t} not divisible by {self.time_pool}")
            pooled = pooled.reshape((pooled.shape[0], t // self.time_pool, self.time_pool) + pooled.shape[2:]).mean(axis=2)
        pre = channel_mix(self.weight, pooled, self.bias)
        return np.maximum(pre, 0.0), pre

    def backward(self, g_out: np.ndarray, pre: np.ndarray) -> np.ndarray:
        g_pre = np.where(pre > 0, g_out, 0.0)
        g = np.tensordot(self.weight, g_pre, axes=(0, 0))
        if self.time_pool > 1:
            g = np.repeat(g, self.time_pool, axis=1) / self.time_pool
        return avg_pool_backward(g, self.pool)

    def snapshot(self):
        return self.weight.copy(), self.bias.copy()


def _he(rng, c_out, c_in):
    return rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_out, c_in))


class FrequencyStack:
    """Frozen 2D stack over (K, H, W) frequency volumes; stage outputs are the taps z_(0..L)."""

    def __init__(self, n_bins: int, profile: str = "toy", seed: int = 0, channels=None, pools=None):
        if profile not in PROFILES:
            raise ConfigError(f"unknown backbone profile {profile!r}")
        spec = PROFILES[profile]
        channels = tuple(channels or spec["channels"])
        pools = tuple(pools or spec["pools"])
        if len(channels) != len(pools):
            raise ConfigError("channels and pools need one entry per stage")
        rng = np.random.default_rng(seed)
        self.n_bins = n_bins
        self.channels = channels
        self.pools = pools
        self.stages = []
        c_in = n_bins
        for i, (c, p) in enumerate(zip(channels, pools)):
            if i == 0:
                # non-negative energy detectors; thresholds set by calibrate()
                w = np.abs(rng.normal(0.0, 1.0, size=(c, c_in))) / c_in
            else:
                w = _he(rng, c, c_in)
            self.stages.append(Stage(w, np.zeros(c), p))
            c_in = c

    def calibrate(self, volumes, quantile: float = 0.95, level: float = 0.999) -> None:
        """Data-dependent setup of the frozen stack, done once before training.

        The first-stage thresholds go to the given quantile of each channel's response,
        then every stage is rescaled so the ``level`` quantile of each channel's output is 1.
        """
        xs = [np.asarray(v, dtype=np.float64) for v in volumes]
        for i, st in enumerate(self.stages):
            pre = np.concatenate([channel_mix(st.weight, avg_pool(x, st.pool)).reshape(st.weight.shape[0], -1)
                                  for x in xs], axis=1)
            if i == 0:
                st.bias = -np.quantile(pre, quantile, axis=1)
            act = np.maximum(pre + st.bias[:, None], 0.0)
            top = np.quantile(act, level, axis=1)
            top = np.where(top > 0, top, act.max(axis=1))
            scale = np.where(top > 0, 1.0 / np.where(top > 0, top, 1.0), 1.0)
            st.weight = st.weight * scale[:, None]
            st.bias = st.bias * scale
            xs = [st.forward(x)[0] for x in xs]

    def forward(self, vol: np.ndarray):
        """Return the list of stage outputs and the cache needed by backward."""
        if vol.shape[0] != self.n_bins:
            raise ShapeError(f"volume has {vol.shape[0]} bins, stack expects {self.n_bins}")
        taps, pres = [], []
        x = vol
        for st in self.stages:
            x, pre = st.forward(x)
            taps.append(x)
            pres.append(pre)
        return taps, pres

    def backward(self, tap_grads, pres) -> np.ndarray:
        """Gradient w.r.t. the input volume given gradients on every tap (None = zero)."""
        g = None
        for i in reversed(range(len(self.stages))):
            gi = tap_grads[i]
            if gi is not None:
                g = gi if g is None else g + gi
            if g is None:
                continue
            g = self.stages[i].backward(g, pres[i])
        return g

    def tap_shapes(self, h: int, w: int):
        shapes = []
        for c, p in zip(self.channels, self.pools):
            h, w = h // p, w // p
            shapes.append((c, h, w))
        return shapes


class ContextStack:
    """Frozen spatio-temporal stack: stage 0 reads the raw clip, later stages read blended features.

    ``stage(i, x)`` maps a (C, T, H, W) input to the next (C', T', H', W') feature.
    """

    def __init__(self, profile: str = "toy", seed: int = 1, channels=None, pools=None, time_pool: int = 2):
        if profile not in PROFILES:
            raise ConfigError(f"unknown backbone profile {profile!r}")
        spec = PROFILES[profile]
        channels = tuple(channels or spec["channels"])
        pools = tuple(pools or spec["pools"])
        rng = np.random.default_rng(seed)
        self.channels = channels
        self.pools = pools
        self.stages = []
        c_in = 1
        for i, (c, p) in enumerate(zip(channels, pools)):
            if i == 0:
                w = rng.normal(0.0, 1.0, size=(c, 1))
                b = -w[:, 0] * 0.5 + rng.normal(0.0, 0.05, size=c)
                self.stages.append(Stage(w, b, p, time_pool))
            else:
                self.stages.append(Stage(_he(rng, c, c_in), rng.normal(0.0, 0.01, size=c), p))
            c_in = c

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def stage(self, i: int, x: np.ndarray):
        return self.stages[i].forward(x)

    def stage_backward(self, i: int, g: np.ndarray, pre: np.ndarray) -> np.ndarray:
        return self.stages[i].backward(g, pre)

    def context_only(self, clip: np.ndarray) -> list[np.ndarray]:
        """Unblended outputs Z_(0..L) for a (T, H, W) clip."""
        x, _ = self.stage(0, clip[None])
        outs = [x]
        for i in range(1, self.n_stages):
            x, _ = self.stage(i, x)
            outs.append(x)
        return outs

    def shapes(self, t: int, h: int, w: int):
        shapes = []
        for i, (c, p) in enumerate(zip(self.channels, self.pools)):
            if i == 0:
                t = t // self.stages[0].time_pool
            h, w = h // p, w // p
            shapes.append((c, t, h, w))
        return shapes

    def parameters(self):
        return [s.snapshot() for s in self.stages]
