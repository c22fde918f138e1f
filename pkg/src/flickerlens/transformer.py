"""Token assembly, sinusoidal position encodings and a single-layer transformer encoder (numpy, with backward)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_core import FeatureTensor, bilinear_weights

LN_EPS = 1e-9  # keeps the unit-variance contract within 1e-5 down to input variance 1e-4


def _freqs(n: int) -> np.ndarray:
    return 1.0 / (10000.0 ** (np.arange(n) / n))


def sincos_1d(n_pos: int, dim: int) -> np.ndarray:
    """(n_pos, dim) encoding with interleaved sin/cos pairs over geometric frequencies."""
    if dim % 2:
        raise ConfigError("1D encoding needs an even dimension")
    ang = np.arange(n_pos)[:, None] * _freqs(dim // 2)[None, :]
    out = np.empty((n_pos, dim))
    out[:, 0::2], out[:, 1::2] = np.sin(ang), np.cos(ang)
    return out


@dataclass(frozen=True)
class PosEncoding2D:
    grid: FeatureTensor  # (channel, height, width)

    @property
    def array(self) -> np.ndarray:
        return self.grid.data.astype(np.float64)

    def tokens(self) -> np.ndarray:
        """Row-major (H*W, D) view of the grid."""
        d, h, w = self.grid.shape
        return self.array.reshape(d, h * w).T


def sincos_2d_array(dim: int, h: int, w: int) -> np.ndarray:
    """(dim, h, w): first half of the channels encodes the row, second half the column."""
    if dim % 4:
        raise ConfigError(f"2D sincos encoding needs dim divisible by 4, got {dim}")
    ey = sincos_1d(h, dim // 2)  # (h, dim/2)
    ex = sincos_1d(w, dim // 2)
    out = np.empty((dim, h, w))
    out[: dim // 2] = ey.T[:, :, None]
    out[dim // 2:] = ex.T[:, None, :]
    return out


def sincos_2d(dim: int, h: int, w: int) -> PosEncoding2D:
    return PosEncoding2D(FeatureTensor(("channel", "height", "width"), sincos_2d_array(dim, h, w)))


def frame_to_grid(a: float, b: float, frame_hw, grid_hw) -> tuple[float, float]:
    """Map pixel centre (a = x, b = y) to (row, col) grid coordinates, corners to corners."""
    (fh, fw), (gh, gw) = frame_hw, grid_hw
    gy = b * (gh - 1) / (fh - 1) if fh > 1 else 0.0
    gx = a * (gw - 1) / (fw - 1) if fw > 1 else 0.0
    return gy, gx


def interp_position(pe: np.ndarray, gy: float, gx: float) -> np.ndarray:
    """Bilinear read of a (D, H, W) encoding grid."""
    out = np.zeros(pe.shape[0])
    for r, c, wgt in bilinear_weights(gy, gx, pe.shape[1], pe.shape[2]):
        out += wgt * pe[:, r, c]
    return out


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (N, D)
    class_index: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError("token sequence must be a non-empty (N, D) matrix")
        if not 0 <= self.class_index < self.tokens.shape[0]:
            raise ShapeError("class index out of range")

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def class_embedding(self) -> np.ndarray:
        return self.tokens[self.class_index]


def assemble_spatial_tokens(zsp, parts, pe: PosEncoding2D, pos_freq, w_sp=None, w_freq=None, cls=None,
                            frame_hw=None) -> TokenSequence:
    """[class, projected spatial cells + grid encoding (row-major), projected parts + interpolated position + pos_freq].

    ``parts`` holds (feature vector, a, b) triples with (a, b) in frame pixels; ``frame_hw``
    defaults to the grid size. Projections default to identity.
    """
    z = zsp.data if isinstance(zsp, FeatureTensor) else np.asarray(zsp)
    z = z.astype(np.float64)
    c, gh, gw = z.shape
    pe_arr = pe.array
    d = pe_arr.shape[0]
    if pe_arr.shape[1:] != (gh, gw):
        raise ShapeError(f"encoding grid {pe_arr.shape[1:]} does not match features {(gh, gw)}")
    w_sp = np.eye(c) if w_sp is None else w_sp
    w_freq = np.eye(c) if w_freq is None else w_freq
    if w_sp.shape[1] != d:
        raise ShapeError(f"spatial projection maps to {w_sp.shape[1]}, encoding is {d}-dim")
    frame_hw = (gh, gw) if frame_hw is None else frame_hw
    rows = [np.zeros(d) if cls is None else np.asarray(cls, dtype=np.float64)]
    cells = z.reshape(c, gh * gw).T @ w_sp + pe.tokens()
    rows.extend(cells)
    for vec, a, b in parts:
        gy, gx = frame_to_grid(a, b, frame_hw, (gh, gw))
        pos = interp_position(pe_arr, gy, gx) + pos_freq
        rows.append(np.asarray(vec, dtype=np.float64) @ w_freq + pos)
    return TokenSequence(np.stack(rows), 0)


def assemble_temporal_tokens(ztp, z0_pooled, pe1d=None, w_tp=None, w_freq=None, cls=None) -> TokenSequence:
    """[class, projected timesteps] + 1D encoding, then the projected global frequency vector added to every token."""
    ztp = np.asarray(ztp, dtype=np.float64)
    t, c = ztp.shape
    w_tp = np.eye(c) if w_tp is None else w_tp
    d = w_tp.shape[1]
    pe1d = sincos_1d(t + 1, d) if pe1d is None else pe1d
    w_freq = np.eye(len(z0_pooled), d) if w_freq is None else w_freq
    head = np.zeros((1, d)) if cls is None else np.asarray(cls, dtype=np.float64)[None]
    tokens = np.concatenate([head, ztp @ w_tp]) + pe1d
    tokens = tokens + np.asarray(z0_pooled, dtype=np.float64) @ w_freq
    return TokenSequence(tokens, 0)


# ---------------------------------------------------------------- layer norm

def layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(g, cache):
    xhat, inv, gamma = cache
    n = xhat.shape[-1]
    g_gamma = (g * xhat).sum(axis=0)
    g_beta = g.sum(axis=0)
    gx = g * gamma
    dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
    return dx, g_gamma, g_beta


def softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- encoder

PARAM_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
               "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


@dataclass
class EncoderLayer:
    """Multi-head self-attention + feed-forward (D -> ff_mult*D -> D), residuals, layer norm."""

    params: dict
    heads: int = 4
    norm: str = "post"

    @classmethod
    def create(cls, dim: int, heads: int = 4, seed: int = 0, norm: str = "post", ff_mult: int = 4,
               init_scale: float = 1.0) -> "EncoderLayer":
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        if norm not in ("post", "pre"):
            raise ConfigError(f"norm must be 'post' or 'pre', got {norm!r}")
        rng = np.random.default_rng(seed)
        std = init_scale / np.sqrt(dim)
        ff = ff_mult * dim
        p = {}
        for name in ("wq", "wk", "wv", "wo"):
            p[name] = rng.normal(0.0, std, size=(dim, dim))
        for name in ("bq", "bk", "bv", "bo", "ln1_b", "ln2_b"):
            p[name] = np.zeros(dim)
        p["ln1_g"], p["ln2_g"] = np.ones(dim), np.ones(dim)
        p["w1"] = rng.normal(0.0, init_scale * np.sqrt(2.0 / dim), size=(dim, ff))
        p["b1"] = np.zeros(ff)
        p["w2"] = rng.normal(0.0, init_scale / np.sqrt(ff), size=(ff, dim))
        p["b2"] = np.zeros(dim)
        return cls(p, heads, norm)

    @property
    def dim(self) -> int:
        return self.params["wq"].shape[0]

    # attention ------------------------------------------------------------
    def _attn(self, x):
        p, h = self.params, self.heads
        n, d = x.shape
        dh = d // h
        q = (x @ p["wq"] + p["bq"]).reshape(n, h, dh).transpose(1, 0, 2)
        k = (x @ p["wk"] + p["bk"]).reshape(n, h, dh).transpose(1, 0, 2)
        v = (x @ p["wv"] + p["bv"]).reshape(n, h, dh).transpose(1, 0, 2)
        a = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh))
        o = (a @ v).transpose(1, 0, 2).reshape(n, d)
        out = o @ p["wo"] + p["bo"]
        return out, (x, q, k, v, a, o)

    def _attn_backward(self, g, cache, grads):
        p, h = self.params, self.heads
        x, q, k, v, a, o = cache
        n, d = x.shape
        dh = d // h
        grads["wo"] += o.T @ g
        grads["bo"] += g.sum(axis=0)
        go = (g @ p["wo"].T).reshape(n, h, dh).transpose(1, 0, 2)
        ga = go @ v.transpose(0, 2, 1)
        gv = a.transpose(0, 2, 1) @ go
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
        gq = gs @ k
        gk = gs.transpose(0, 2, 1) @ q
        gx = np.zeros_like(x)
        for name, gm in (("q", gq), ("k", gk), ("v", gv)):
            flat = gm.transpose(1, 0, 2).reshape(n, d)
            grads["w" + name] += x.T @ flat
            grads["b" + name] += flat.sum(axis=0)
            gx += flat @ p["w" + name].T
        return gx

    def _ffn(self, x):
        p = self.params
        pre = x @ p["w1"] + p["b1"]
        hid = np.maximum(pre, 0.0)
        return hid @ p["w2"] + p["b2"], (x, pre, hid)

    def _ffn_backward(self, g, cache, grads):
        p = self.params
        x, pre, hid = cache
        grads["w2"] += hid.T @ g
        grads["b2"] += g.sum(axis=0)
        gh = (g @ p["w2"].T) * (pre > 0)
        grads["w1"] += x.T @ gh
        grads["b1"] += gh.sum(axis=0)
        return gh @ p["w1"].T

    # layer ---------------------------------------------------------------
    def forward(self, x: np.ndarray):
        """Return (output tokens, cache); cache["attn"] holds the (heads, N, N) weights."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"tokens {x.shape} do not match layer dim {self.dim}")
        p = self.params
        if self.norm == "post":
            att, ca = self._attn(x)
            h1, cl1 = layer_norm(x + att, p["ln1_g"], p["ln1_b"])
            ff, cf = self._ffn(h1)
            out, cl2 = layer_norm(h1 + ff, p["ln2_g"], p["ln2_b"])
        else:
            n1, cl1 = layer_norm(x, p["ln1_g"], p["ln1_b"])
            att, ca = self._attn(n1)
            h1 = x + att
            n2, cl2 = layer_norm(h1, p["ln2_g"], p["ln2_b"])
            ff, cf = self._ffn(n2)
            out = h1 + ff
        return out, {"attn_cache": ca, "ln1": cl1, "ffn": cf, "ln2": cl2, "attn": ca[4]}

    def backward(self, g_out: np.ndarray, cache: dict, grads: dict | None = None):
        """Return (dL/dx, parameter gradients) for upstream ``g_out``; accumulates into ``grads`` if given."""
        if grads is None:
            grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        if self.norm == "post":
            g_res2, gg, gb = layer_norm_backward(g_out, cache["ln2"])
            grads["ln2_g"] += gg
            grads["ln2_b"] += gb
            g_h1 = g_res2 + self._ffn_backward(g_res2, cache["ffn"], grads)
            g_res1, gg, gb = layer_norm_backward(g_h1, cache["ln1"])
            grads["ln1_g"] += gg
            grads["ln1_b"] += gb
            g_x = g_res1 + self._attn_backward(g_res1, cache["attn_cache"], grads)
        else:
            g_n2 = self._ffn_backward(g_out, cache["ffn"], grads)
            g_h1_ln, gg, gb = layer_norm_backward(g_n2, cache["ln2"])
            grads["ln2_g"] += gg
            grads["ln2_b"] += gb
            g_h1 = g_out + g_h1_ln
            g_n1 = self._attn_backward(g_h1, cache["attn_cache"], grads)
            g_x_ln, gg, gb = layer_norm_backward(g_n1, cache["ln1"])
            grads["ln1_g"] += gg
            grads["ln1_b"] += gb
            g_x = g_h1 + g_x_ln
        return g_x, grads


def encoder_forward(layer: EncoderLayer, seq: TokenSequence) -> TokenSequence:
    out, _ = layer.forward(seq.tokens)
    return TokenSequence(out, seq.class_index)


@dataclass
class ClassifierHead:
    """logit = w_final . [w_b^T e_s, e_t] + b_final."""

    w_b: np.ndarray  # (D, D)
    w_final: np.ndarray  # (2D,)
    b_final: float = 0.0
    _last: tuple = field(default=(), repr=False)

    @classmethod
    def create(cls, dim: int, seed: int = 0, zero: bool = False) -> "ClassifierHead":
        rng = np.random.default_rng(seed)
        w_b = np.eye(dim) + (0 if zero else rng.normal(0.0, 0.01, size=(dim, dim)))
        w_final = np.zeros(2 * dim) if zero else rng.normal(0.0, 0.01, size=2 * dim)
        return cls(w_b, w_final, 0.0)

    def forward(self, e_s: np.ndarray, e_t: np.ndarray) -> float:
        feat = np.concatenate([e_s @ self.w_b, e_t])
        return float(feat @ self.w_final + np.sum(self.b_final))

    def backward(self, g_logit: float, e_s: np.ndarray, e_t: np.ndarray):
        """Return (dL/de_s, dL/de_t, {w_b, w_final, b_final} gradients)."""
        d = e_s.shape[0]
        wf_s, wf_t = self.w_final[:d], self.w_final[d:]
        feat = np.concatenate([e_s @ self.w_b, e_t])
        grads = {"w_b": g_logit * np.outer(e_s, wf_s), "w_final": g_logit * feat, "b_final": g_logit}
        return g_logit * (self.w_b @ wf_s), g_logit * wf_t, grads


def classify(head: ClassifierHead, e_s, e_t) -> float:
    return head.forward(np.asarray(e_s, dtype=np.float64), np.asarray(e_t, dtype=np.float64))
