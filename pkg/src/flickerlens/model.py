"""The full detector: frequency stack + APM parts + blended context stack + spatial/temporal encoders + heads.

Only the small modules are trainable (APM regressor, blend mixers, encoders,
projections, heads); both backbone stand-ins stay frozen. Gradients are
computed by hand, layer by layer.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from . import apm as apm_mod
from .backbone import ContextStack, FrequencyStack
from .blend import BlendTap
from .errors import ConfigError, FormatError
from .ingest import Clip
from .preprocess import ResidualConfig, residual_clip
from .spectrum import spectrum_array
from .tensor_core import FeatureTensor, decode_flt1, encode_flt1
from .transformer import ClassifierHead, EncoderLayer, frame_to_grid, interp_position, sincos_1d, sincos_2d_array

GRAD_RULES = ("lr_split", "analytic")


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    length: int = 32
    spectrum_mode: str = "magnitude"
    drop_dc: bool = False
    filter_kind: str = "median"
    kernel: int = 3
    filter_before_gray: bool = False
    parts: int = 5
    theta: Optional[float] = None  # None: min(44, min(H, W) / 4)
    scale: float = 10.0
    grad_rule: str = "lr_split"
    apm_grid: int = 8
    apm_normalize: bool = True
    apm_spread: bool = True
    blend_mode: str = "conv1x1"
    profile: str = "toy"
    dim: int = 64
    heads: int = 4
    norm: str = "post"
    calib_quantile: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.grad_rule not in GRAD_RULES:
            raise ConfigError(f"apm.grad_rule must be one of {GRAD_RULES}")
        if self.parts < 0:
            raise ConfigError("apm.parts must be >= 0")
        if self.length < 4 or self.length & (self.length - 1):
            raise ConfigError(f"clip length must be a power of two >= 4, got {self.length}")
        if self.dim % 4 or self.dim % self.heads:
            raise ConfigError(f"token dim {self.dim} must be divisible by 4 and by {self.heads} heads")
        if self.theta is None:
            self.theta = float(min(44.0, min(self.height, self.width) / 4.0))

    @property
    def n_bins(self) -> int:
        k = self.length // 2
        return 2 * k if self.spectrum_mode == "both" else k

    @property
    def patch_size(self) -> int:
        return int(round(2 * self.theta))

    def residual_config(self) -> ResidualConfig:
        return ResidualConfig(self.filter_kind, self.kernel, self.filter_before_gray)


@dataclass
class Sample:
    """Everything about one clip that does not depend on trainable parameters."""

    vol: np.ndarray  # (K, H, W)
    z0_taps: list
    z0_pool: np.ndarray
    apm_feats: np.ndarray
    zplus0: np.ndarray  # frozen first context stage output
    label: int = 0
    source_id: str = ""


def _param(shape, rng=None, std=0.0):
    if rng is None or std == 0.0:
        return np.zeros(shape)
    return rng.normal(0.0, std, size=shape)


class FlickerNet:
    def __init__(self, cfg: ModelConfig = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.freq = FrequencyStack(cfg.n_bins, cfg.profile, seed=cfg.seed + 11)
        self.ctx = ContextStack(cfg.profile, seed=cfg.seed + 23)
        taps = self.freq.tap_shapes(cfg.height, cfg.width)
        c4, h4, w4 = taps[-1]
        t4 = self.ctx.shapes(cfg.length, cfg.height, cfg.width)[-1][1]
        self.grid_hw = (h4, w4)
        n_feat = sum(min(cfg.apm_grid, h, w) ** 2 for h, w in [(cfg.height, cfg.width)] + [t[1:] for t in taps])
        self.apm = apm_mod.ApmRegressor.create(cfg.parts, n_feat, cfg.height, cfg.width, cfg.theta, cfg.scale,
                                                  spread=cfg.apm_spread)
        self.taps = [BlendTap(c, cfg.parts, cfg.blend_mode, rng) for (c, _, _) in taps[:-1]]
        d = cfg.dim
        self.ste = EncoderLayer.create(d, cfg.heads, seed=cfg.seed + 31, norm=cfg.norm)
        self.tte = EncoderLayer.create(d, cfg.heads, seed=cfg.seed + 37, norm=cfg.norm)
        self.head = ClassifierHead.create(d, seed=cfg.seed + 41)
        self.pe_sp = sincos_2d_array(d, h4, w4)
        self.pe_sp_tokens = self.pe_sp.reshape(d, -1).T
        self.pe_tp = sincos_1d(t4 + 1, d)
        std = 1.0 / np.sqrt(c4)
        self.p = {
            "w_sp": _param((c4, d), rng, std), "b_sp": np.zeros(d),
            "w_freq": _param((c4, d), rng, std), "b_freq": np.zeros(d),
            "pos_freq": np.zeros(d),
            "cls_sp": _param(d, rng, 0.02),
            "w_tp": _param((c4, d), rng, std), "b_tp": np.zeros(d),
            "w_tpf": _param((c4, d), rng, std), "b_tpf": np.zeros(d),
            "cls_tp": _param(d, rng, 0.02),
            "phi_g.w": np.zeros(c4), "phi_g.b": np.zeros(1),
            "phi_p.w": np.zeros(c4 * cfg.parts), "phi_p.b": np.zeros(1),
            "phi_sp.w": np.zeros(d), "phi_sp.b": np.zeros(1),
        }
        self.head.b_final = np.zeros(1)
        # frozen standardisation of pooled frequency features, set by calibrate()
        self.pool_mu = np.zeros(c4)
        self.pool_sd = np.ones(c4)
        self.calibrated = False
        self.workers = 1  # spectrum threads; results do not depend on it

    # ------------------------------------------------------------ parameters
    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; the optimiser updates them in place."""
        out = {f"apm.{k}": v for k, v in (("weight", self.apm.weight), ("bias", self.apm.bias))}
        for i, tap in enumerate(self.taps):
            for k, v in tap.parameters().items():
                out[f"blend{i}.{k}"] = v
        for k, v in self.ste.params.items():
            out[f"ste.{k}"] = v
        for k, v in self.tte.params.items():
            out[f"tte.{k}"] = v
        out["head.w_b"], out["head.w_final"], out["head.b_final"] = self.head.w_b, self.head.w_final, self.head.b_final
        out.update(self.p)
        return out

    def frozen_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, st in enumerate(self.freq.stages):
            out[f"freq{i}.weight"], out[f"freq{i}.bias"] = st.weight, st.bias
        for i, st in enumerate(self.ctx.stages):
            out[f"ctx{i}.weight"], out[f"ctx{i}.bias"] = st.weight, st.bias
        out["pool_mu"], out["pool_sd"] = self.pool_mu, self.pool_sd
        return out

    @staticmethod
    def group_of(name: str) -> str:
        if name.startswith("apm."):
            return "apm"
        if name.startswith(("tte.", "head.", "w_tp", "b_tp", "w_tpf", "b_tpf", "cls_tp")):
            return "head"
        return "main"

    # ------------------------------------------------------------ features
    def volume(self, clip: Clip) -> np.ndarray:
        res = residual_clip(clip, self.cfg.residual_config())
        return spectrum_array(res.array, self.cfg.spectrum_mode, self.cfg.drop_dc, self.workers)

    def calibrate(self, volumes) -> None:
        self.freq.calibrate(volumes, self.cfg.calib_quantile)
        pooled = np.stack([self.freq.forward(v)[0][-1].mean(axis=(1, 2)) for v in volumes])
        self.pool_mu[...] = pooled.mean(axis=0)
        sd = pooled.std(axis=0)
        self.pool_sd[...] = np.where(sd > 1e-12, sd, 1.0)
        self.calibrated = True

    def _std(self, z):
        return (z - self.pool_mu) / self.pool_sd

    def prepare(self, clip: Clip, label: int = 0, vol: np.ndarray = None) -> Sample:
        cfg = self.cfg
        if clip.array.shape != (cfg.length, cfg.height, cfg.width):
            raise ConfigError(f"clip shape {clip.array.shape} does not match model "
                              f"{(cfg.length, cfg.height, cfg.width)}")
        if vol is None:
            vol = self.volume(clip)
        taps, _ = self.freq.forward(vol)
        feats = apm_mod.apm_features(np.abs(vol), taps, cfg.apm_grid)
        zplus0, _ = self.ctx.stage(0, clip.array.astype(np.float64)[None])
        return Sample(vol, taps, taps[-1].mean(axis=(1, 2)), feats, zplus0, label, clip.source_id)

    # ------------------------------------------------------------ forward
    def part_params(self, s: Sample):
        a, b, slope = self.apm.forward(s.apm_feats)
        parts = [apm_mod.SoftMaskParams(float(x), float(y), self.cfg.theta, self.cfg.scale) for x, y in zip(a, b)]
        return parts, slope

    def forward(self, s: Sample, blend: bool = True):
        """Return ({"g","p","sp","final"} logits, cache). ``blend=False`` gives the context-only path."""
        cfg, p = self.cfg, self.p
        parts, slope = self.part_params(s)
        size = cfg.patch_size
        patches, zp_taps, zp_pres = [], [], []
        for part in parts:
            patch, _ = apm_mod.crop_array(s.vol, part, size)
            taps, pres = self.freq.forward(patch)
            patches.append(patch)
            zp_taps.append(taps)
            zp_pres.append(pres)
        zplus = s.zplus0
        blend_caches, ctx_pres, zts = [], [], []
        for i, tap in enumerate(self.taps):
            zt, bc = (tap.forward(s.z0_taps[i], [zp[i] for zp in zp_taps]) if blend else (None, None))
            x = zplus if zt is None else zplus + zt[:, None]
            zplus, pre = self.ctx.stage(i + 1, x)
            blend_caches.append(bc)
            ctx_pres.append(pre)
            zts.append(zt)
        z4 = zplus
        c4, t4, h4, w4 = z4.shape
        zsp = z4.mean(axis=1).reshape(c4, h4 * w4).T  # (cells, C)
        ztp = z4.mean(axis=(2, 3)).T  # (T4, C)
        zp_pool = [self._std(zp[-1].mean(axis=(1, 2))) for zp in zp_taps]
        z0n = self._std(s.z0_pool)
        grid_pos = [frame_to_grid(part.a, part.b, (cfg.height, cfg.width), self.grid_hw) for part in parts]
        pos_part = [interp_position(self.pe_sp, gy, gx) for gy, gx in grid_pos]
        cells = zsp @ p["w_sp"] + p["b_sp"] + self.pe_sp_tokens
        rows = [p["cls_sp"][None], cells]
        if parts:
            part_tok = np.stack([zp_pool[j] @ p["w_freq"] + p["b_freq"] + pos_part[j] + p["pos_freq"]
                                 for j in range(len(parts))])
            rows.append(part_tok)
        tok_sp = np.concatenate(rows)
        out_sp, c_sp = self.ste.forward(tok_sp)
        e_s = out_sp[0]
        tok_tp = np.concatenate([p["cls_tp"][None], ztp @ p["w_tp"] + p["b_tp"]]) + self.pe_tp
        tok_tp = tok_tp + (z0n @ p["w_tpf"] + p["b_tpf"])
        out_tp, c_tp = self.tte.forward(tok_tp)
        e_t = out_tp[0]
        zp_cat = np.concatenate(zp_pool) if parts else np.zeros(0)
        logits = {
            "g": float(z0n @ p["phi_g.w"] + p["phi_g.b"][0]),
            "p": float(zp_cat @ p["phi_p.w"] + p["phi_p.b"][0]) if parts else 0.0,
            "sp": float(e_s @ p["phi_sp.w"] + p["phi_sp.b"][0]),
            "final": self.head.forward(e_s, e_t),
        }
        cache = dict(parts=parts, slope=slope, patches=patches, zp_taps=zp_taps, zp_pres=zp_pres,
                     blend_caches=blend_caches, ctx_pres=ctx_pres, z4=z4, zsp=zsp, ztp=ztp, zp_pool=zp_pool, z0n=z0n,
                     zp_cat=zp_cat, grid_pos=grid_pos, c_sp=c_sp, c_tp=c_tp, e_s=e_s, e_t=e_t, blend=blend,
                     sample=s)
        return logits, cache

    def predict(self, s: Sample) -> float:
        logits, _ = self.forward(s)
        return float(expit(logits["final"]))

    # ------------------------------------------------------------ backward
    def backward(self, cache, g_logits: dict) -> dict[str, np.ndarray]:
        """Gradients of sum_k g_logits[k] * logit_k for every trainable parameter.

        The APM regressor gets either the left/right rule or the exact chain rule,
        per ``cfg.grad_rule``.
        """
        cfg, p = self.cfg, self.p
        s: Sample = cache["sample"]
        parts = cache["parts"]
        n_parts = len(parts)
        grads = {k: np.zeros_like(v) for k, v in self.parameters().items()}
        gg, gp, gsp, gf = (float(g_logits.get(k, 0.0)) for k in ("g", "p", "sp", "final"))
        e_s, e_t = cache["e_s"], cache["e_t"]

        grads["phi_g.w"] += gg * cache["z0n"]
        grads["phi_g.b"] += gg
        g_zp_pool = [np.zeros_like(z) for z in cache["zp_pool"]]
        if n_parts:
            grads["phi_p.w"] += gp * cache["zp_cat"]
            grads["phi_p.b"] += gp
            c4 = s.z0_pool.shape[0]
            for j in range(n_parts):
                g_zp_pool[j] += gp * p["phi_p.w"][j * c4:(j + 1) * c4]
        grads["phi_sp.w"] += gsp * e_s
        grads["phi_sp.b"] += gsp
        g_es, g_et, hg = self.head.backward(gf, e_s, e_t)
        grads["head.w_b"] += hg["w_b"]
        grads["head.w_final"] += hg["w_final"]
        grads["head.b_final"] += hg["b_final"]
        g_es = g_es + gsp * p["phi_sp.w"]

        z4 = cache["z4"]
        c4, t4, h4, w4 = z4.shape
        # temporal encoder
        g_out_tp = np.zeros((t4 + 1, cfg.dim))
        g_out_tp[0] = g_et
        tg = {k: grads["tte." + k] for k in self.tte.params}
        g_tok_tp, _ = self.tte.backward(g_out_tp, cache["c_tp"], tg)
        g_sum = g_tok_tp.sum(axis=0)
        grads["w_tpf"] += np.outer(cache["z0n"], g_sum)
        grads["b_tpf"] += g_sum
        grads["cls_tp"] += g_tok_tp[0]
        grads["w_tp"] += cache["ztp"].T @ g_tok_tp[1:]
        grads["b_tp"] += g_tok_tp[1:].sum(axis=0)
        g_ztp = g_tok_tp[1:] @ p["w_tp"].T  # (T4, C)
        g_z4 = np.broadcast_to(g_ztp.T[:, :, None, None] / (h4 * w4), z4.shape).copy()
        # spatial encoder
        n_cells = h4 * w4
        g_out_sp = np.zeros((1 + n_cells + n_parts, cfg.dim))
        g_out_sp[0] = g_es
        sg = {k: grads["ste." + k] for k in self.ste.params}
        g_tok_sp, _ = self.ste.backward(g_out_sp, cache["c_sp"], sg)
        grads["cls_sp"] += g_tok_sp[0]
        g_cells = g_tok_sp[1:1 + n_cells]
        grads["w_sp"] += cache["zsp"].T @ g_cells
        grads["b_sp"] += g_cells.sum(axis=0)
        g_zsp = (g_cells @ p["w_sp"].T).T.reshape(c4, h4, w4)
        g_z4 += g_zsp[:, None] / t4
        g_part_tok = g_tok_sp[1 + n_cells:]
        g_pos = []
        for j in range(n_parts):
            gt = g_part_tok[j]
            grads["w_freq"] += np.outer(cache["zp_pool"][j], gt)
            grads["b_freq"] += gt
            grads["pos_freq"] += gt
            g_zp_pool[j] += p["w_freq"] @ gt
            g_pos.append(gt)

        # blended context stack, last stage first
        zp_tap_grads = [[None] * len(self.freq.stages) for _ in range(n_parts)]
        for j in range(n_parts):
            _, hh, ww = cache["zp_taps"][j][-1].shape
            zp_tap_grads[j][-1] = np.broadcast_to((g_zp_pool[j] / self.pool_sd)[:, None, None] / (hh * ww),
                                                  cache["zp_taps"][j][-1].shape).copy()
        g_z = g_z4
        for i in reversed(range(len(self.taps))):
            g_x = self.ctx.stage_backward(i + 1, g_z, cache["ctx_pres"][i])
            if cache["blend"] and self.taps[i].mode != "none":
                g_zt = g_x.sum(axis=1)
                tg, g_zp = self.taps[i].backward(g_zt, cache["blend_caches"][i])
                for k, v in tg.items():
                    grads[f"blend{i}.{k}"] += v
                for j in range(n_parts):
                    if g_zp[j] is not None:
                        zp_tap_grads[j][i] = g_zp[j]
            g_z = g_x

        # frozen frequency stack on each patch, then the APM regressor
        g_u = np.zeros(2 * n_parts)
        slope = cache["slope"]
        size = cfg.patch_size
        frame = apm_mod.patch_frame(size)
        self._last_patch_grads = []
        for j, part in enumerate(parts):
            g_patch = self.freq.backward(zp_tap_grads[j], cache["zp_pres"][j])
            if g_patch is None:
                g_patch = np.zeros_like(cache["patches"][j])
            self._last_patch_grads.append(g_patch)
            if cfg.grad_rule == "lr_split":
                da, db = apm_mod.apm_coordinate_gradient(g_patch, frame, cfg.apm_normalize)
                ga, gb = -da, -db
            else:
                ga, gb = apm_mod.crop_coordinate_grad(s.vol, part, size, g_patch)
                ga_pos, gb_pos = self._pos_grad(cache["grid_pos"][j], g_pos[j])
                ga, gb = ga + ga_pos, gb + gb_pos
            g_u[2 * j] = ga * slope[2 * j]
            g_u[2 * j + 1] = gb * slope[2 * j + 1]
        grads["apm.weight"] += np.outer(g_u, s.apm_feats)
        grads["apm.bias"] += g_u
        return grads

    def _pos_grad(self, grid_pos, g_tok):
        """d(token . g)/d(a, b) through the bilinear read of the spatial encoding grid."""
        cfg = self.cfg
        gy, gx = grid_pos
        gh, gw = self.grid_hw
        pe = self.pe_sp
        y0 = min(int(np.floor(gy)), max(gh - 2, 0))
        x0 = min(int(np.floor(gx)), max(gw - 2, 0))
        fy, fx = gy - y0, gx - x0
        y1, x1 = min(y0 + 1, gh - 1), min(x0 + 1, gw - 1)
        v00, v01, v10, v11 = (pe[:, y0, x0] @ g_tok, pe[:, y0, x1] @ g_tok, pe[:, y1, x0] @ g_tok, pe[:, y1, x1] @ g_tok)
        d_gx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        d_gy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
        sx = (gw - 1) / (cfg.width - 1) if cfg.width > 1 else 0.0
        sy = (gh - 1) / (cfg.height - 1) if cfg.height > 1 else 0.0
        return d_gx * sx, d_gy * sy

    # ------------------------------------------------------------ persistence
    def to_bytes(self) -> tuple[bytes, dict]:
        arrays = {**{"t." + k: v for k, v in self.parameters().items()},
                  **{"f." + k: v for k, v in self.frozen_parameters().items()}}
        layout, flat, off = [], [], 0
        for name, arr in arrays.items():
            a = np.atleast_1d(np.asarray(arr, dtype=np.float64))
            layout.append({"name": name, "shape": list(np.shape(arr)), "offset": off})
            off += a.size
            flat.append(a.ravel())
        vec = np.concatenate(flat)
        meta = {"format": "flickerlens-model-1", "config": asdict(self.cfg), "layout": layout,
                "calibrated": self.calibrated}
        return encode_flt1(FeatureTensor(("param",), vec)), meta

    def save(self, path) -> None:
        blob, meta = self.to_bytes()
        path = Path(path)
        path.write_bytes(blob)
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "FlickerNet":
        path = Path(path)
        meta_path = Path(str(path) + ".json")
        if not meta_path.exists():
            raise FormatError(f"model metadata {meta_path} not found")
        meta = json.loads(meta_path.read_text())
        if meta.get("format") != "flickerlens-model-1":
            raise FormatError("unrecognised model metadata")
        net = cls(ModelConfig(**meta["config"]))
        vec = decode_flt1(path.read_bytes()).data.astype(np.float64)
        targets = {**{"t." + k: v for k, v in net.parameters().items()},
                   **{"f." + k: v for k, v in net.frozen_parameters().items()}}
        for entry in meta["layout"]:
            tgt = targets.get(entry["name"])
            if tgt is None:
                raise FormatError(f"model file names unknown parameter {entry['name']}")
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            tgt[...] = vec[entry["offset"]:entry["offset"] + n].reshape(tgt.shape)
        net.calibrated = bool(meta.get("calibrated"))
        return net
