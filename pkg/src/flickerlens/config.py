"""Flat ``key = value`` configuration shared by every subcommand."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from .errors import ConfigError
from .model import ModelConfig
from .train_eval import TrainConfig


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _choice(*options):
    def parse(v: str) -> str:
        if v not in options:
            raise ValueError(f"expected one of {'|'.join(options)}, got {v!r}")
        return v
    return parse


def _opt_float(v: str) -> Optional[float]:
    return None if v.strip().lower() in ("auto", "none") else float(v)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


KEYS: dict[str, Key] = {
    "preprocess.filter": Key(_choice("median", "mean", "none"), "median", "spatial filter removed from each frame"),
    "preprocess.kernel": Key(int, 3, "odd filter window size"),
    "preprocess.filter_before_gray": Key(_bool, False, "filter colour channels before grayscale conversion"),
    "spectrum.mode": Key(_choice("magnitude", "phase", "both"), "magnitude", "spectrum values kept per bin"),
    "spectrum.drop_dc": Key(_bool, False, "use bins 1..T/2 instead of 0..T/2-1"),
    "clip.len": Key(int, 32, "frames per clip (power of two)"),
    "clip.stride": Key(int, 1, "frame sampling stride inside a clip"),
    "clip.hop": Key(int, 32, "offset between consecutive clip starts"),
    "apm.parts": Key(int, 5, "number of proposed parts"),
    "apm.theta": Key(_opt_float, None, "half window; auto = min(44, min(H, W) / 4)"),
    "apm.scale": Key(float, 10.0, "logistic edge sharpness of the soft mask"),
    "apm.grad_rule": Key(_choice("lr_split", "analytic"), "lr_split", "coordinate gradient for the part regressor"),
    "apm.grid": Key(int, 8, "pooling raster of the regressor inputs"),
    "apm.spread": Key(_bool, True, "spread initial part centres over the frame"),
    "apm.normalize": Key(_bool, True, "normalise the left/right energy difference"),
    "apm.calib_quantile": Key(float, 0.99, "first-stage threshold quantile of the frequency stack"),
    "blend.mode": Key(_choice("conv1x1", "add", "concat", "none", "conv1x1x2"), "conv1x1", "feature blender variant"),
    "blend.shape_profile": Key(_choice("toy", "paper-shape"), "toy", "channel/pool profile of the frozen stacks"),
    "xfmr.dim": Key(int, 0, "token width; 0 = profile default"),
    "xfmr.heads": Key(int, 4, "attention heads"),
    "xfmr.profile": Key(_choice("toy", "paper-shape"), "toy", "token width profile (64 or 1024)"),
    "xfmr.norm": Key(_choice("post", "pre"), "post", "layer-norm placement"),
    "train.epochs": Key(int, 0, "epochs; 0 = schedule default (10, or 40 with --paper-schedule)"),
    "train.lambda_warmup": Key(int, -1, "epochs with the final loss switched off; -1 = schedule default"),
    "train.lambda_value": Key(float, 1.0, "final-loss weight after warmup"),
    "train.lr_main": Key(float, 0.01, "learning rate of blend mixers, spatial encoder and auxiliary heads"),
    "train.lr_head": Key(float, 0.01, "learning rate of the temporal encoder and final head"),
    "train.lr_apm": Key(float, 0.005, "learning rate of the part regressor"),
    "train.momentum": Key(float, 0.9, "momentum of the main and regressor groups"),
    "train.momentum_head": Key(float, 0.0, "momentum of the head group"),
    "train.weight_decay": Key(float, 1e-4, "L2 weight decay for every group"),
    "train.batch_size": Key(int, 8, "clips per update"),
    "synth.height": Key(int, 64, "synthetic frame height"),
    "synth.width": Key(int, 64, "synthetic frame width"),
    "synth.length": Key(int, 32, "synthetic frames per clip"),
    "synth.motion": Key(_choice("static", "drift", "breathing"), "drift", "background motion"),
    "synth.noise_sigma": Key(float, 0.01, "Gaussian noise level"),
    "synth.amplitude": Key(float, 0.08, "flicker amplitude"),
    "synth.radius": Key(float, 8.0, "flicker radius in pixels"),
    "seed": Key(int, 0, "master seed (overridden by --seed)"),
}

PROFILE_DIMS = {"toy": 64, "paper-shape": 1024}


def defaults() -> dict[str, Any]:
    return {k: v.default for k, v in KEYS.items()}


def parse_config(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected by name."""
    out = defaults()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
        try:
            out[key] = KEYS[key].parse(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {exc}") from None
    return out


def load_config(path) -> dict[str, Any]:
    if path is None:
        return defaults()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))


def model_config(cfg: dict, height: int, width: int, length: int, seed: int) -> ModelConfig:
    dim = cfg["xfmr.dim"] or PROFILE_DIMS[cfg["xfmr.profile"]]
    return ModelConfig(
        height=height, width=width, length=length,
        spectrum_mode=cfg["spectrum.mode"], drop_dc=cfg["spectrum.drop_dc"],
        filter_kind=cfg["preprocess.filter"], kernel=cfg["preprocess.kernel"],
        filter_before_gray=cfg["preprocess.filter_before_gray"],
        parts=cfg["apm.parts"], theta=cfg["apm.theta"], scale=cfg["apm.scale"], grad_rule=cfg["apm.grad_rule"],
        apm_grid=cfg["apm.grid"], apm_normalize=cfg["apm.normalize"], apm_spread=cfg["apm.spread"],
        calib_quantile=cfg["apm.calib_quantile"],
        blend_mode=cfg["blend.mode"], profile=cfg["blend.shape_profile"],
        dim=dim, heads=cfg["xfmr.heads"], norm=cfg["xfmr.norm"], seed=seed,
    )


def train_config(cfg: dict, seed: int, paper_schedule: bool = False) -> TrainConfig:
    base = TrainConfig() if paper_schedule else TrainConfig.toy()
    epochs = cfg["train.epochs"] or base.epochs
    warm = base.lambda_warmup_epochs if cfg["train.lambda_warmup"] < 0 else cfg["train.lambda_warmup"]
    return TrainConfig(
        epochs=epochs, lambda_warmup_epochs=min(warm, epochs), lambda_value=cfg["train.lambda_value"],
        lr_main=cfg["train.lr_main"], lr_head=cfg["train.lr_head"], lr_apm=cfg["train.lr_apm"],
        momentum=cfg["train.momentum"], momentum_head=cfg["train.momentum_head"],
        weight_decay=cfg["train.weight_decay"], batch_size=cfg["train.batch_size"], seed=seed,
    )
