"""Losses with the warmup schedule, momentum SGD over the trainable set, ROC metrics and video aggregation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .errors import ConfigError, InputError
from .ingest import Clip
from .model import FlickerNet, ModelConfig, Sample

log = logging.getLogger(__name__)

AUX_KEYS = ("g", "p", "sp")


# ---------------------------------------------------------------- losses
def bce_loss(logit: float, label: int) -> float:
    """Binary cross-entropy on a logit, log-sum-exp form."""
    if label not in (0, 1):
        raise InputError(f"label must be 0 or 1, got {label!r}")
    x = float(logit)
    return max(x, 0.0) - x * label + math.log1p(math.exp(-abs(x)))


def bce_grad(logit: float, label: int) -> float:
    return float(expit(logit)) - label


@dataclass
class TrainConfig:
    epochs: int = 40
    lambda_warmup_epochs: int = 4
    lambda_value: float = 1.0
    lr_main: float = 0.01
    lr_head: float = 0.01
    lr_apm: float = 0.005
    momentum: float = 0.9
    momentum_head: float = 0.0
    weight_decay: float = 1e-4
    batch_size: int = 8
    clip_norm: float = 1.0  # gradient-norm cap per update outside the regressor; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.lambda_warmup_epochs <= self.epochs:
            raise ConfigError("lambda_warmup_epochs must lie in [0, epochs]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        """Scaled-down schedule: 10 epochs, 2 warmup epochs (fewer if ``epochs`` is smaller)."""
        kw.setdefault("epochs", 10)
        kw.setdefault("lambda_warmup_epochs", min(2, kw["epochs"]))
        return cls(**kw)

    def lam(self, epoch: int) -> float:
        if epoch < 0:
            raise ConfigError("epoch must be >= 0")
        return 0.0 if epoch < self.lambda_warmup_epochs else self.lambda_value


def total_loss(aux_logits, final_logit: float, label: int, epoch: int, cfg: TrainConfig) -> float:
    """lambda(epoch) * BCE(final) + BCE(g) + BCE(p) + BCE(sp); ``aux_logits`` is a (g, p, sp) triple or dict."""
    if isinstance(aux_logits, dict):
        aux_logits = [aux_logits[k] for k in AUX_KEYS]
    lam = cfg.lam(epoch)
    aux = sum(bce_loss(z, label) for z in aux_logits)
    return aux + (lam * bce_loss(final_logit, label) if lam else 0.0)


def total_loss_grads(logits: dict, label: int, epoch: int, cfg: TrainConfig) -> dict:
    """d total_loss / d logit for each of g, p, sp, final."""
    out = {k: bce_grad(logits[k], label) for k in AUX_KEYS}
    out["final"] = cfg.lam(epoch) * bce_grad(logits["final"], label)
    return out


@dataclass
class AuxHeads:
    """View of the three auxiliary linear classifiers held by a FlickerNet."""

    phi_g: tuple
    phi_p: tuple
    phi_sp: tuple

    @classmethod
    def of(cls, net: FlickerNet) -> "AuxHeads":
        p = net.p
        return cls((p["phi_g.w"], p["phi_g.b"]), (p["phi_p.w"], p["phi_p.b"]), (p["phi_sp.w"], p["phi_sp.b"]))

    @staticmethod
    def logit(head, x) -> float:
        w, b = head
        return float(np.asarray(x) @ w + b[0])


# ---------------------------------------------------------------- optimiser
class MomentumSGD:
    """Per-group SGD: v = mu*v + g + wd*w; w -= lr*v. Groups map a name to (lr, momentum)."""

    def __init__(self, params: dict, group_of: Callable[[str], str], groups: dict, weight_decay: float = 0.0):
        self.params = params
        self.group_of = group_of
        self.groups = groups
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        for name, w in self.params.items():
            lr, mu = self.groups[self.group_of(name)]
            if lr == 0.0:
                continue
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * w
            v = self.velocity[name]
            v *= mu
            v += g
            w -= lr * v


@dataclass
class TrainResult:
    model: FlickerNet
    loss_trace: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    head_trace: list = field(default_factory=list)  # per epoch: mean BCE of each head


def _check_dataset(dataset):
    if not dataset:
        raise InputError("training set is empty")
    labels = {int(lab) for _, lab in dataset}
    if labels != {0, 1}:
        raise InputError(f"training set needs both labels, found {sorted(labels)}")


def train_toy(dataset, cfg: TrainConfig = None, model_cfg: ModelConfig = None,
              on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train the small modules of a fresh FlickerNet on ``[(Clip, label), ...]``.

    The frequency stack thresholds are calibrated on the training volumes first;
    both backbone stand-ins then stay fixed.
    """
    cfg = cfg or TrainConfig.toy()
    _check_dataset(dataset)
    clip0 = dataset[0][0]
    t, h, w = clip0.array.shape
    model_cfg = model_cfg or ModelConfig(height=h, width=w, length=t, seed=cfg.seed)
    net = FlickerNet(model_cfg)
    vols = [net.volume(c) for c, _ in dataset]
    net.calibrate(vols)
    samples = [net.prepare(c, int(lab), v) for (c, lab), v in zip(dataset, vols)]
    opt = MomentumSGD(net.parameters(), FlickerNet.group_of,
                      {"main": (cfg.lr_main, cfg.momentum), "apm": (cfg.lr_apm, cfg.momentum),
                       "head": (cfg.lr_head, cfg.momentum_head)}, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    trace, head_trace = [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        losses = []
        heads = {k: [] for k in AUX_KEYS + ("final",)}
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            acc = None
            for s in batch:
                logits, cache = net.forward(s)
                losses.append(total_loss(logits, logits["final"], s.label, epoch, cfg))
                for k in heads:
                    heads[k].append(bce_loss(logits[k], s.label))
                grads = net.backward(cache, total_loss_grads(logits, s.label, epoch, cfg))
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] += grads[k]
            for k in acc:
                acc[k] /= len(batch)
            if cfg.clip_norm > 0:
                # the regressor's coordinate signal is already bounded, so it is left out
                capped = [k for k in acc if FlickerNet.group_of(k) != "apm"]
                norm = math.sqrt(math.fsum(float(np.vdot(acc[k], acc[k])) for k in capped))
                if norm > cfg.clip_norm:
                    for k in capped:
                        acc[k] *= cfg.clip_norm / norm
            opt.step(acc)
        mean = math.fsum(losses) / len(losses)
        trace.append(mean)
        head_trace.append({k: math.fsum(v) / len(v) for k, v in heads.items()})
        log.info("epoch %d loss %.4f", epoch, mean)
        if on_epoch:
            on_epoch(epoch, mean)
    return TrainResult(net, trace, samples, head_trace)


# ---------------------------------------------------------------- metrics
@dataclass
class RocReport:
    auc: float
    eer: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise InputError("scores and labels must be equal-length 1-D sequences")
    if not np.isin(y, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise InputError("ROC needs both classes present")
    return s, y, n_pos, n_neg


def roc_metrics(scores, labels) -> RocReport:
    """ROC curve, AUC (Mann-Whitney, ties count one half) and EER (linear interpolation)."""
    s, y, n_pos, n_neg = _split(scores, labels)
    ranks = rankdata(s)  # average ranks: exact multiples of 1/2
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    auc = u / (n_pos * n_neg)
    thresholds = np.unique(s)[::-1]
    tp = np.array([0] + [int(((s >= th) & (y == 1)).sum()) for th in thresholds])
    fp = np.array([0] + [int(((s >= th) & (y == 0)).sum()) for th in thresholds])
    tpr, fpr = tp / n_pos, fp / n_neg
    return RocReport(float(auc), _eer(fpr, tpr), fpr, tpr, np.concatenate([[np.inf], thresholds]))


def _eer(fpr: np.ndarray, tpr: np.ndarray) -> float:
    fnr = 1.0 - tpr
    d = fpr - fnr  # rises from -1 to +1 along the curve
    for i in range(len(d)):
        if d[i] == 0:
            return float(fpr[i])
        if i and d[i - 1] < 0 < d[i]:
            t = -d[i - 1] / (d[i] - d[i - 1])
            return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))
    return float(fpr[-1])


def video_level_scores(clip_scores) -> list[tuple[str, float]]:
    """Mean clip probability per video, videos in order of first appearance."""
    groups: dict[str, list[float]] = {}
    for vid, score in clip_scores:
        groups.setdefault(vid, []).append(float(score))
    return [(vid, math.fsum(v) / len(v)) for vid, v in groups.items()]


def score_clips(net: FlickerNet, clips) -> list[float]:
    return [net.predict(net.prepare(c)) for c in clips]


def evaluate(net: FlickerNet, clips, labels, video_ids=None) -> dict:
    """Report dict with auc, eer, n_videos, n_clips, per_video_scores."""
    video_ids = video_ids or [c.source_id or str(i) for i, c in enumerate(clips)]
    probs = score_clips(net, clips)
    per_video = video_level_scores(list(zip(video_ids, probs)))
    vid_label = {}
    for vid, lab in zip(video_ids, labels):
        if vid_label.setdefault(vid, int(lab)) != int(lab):
            raise InputError(f"video {vid} has clips with different labels")
    roc = roc_metrics([s for _, s in per_video], [vid_label[v] for v, _ in per_video])
    return {"auc": roc.auc, "eer": roc.eer, "n_videos": len(per_video), "n_clips": len(clips),
            "per_video_scores": {v: s for v, s in per_video}}
