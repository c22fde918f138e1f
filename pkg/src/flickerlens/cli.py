"""``flickerlens`` command line: synth, extract, heatmap, train-toy, eval, analyze."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import netpbm
from .config import load_config, model_config, train_config
from .errors import ConfigError, FlickerLensError, InputError
from .ingest import load_crops, load_sequence, make_clips
from .model import FlickerNet
from .preprocess import ResidualConfig, residual_clip
from .spectrum import band_energy_array, extract_spectrum
from .synthdata import Flicker, SynthSpec, make_dataset
from .tensor_core import FeatureTensor, read_flt1, write_flt1
from .train_eval import evaluate, train_toy

log = logging.getLogger("flickerlens")


class UsageError(Exception):
    """Bad invocation; reported with exit status 2."""


# ---------------------------------------------------------------- helpers
def _threads(n: int) -> int:
    if n < 0:
        raise UsageError("--threads must be >= 0")
    return (os.cpu_count() or 1) if n == 0 else n


def _settings(args):
    """Config file values with CLI flags layered on top."""
    try:
        cfg = load_config(getattr(args, "config", None))
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    for flag, key in (("clip_len", "clip.len"), ("stride", "clip.stride"), ("hop", "clip.hop"),
                      ("mode", "spectrum.mode")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "drop_dc", False):
        cfg["spectrum.drop_dc"] = True
    if getattr(args, "filter_before_gray", False):
        cfg["preprocess.filter_before_gray"] = True
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _clips_of(frame_dir: Path, cfg, crops=None, source_id=None):
    sid = source_id or frame_dir.name
    seq = load_sequence(frame_dir)
    crop = (crops or {}).get(sid)
    return make_clips(seq, cfg["clip.len"], cfg["clip.stride"], cfg["clip.hop"], crop, sid)


def _labelled(data_dir: Path, cfg, crops=None):
    """(clip, label, video id) triples for every entry of ``manifest.json``."""
    manifest = data_dir / "manifest.json"
    if not manifest.exists():
        raise InputError(f"{data_dir} has no manifest.json")
    try:
        entries = json.loads(manifest.read_text())
        items = [(str(e["source_id"]), int(e["label"])) for e in entries]
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"malformed manifest {manifest}: {exc}") from None
    out = []
    for sid, label in items:
        for clip in _clips_of(data_dir / sid, cfg, crops, sid):
            out.append((clip, label, sid))
    return out


def _load_crops(args):
    return load_crops(args.crops) if getattr(args, "crops", None) else None


def _write_pgm(path, energy: np.ndarray) -> None:
    lo, hi = float(energy.min()), float(energy.max())
    scaled = np.zeros_like(energy) if hi <= lo else (energy - lo) / (hi - lo)
    netpbm.write(path, np.rint(scaled * 255.0).astype(np.uint8))


def _dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- subcommands
def cmd_synth(args) -> int:
    cfg = _settings(args)
    h, w = cfg["synth.height"], cfg["synth.width"]
    template = SynthSpec(height=h, width=w, length=cfg["synth.length"], motion=cfg["synth.motion"],
                         noise_sigma=cfg["synth.noise_sigma"],
                         flicker=Flicker((h / 2, w / 2), cfg["synth.radius"], amplitude=cfg["synth.amplitude"]))
    ds = make_dataset(args.n_real, args.n_fake, template, cfg["seed"])
    ds.save(args.out)
    print(f"wrote {len(ds.clips)} clips to {args.out}")
    return 0


def _volume(clip, cfg, workers):
    rc = ResidualConfig(cfg["preprocess.filter"], cfg["preprocess.kernel"], cfg["preprocess.filter_before_gray"])
    return extract_spectrum(residual_clip(clip, rc), cfg["spectrum.mode"], cfg["spectrum.drop_dc"], workers)


def cmd_extract(args) -> int:
    cfg = _settings(args)
    clips = _clips_of(Path(args.inp), cfg, _load_crops(args))
    vols = [_volume(c, cfg, _threads(args.threads)) for c in clips]
    if len(vols) == 1:
        out = vols[0].data
    else:
        out = FeatureTensor(("clip",) + vols[0].data.dims, np.stack([v.array for v in vols]))
    write_flt1(args.out, out)
    print(f"wrote {'x'.join(map(str, out.shape))} volume to {args.out}")
    return 0


def cmd_heatmap(args) -> int:
    t = read_flt1(args.inp)
    vol = t.data if t.data.ndim == 3 else t.data[args.clip]
    if vol.ndim != 3:
        raise InputError(f"expected a (bin, height, width) volume, got shape {t.shape}")
    k = vol.shape[0]
    k_hi = k - 1 if args.k_hi is None else args.k_hi
    energy = band_energy_array(np.abs(vol), args.k_lo, k_hi)
    _write_pgm(args.out, energy)
    print(f"wrote heatmap of bins {args.k_lo}..{k_hi} to {args.out}")
    return 0


def cmd_train_toy(args) -> int:
    cfg = _settings(args)
    seed = cfg["seed"]
    items = _labelled(Path(args.data), cfg, _load_crops(args))
    if not items:
        raise InputError("no clips found")
    t, h, w = items[0][0].array.shape
    mcfg = model_config(cfg, h, w, t, seed)
    tcfg = train_config(cfg, seed, args.paper_schedule)

    def report(epoch, loss):
        print(f"epoch {epoch} loss {loss:.6f}")

    result = train_toy([(c, lab) for c, lab, _ in items], tcfg, mcfg, on_epoch=report)
    result.model.save(args.out)
    if args.trace:
        _dump(args.trace, {"loss_trace": result.loss_trace})
    print(f"wrote model to {args.out}")
    return 0


def _load_model(path, threads) -> FlickerNet:
    net = FlickerNet.load(path)
    net.workers = _threads(threads)
    return net


def _clip_cfg(cfg, net):
    if cfg["clip.len"] != net.cfg.length:
        log.info("clip length taken from model: %d", net.cfg.length)
        cfg["clip.len"] = net.cfg.length
    return cfg


def cmd_eval(args) -> int:
    net = _load_model(args.model, args.threads)
    cfg = _clip_cfg(_settings(args), net)
    items = _labelled(Path(args.data), cfg, _load_crops(args))
    rep = evaluate(net, [c for c, _, _ in items], [lab for _, lab, _ in items], [v for _, _, v in items])
    _dump(args.report, rep)
    print(f"auc {rep['auc']:.4f} eer {rep['eer']:.4f} over {rep['n_videos']} videos")
    return 0


def cmd_analyze(args) -> int:
    net = _load_model(args.model, args.threads)
    cfg = _clip_cfg(_settings(args), net)
    clips = _clips_of(Path(args.inp), cfg, _load_crops(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_clip, boxes = [], []
    first_energy = None
    for c in clips:
        s = net.prepare(c)
        parts, _ = net.part_params(s)
        score = net.predict(s)
        b = [{"part": j, "a": p.a, "b": p.b, "theta": p.theta} for j, p in enumerate(parts)]
        per_clip.append({"start_index": c.start_index, "score": score, "parts": b})
        boxes.append({"start_index": c.start_index, "boxes": b})
        if first_energy is None:
            mag = np.abs(s.vol[: net.cfg.length // 2])
            first_energy = band_energy_array(mag, 1, mag.shape[0] - 1)
    video_score = float(np.mean([p["score"] for p in per_clip]))
    _dump(out / "analysis.json", {"source_id": clips[0].source_id, "video_score": video_score, "clips": per_clip})
    _dump(out / "boxes.json", boxes)
    _write_pgm(out / "heatmap.pgm", first_energy)
    print(f"video score {video_score:.4f}; wrote analysis.json, boxes.json, heatmap.pgm to {out}")
    return 0


# ---------------------------------------------------------------- parser
def _common(p, clips=True, config=True):
    if config:
        p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads (0 = auto)")
    if clips:
        p.add_argument("--clip-len", type=int, help="frames per clip")
        p.add_argument("--stride", type=int, help="frame stride inside a clip")
        p.add_argument("--hop", type=int, help="offset between clip starts")
        p.add_argument("--crops", help="JSON map of source id to crop box")
        p.add_argument("--filter-before-gray", action="store_true", help="filter colour channels first")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flickerlens", description="Temporal-spectrum flicker analysis of video clips.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic labelled dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-real", type=int, default=20, help="clips without flicker")
    p.add_argument("--n-fake", type=int, default=20, help="clips with a planted flicker")
    _common(p, clips=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="frame directory to an FLT1 spectrum volume")
    p.add_argument("--in", dest="inp", required=True, help="frame directory")
    p.add_argument("--out", required=True, help="output FLT1 file")
    p.add_argument("--mode", choices=("magnitude", "phase", "both"), help="values kept per bin")
    p.add_argument("--drop-dc", action="store_true", help="keep bins 1..T/2 instead of 0..T/2-1")
    _common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("heatmap", help="band-energy PGM from an FLT1 volume")
    p.add_argument("--in", dest="inp", required=True, help="FLT1 volume from extract")
    p.add_argument("--out", required=True, help="output PGM")
    p.add_argument("--k-lo", type=int, default=1, help="first bin of the band")
    p.add_argument("--k-hi", type=int, default=None, help="last bin of the band (default: last bin)")
    p.add_argument("--clip", type=int, default=0, help="clip index for multi-clip volumes")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("train-toy", help="train the detector on a labelled directory")
    p.add_argument("--data", required=True, help="directory with manifest.json")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--trace", help="write the per-epoch loss trace as JSON")
    p.add_argument("--paper-schedule", action="store_true", help="40 epochs with 4 warmup epochs")
    _common(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", help="score a labelled directory and write report.json")
    p.add_argument("--model", required=True, help="model file from train-toy")
    p.add_argument("--data", required=True, help="directory with manifest.json")
    p.add_argument("--report", required=True, help="output JSON report")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="per-clip scores, part boxes and a heatmap for one frame directory")
    p.add_argument("--model", required=True, help="model file from train-toy")
    p.add_argument("--in", dest="inp", required=True, help="frame directory")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"flickerlens {args.command}: {exc}", file=sys.stderr)
        return 2
    except (FlickerLensError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"flickerlens {args.command}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
