"""Command-line entry point: mask-gen, simulate, reconstruct, train, eval.

Every command takes an optional JSON config (``--config``) validated against
``schemas/config.schema.json``; explicit flags override file values. Errors
are reported as one JSON object on stderr with a class-specific exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .classic import TvConfig, pnp_reconstruct
from .metrics import psnr, ssim
from .net import ParameterMismatchError, SpaDunConfig
from .npyio import NpyFormatError, load_tensor, read_pgm, save_tensor, write_pgm
from .sampling import MaskStack, Measurement, SamplingConfig, gen_mask, sample_forward
from .synth import KINDS, synth_dataset
from .tensor import DimensionError, no_grad
from .train import (CheckpointError, NonFiniteGradientError, Schedule, TrainConfig, default_unseen_ratio,
                    load_checkpoint, model_from_checkpoint, save_checkpoint, train_loop)
from .unfold import init_state, run_dun

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5

log = logging.getLogger("snapunfold")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def load_schema() -> dict:
    return json.loads(resources.files("snapunfold").joinpath("schemas/config.schema.json").read_text())


def validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(EXIT_SCHEMA, f"config invalid at {where}: {exc.message}") from exc


# file helpers ---------------------------------------------------------------

def save_mask(path, mask: MaskStack) -> None:
    save_tensor(path, mask.values)
    meta = {"pattern": mask.pattern, "seed": mask.seed}
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True))


def load_mask(path) -> MaskStack:
    values = load_tensor(path).astype(np.float64)
    if values.ndim == 2:
        values = values[None]
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {"pattern": "external", "seed": None}
    return MaskStack(values, meta.get("pattern", "external"), meta.get("seed"))


def load_video(path) -> np.ndarray:
    """(T, h, w) frames from an NPY file or a folder of PGM/NPY frames."""
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix in (".pgm", ".npy"))
        if not files:
            raise FileNotFoundError(f"no .pgm or .npy frames in {p}")
        return np.stack([read_pgm(f) if f.suffix == ".pgm" else load_tensor(f) for f in files]).astype(np.float64)
    v = load_tensor(p).astype(np.float64)
    return v[None] if v.ndim == 2 else v


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def dump_frames(out_dir: Path, frames: np.ndarray, prefix: str = "frame") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        write_pgm(out_dir / f"{prefix}_{t:03d}.pgm", f)
        save_tensor(out_dir / f"{prefix}_{t:03d}.npy", f.astype(np.float32))


def _require(cfg: dict, key: str, cmd: str):
    if cfg.get(key) is None:
        raise CliError(EXIT_SCHEMA, f"{cmd}: missing required setting {key!r}")
    return cfg[key]


def _out_dir(cfg: dict, default: str) -> Path:
    out = Path(cfg.get("out") or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def model_config(cfg: dict, base: SpaDunConfig | None = None) -> SpaDunConfig:
    """``base`` (or defaults) overridden by any architecture keys present in ``cfg``."""
    base = base or SpaDunConfig()
    keys = ("stages", "width", "pad_length", "block_type", "use_ybar", "use_mgm", "padding",
            "attn_site", "share_weights", "dtype")
    over = {k: cfg[k] for k in keys if cfg.get(k) is not None}
    if cfg.get("blocks") is not None:
        over["blocks"] = tuple(cfg["blocks"])
    return replace(base, **over)


def frame_metrics(gt: np.ndarray, rec: np.ndarray) -> dict:
    out = {"psnr": psnr(gt, rec)}
    if min(gt.shape[-2:]) >= 11:
        out["ssim"] = ssim(gt, rec)
    return out


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains non-finite values")


# commands -------------------------------------------------------------------

def cmd_mask_gen(cfg: dict) -> dict:
    h, w = cfg.get("size") or (32, 32)
    mask = gen_mask(cfg.get("pattern") or "dmd", cfg.get("cs_ratio") or 8, h, w, cfg.get("seed", 0) or 0)
    out = cfg.get("out") or "mask.npy"
    save_mask(out, mask)
    return {"mask": str(out), "pattern": mask.pattern, "shape": list(mask.shape)}


def cmd_simulate(cfg: dict) -> dict:
    mask = load_mask(_require(cfg, "mask", "simulate"))
    c, h, w = mask.shape
    seed = cfg.get("seed") or 0
    if cfg.get("video"):
        video = load_video(cfg["video"])
        if video.shape[0] < c or video.shape[1:] != (h, w):
            raise CliError(EXIT_MISMATCH, f"video {video.shape} cannot supply {c} frames of {h}x{w}")
        gt = video[:c]
    else:
        gt = synth_dataset(cfg.get("synth") or "moving_squares", 1, c, h, w, seed)[0].frames
    sigma = cfg.get("sigma") or 0.0
    meas = sample_forward(gt, mask, sigma, seed=seed)
    out = _out_dir(cfg, "sim")
    save_tensor(out / "meas.npy", meas.values)
    save_tensor(out / "gt.npy", gt)
    write_json(out / "meas.json", {"cs_ratio": c, "sigma": sigma, "seed": seed, "pattern": mask.pattern})
    return {"out": str(out), "cs_ratio": c, "sigma": sigma}


def _learned_model(cfg: dict):
    ck = load_checkpoint(_require(cfg, "checkpoint", "learned prior"), weights_only=True)
    return model_from_checkpoint(ck, model_config(cfg, ck.model_config())), ck


def cmd_reconstruct(cfg: dict) -> dict:
    mask = load_mask(_require(cfg, "mask", "reconstruct"))
    y = load_tensor(_require(cfg, "meas", "reconstruct")).astype(np.float64)
    if y.shape != mask.shape[1:]:
        raise CliError(EXIT_MISMATCH, f"measurement {y.shape} does not match mask {mask.shape}")
    meas = Measurement(y, mask.cs_ratio)
    prior = cfg.get("prior") or "tv"
    t0 = time.perf_counter()
    if prior == "tv":
        tv = TvConfig(tv_weight=cfg.get("tv_weight") or TvConfig.tv_weight,
                      inner_iters=cfg.get("tv_iters") or TvConfig.inner_iters,
                      stages=cfg.get("stages") or TvConfig.stages,
                      gamma=cfg.get("tv_gamma") or TvConfig.gamma)
        rec = pnp_reconstruct(meas, mask, tv).frames
    else:
        model, _ = _learned_model(cfg)
        with no_grad():
            rec = run_dun(meas, mask, model)[-1].data.astype(np.float64)
    runtime = time.perf_counter() - t0
    _check_finite(rec, "reconstruction")
    out = _out_dir(cfg, "recon")
    save_tensor(out / "recon.npy", rec)
    report = {"prior": prior, "pattern": mask.pattern, "cs_ratio": mask.cs_ratio, "runtime_s": runtime}
    if cfg.get("gt"):
        gt = load_tensor(cfg["gt"]).astype(np.float64)
        if gt.shape != rec.shape:
            raise CliError(EXIT_MISMATCH, f"ground truth {gt.shape} does not match reconstruction {rec.shape}")
        report.update(frame_metrics(gt, rec))
        report["init_psnr"] = psnr(gt, init_state(meas, mask).x.data[0])
        report["per_frame_psnr"] = [psnr(a, b) for a, b in zip(gt, rec)]
    if cfg.get("dump_frames"):
        dump_frames(out / "frames", rec)
    write_json(out / "metrics.json", report)
    return report


def cmd_train(cfg: dict) -> dict:
    ratio_set = tuple(cfg.get("ratio_set") or (2, 4))
    h, w = cfg.get("size") or (32, 32)
    seed = cfg.get("seed") or 0
    if cfg.get("mask"):
        master = load_mask(cfg["mask"])
    else:
        master = gen_mask(cfg.get("pattern") or "dmd", cfg.get("cs_ratio") or max(ratio_set), h, w, seed)
    base = SpaDunConfig(stages=2, width=8, blocks=(1, 1, 1), pad_length=max(ratio_set))
    sched = Schedule(warm_lr=cfg["lr"] if cfg.get("lr") is not None else 1e-3,
                     warm_epochs=cfg.get("warm_epochs") or 0, decay_every=cfg.get("decay_every") or 300)
    tcfg = TrainConfig(
        model=model_config(cfg, base),
        sampling=SamplingConfig(ratio_set, h, w, cfg.get("sigma") or 0.0),
        schedule=sched,
        batch_size=cfg.get("batch_size") or 4,
        epochs=cfg["epochs"] if cfg.get("epochs") is not None else 10**6,
        max_steps=cfg["steps"] if cfg.get("steps") is not None else 200,
        weight_decay=cfg["weight_decay"] if cfg.get("weight_decay") is not None else 1e-4,
        seed=seed,
    )
    kind = cfg.get("synth") or "moving_squares"
    frames = cfg.get("frames") or max(8, max(ratio_set))
    data = synth_dataset(kind, cfg.get("clips") or 16, frames, h, w, seed)
    val = synth_dataset(kind, cfg.get("val_clips") or 4, frames, h, w, seed + 1000)
    resume = load_checkpoint(cfg["resume"]) if cfg.get("resume") else None
    out = Path(cfg.get("out") or "model.ckpt")
    log_path = out.with_suffix(".jsonl")
    with open(log_path, "w") as fh:
        def sink(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            log.info("epoch %d step %d loss %.5f", rec["epoch"], rec["step"], rec["loss"])

        result = train_loop(data, master, tcfg, resume=resume, val_set=val, log_sink=sink)
    result.checkpoint.meta["synth"] = kind
    save_checkpoint(out, result.checkpoint)
    last = result.log[-1] if result.log else {}
    return {"checkpoint": str(out), "log": str(log_path), "steps": result.checkpoint.meta["step"], **last}


def setting_label(train_pattern: str | None, pattern: str) -> str:
    """Seen when the evaluation mask pattern is the one the checkpoint was trained on."""
    return "seen" if train_pattern == pattern else "unseen"


def ratio_label(ratio_set, c: int) -> str:
    return "seen" if c in set(ratio_set or ()) else "unseen"


def cmd_eval(cfg: dict) -> dict:
    ck = load_checkpoint(_require(cfg, "checkpoint", "eval"), weights_only=True)
    model = model_from_checkpoint(ck, model_config(cfg, ck.model_config()))
    meta = ck.meta
    train_pattern = meta.get("pattern")
    ratio_set = meta.get("ratio_set") or []
    h, w = cfg.get("size") or meta.get("patch") or (32, 32)
    ratios = cfg.get("ratios")
    if not ratios:
        ratios = sorted(set(ratio_set) | ({default_unseen_ratio(ratio_set)} - {None}))
    patterns = list(cfg.get("patterns") or [train_pattern if train_pattern in ("dmd", "cacti") else "dmd"])
    if cfg.get("pattern_swap"):
        patterns = [{"dmd": "cacti", "cacti": "dmd"}[p] for p in patterns]
    seed = cfg.get("seed") or 0
    mask_seed = meta.get("mask_seed", seed)
    frames = cfg.get("frames") or max(max(ratios), 8)
    clips = synth_dataset(cfg.get("synth") or meta.get("synth", "moving_squares"), cfg.get("clips") or 4,
                          frames, h, w, seed + 1000)
    sigma = cfg.get("sigma") or 0.0
    out = _out_dir(cfg, "eval")
    cells = []
    with open(out / "metrics.jsonl", "w") as fh:
        for pattern in patterns:
            for c in ratios:
                mask = gen_mask(pattern, c, h, w, mask_seed)
                t0 = time.perf_counter()
                per_clip = []
                for k, clip in enumerate(clips):
                    gt = clip.frames[:c]
                    meas = sample_forward(gt, mask, sigma, seed=seed + k)
                    with no_grad():
                        rec = run_dun(meas, mask, model)[-1].data.astype(np.float64)
                    _check_finite(rec, f"reconstruction ({pattern}, c={c})")
                    m = frame_metrics(gt, rec)
                    m["init_psnr"] = psnr(gt, init_state(meas, mask).x.data[0])
                    per_clip.append(m)
                    if cfg.get("dump_frames"):
                        dump_frames(out / f"{pattern}_c{c}" / f"clip{k:02d}", rec)
                cell = {"pattern": pattern, "cs_ratio": c, "setting": setting_label(train_pattern, pattern),
                        "ratio_setting": ratio_label(ratio_set, c), "runtime_s": time.perf_counter() - t0,
                        "per_clip": per_clip}
                for key in per_clip[0]:
                    cell[key] = float(np.mean([m[key] for m in per_clip]))
                fh.write(json.dumps(cell, sort_keys=True) + "\n")
                cells.append(cell)
    table = format_table(cells, ratios)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    report = {"checkpoint": cfg["checkpoint"], "train_pattern": train_pattern, "ratio_set": ratio_set, "cells": cells}
    write_json(out / "report.json", report)
    return {"out": str(out), "cells": len(cells)}


def format_table(cells: list[dict], ratios) -> str:
    """Rows per (pattern, seen/unseen), one PSNR/SSIM column per ratio."""
    head = ["pattern", "setting"] + [f"c={c}" for c in ratios]
    lines = ["\t".join(head)]
    rows: dict = {}
    for cell in cells:
        rows.setdefault((cell["pattern"], cell["setting"]), {})[cell["cs_ratio"]] = cell
    for (pattern, setting), by_c in rows.items():
        vals = []
        for c in ratios:
            cell = by_c.get(c)
            if cell is None:
                vals.append("-")
                continue
            s = f"{cell['psnr']:.2f}"
            if "ssim" in cell:
                s += f"/{cell['ssim']:.3f}"
            if cell["ratio_setting"] == "unseen":
                s += "*"
            vals.append(s)
        lines.append("\t".join([pattern, setting.capitalize()] + vals))
    lines.append("* unseen CS ratio")
    return "\n".join(lines)


COMMANDS = {"mask-gen": cmd_mask_gen, "simulate": cmd_simulate, "reconstruct": cmd_reconstruct,
            "train": cmd_train, "eval": cmd_eval}


# argument parsing -----------------------------------------------------------

def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snapunfold", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--mask")
        p.add_argument("--pattern", choices=["dmd", "cacti"])
        p.add_argument("--cs-ratio", type=int)
        p.add_argument("--ratio-set", type=int, nargs="+")
        p.add_argument("--stages", type=int)
        p.add_argument("--width", type=int, help="channel width of the first U-net scale")
        p.add_argument("--blocks", type=int, nargs="+")
        p.add_argument("--pad-length", type=int)
        p.add_argument("--sigma", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--prior", choices=["tv", "learned"])
        p.add_argument("--checkpoint")
        p.add_argument("--out")
        p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
        p.add_argument("--meas")
        p.add_argument("--gt")
        p.add_argument("--video")
        p.add_argument("--synth", choices=list(KINDS))
        p.add_argument("--clips", type=int)
        p.add_argument("--frames", type=int)
        p.add_argument("--dump-frames", action="store_true", default=None)
        p.add_argument("--block-type", choices=["mixer", "resnet", "resnext"])
        p.add_argument("--use-mgm", type=_bool)
        p.add_argument("--use-ybar", type=_bool)
        p.add_argument("--padding", choices=["reflective", "repetitive"])
        p.add_argument("--tv-weight", type=float)
        p.add_argument("--tv-iters", type=int)
        if name == "train":
            p.add_argument("--steps", type=int)
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--resume")
        if name == "eval":
            p.add_argument("--ratios", type=int, nargs="+")
            p.add_argument("--pattern-swap", action="store_true", default=None)
    return parser


def gather_config(args: argparse.Namespace) -> dict:
    cfg: dict = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_SCHEMA, f"{args.config}: not valid JSON: {exc}") from exc
        validate(cfg)
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "command", "verbose") and v is not None}
    cfg.update(flags)
    validate(cfg)
    return cfg


def _classify(exc: BaseException) -> int:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (ParameterMismatchError, DimensionError)):
        return EXIT_MISMATCH
    if isinstance(exc, (NonFiniteGradientError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (OSError, NpyFormatError, CheckpointError)):
        return EXIT_IO
    if isinstance(exc, ValueError):
        return EXIT_SCHEMA
    raise exc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = gather_config(args)
        result = COMMANDS[args.command](cfg)
    except Exception as exc:  # mapped to exit codes; unknown errors re-raise
        code = _classify(exc)
        err = {"error": type(exc).__name__, "code": code, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return code
    if args.command != "eval":
        print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
