"""Command-line driver: dataset generation, both training stages,
evaluation, single-image inference, and the gradient self-check.

Exit codes: 0 success, 1 invalid input or flags, 2 runtime failure.
Every run logs its fully resolved configuration; --config supplies a JSON
object whose values explicit flags override.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .distill import loss_grad_suite
from .evalmetrics import DEFAULT_CAP, METRIC_COLUMNS, evaluate_checkpoint, predict_depth
from .fileformats import read_ppm, write_pfm
from .gradcheck import format_reports
from .stereo import CameraRig, ConfigError, GenConfig, build_dataset
from .train import TrainConfig, train_student, train_teacher

log = logging.getLogger("depthdistill")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad flags; printed with the usage text, exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: {message}")


def _setup_logging() -> None:
    name = os.environ.get("ADU_LOG_LEVEL", "info").lower()
    if name not in _LOG_LEVELS:
        raise ConfigError(
            f"ADU_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=_LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _config_doc(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def _opt(args, doc: dict, key: str, default=None):
    """Flag beats config file beats default; unset flags parse to None."""
    v = getattr(args, key, None)
    if v is not None:
        return v
    return doc.get(key, default)


def _echo(resolved: dict) -> None:
    log.info("config: %s", json.dumps(resolved, sort_keys=True))


def _require(doc: dict, args, keys: list[str]) -> None:
    missing = [k for k in keys if _opt(args, doc, k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"{args.parser.format_usage()}missing required flags: {flags}")


def cmd_gen_data(args) -> int:
    doc = _config_doc(args)
    _require(doc, args, ["out", "train", "test"])
    rig_default = CameraRig()
    gen_default = GenConfig()
    rig = CameraRig(
        focal_px=_opt(args, doc, "focal_px", rig_default.focal_px),
        baseline_m=_opt(args, doc, "baseline_m", rig_default.baseline_m),
        width=_opt(args, doc, "width", rig_default.width),
        height=_opt(args, doc, "height", rig_default.height))
    config = GenConfig(rig=rig, fog_beta=_opt(args, doc, "fog_beta", gen_default.fog_beta))
    out = _opt(args, doc, "out")
    seed = _opt(args, doc, "seed", 0)
    n_train = _opt(args, doc, "train")
    n_test = _opt(args, doc, "test")
    overwrite = bool(_opt(args, doc, "overwrite", False))
    _echo({"out": str(out), "train": n_train, "test": n_test, "seed": seed,
           "overwrite": overwrite, "rig": rig.to_json(), "fog_beta": config.fog_beta})
    records = build_dataset(n_train, n_test, seed, out, config, overwrite=overwrite)
    print(f"wrote {len(records)} samples under {out}")
    return 0


def _train_config(stage: str, args) -> TrainConfig:
    doc = _config_doc(args)
    allowed = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(doc)
    merged["stage"] = stage
    for key in ("manifest", "out_ckpt", "teacher_ckpt", "runlog", "epochs",
                "max_steps", "batch_size", "learning_rate", "lam1", "lam2",
                "lam3", "alpha_d", "gamma", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    if getattr(args, "log_timing", None):
        merged["log_timing"] = True
    for flag, key in (("no_focal", "use_focal"), ("no_uem", "use_uem"),
                      ("no_attention", "use_attention"), ("no_distill", "distill")):
        if getattr(args, flag, None):
            merged[key] = False
    for key in ("manifest", "out_ckpt"):
        if key not in merged:
            raise UsageError(f"{args.parser.format_usage()}"
                             f"missing required flags: --{key.replace('_', '-')}")
    cfg = TrainConfig(**merged)
    _echo(asdict(cfg))
    return cfg


def cmd_train_teacher(args) -> int:
    result = train_teacher(_train_config("teacher", args))
    last = result.breakdowns[-1]
    print(f"teacher: {result.steps} steps, final l_b {last.l_b:.6g}, "
          f"checkpoint {result.ckpt_path}")
    return 0


def cmd_train_student(args) -> int:
    result = train_student(_train_config("student", args))
    last = result.breakdowns[-1]
    print(f"student: {result.steps} steps, final total {last.total:.6g}, "
          f"p_d {last.p_d:.4f}, checkpoint {result.ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    doc = _config_doc(args)
    _require(doc, args, ["ckpt", "manifest"])
    ckpt = _opt(args, doc, "ckpt")
    manifest = _opt(args, doc, "manifest")
    split = _opt(args, doc, "split", "test")
    cap = (_opt(args, doc, "cap_min", DEFAULT_CAP[0]),
           _opt(args, doc, "cap_max", DEFAULT_CAP[1]))
    out_csv = _opt(args, doc, "out_csv")
    _echo({"ckpt": str(ckpt), "manifest": str(manifest), "split": split,
           "cap": list(cap), "out_csv": None if out_csv is None else str(out_csv)})
    params, header = load_checkpoint(ckpt)
    report = evaluate_checkpoint(params, manifest, split, cap, out_csv)
    pairs = " ".join(f"{c} {getattr(report, c):.6g}" for c in METRIC_COLUMNS)
    print(f"{header['role']} on {split}: {pairs} ({report.n_valid} px)")
    return 0


def cmd_infer(args) -> int:
    doc = _config_doc(args)
    _require(doc, args, ["ckpt", "image", "out"])
    ckpt = _opt(args, doc, "ckpt")
    image = _opt(args, doc, "image")
    right = _opt(args, doc, "right")
    out = Path(_opt(args, doc, "out"))
    _echo({"ckpt": str(ckpt), "image": str(image),
           "right": None if right is None else str(right), "out": str(out)})
    params, _ = load_checkpoint(ckpt)
    params.freeze()
    left = read_ppm(image).astype(np.float64) / 255.0
    right_img = None if right is None else read_ppm(right).astype(np.float64) / 255.0
    depth, log_var = predict_depth(params, left, right_img)
    out.mkdir(parents=True, exist_ok=True)
    write_pfm(out / "depth.pfm", depth)
    write_pfm(out / "uncert.pfm", log_var)
    print(f"wrote {out / 'depth.pfm'} and {out / 'uncert.pfm'}")
    return 0


def cmd_gradcheck(args) -> int:
    doc = _config_doc(args)
    seed = _opt(args, doc, "seed", 0)
    coords = _opt(args, doc, "coords", 32)
    _echo({"seed": seed, "coords": coords})
    reports = loss_grad_suite(seed=seed, coords=coords)
    print(format_reports(reports))
    failed = [r for r in reports if not r.ok]
    verdict = "FAIL" if failed else "PASS"
    print(f"gradient suite: {verdict} ({len(reports) - len(failed)}/{len(reports)} tensors)")
    return 2 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="JSON file of defaults; flags override")

    parser = _Parser(prog="depthdistill",
                     description="synthetic-stereo depth distillation pipeline")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", parents=[common],
                       help="render a stereo dataset with exact depth maps")
    p.add_argument("--out")
    p.add_argument("--train", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--focal-px", type=float)
    p.add_argument("--baseline-m", type=float)
    p.add_argument("--fog-beta", type=float)
    p.add_argument("--overwrite", action="store_true", default=None)
    p.set_defaults(func=cmd_gen_data, parser=p)

    def train_flags(p, student: bool):
        p.add_argument("--manifest")
        p.add_argument("--out-ckpt")
        p.add_argument("--runlog")
        p.add_argument("--epochs", type=int)
        p.add_argument("--max-steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float, dest="learning_rate")
        p.add_argument("--log-timing", action="store_true", default=None)
        if student:
            p.add_argument("--teacher-ckpt")
            p.add_argument("--lam1", type=float)
            p.add_argument("--lam2", type=float)
            p.add_argument("--lam3", type=float)
            p.add_argument("--alpha-d", type=float)
            p.add_argument("--gamma", type=float)
            p.add_argument("--no-focal", action="store_true", default=None)
            p.add_argument("--no-uem", action="store_true", default=None)
            p.add_argument("--no-attention", action="store_true", default=None)
            p.add_argument("--no-distill", action="store_true", default=None)

    p = sub.add_parser("train-teacher", parents=[common],
                       help="pretrain the stereo teacher")
    train_flags(p, student=False)
    p.set_defaults(func=cmd_train_teacher, parser=p)

    p = sub.add_parser("train-student", parents=[common],
                       help="distill a monocular student from a frozen teacher")
    train_flags(p, student=True)
    p.set_defaults(func=cmd_train_student, parser=p)

    p = sub.add_parser("eval", parents=[common],
                       help="per-sample metrics for a checkpoint on one split")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--cap-min", type=float)
    p.add_argument("--cap-max", type=float)
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_eval, parser=p)

    p = sub.add_parser("infer", parents=[common],
                       help="predict depth and uncertainty maps for one image")
    p.add_argument("--ckpt")
    p.add_argument("--image")
    p.add_argument("--right", help="second view, required for teacher checkpoints")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer, parser=p)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every loss gradient")
    p.add_argument("--coords", type=int)
    p.set_defaults(func=cmd_gradcheck, parser=p)
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # argparse --help
        return 0 if e.code in (0, None) else int(e.code)
    except (ValueError, OSError) as e:
        log.error("%s", e)
        return 1
    except Exception as e:
        log.error("%s: %s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
