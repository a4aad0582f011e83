"""Command-line entry points.

Subcommands: train-teacher, amalgamate, evaluate, graft-probe, gen-data.
Every hyperparameter is a dotted config key (see config.DEFAULTS); a key
can be set in a --config file of `key = value` lines or by a flag of the
same dotted name, e.g. `--scene.h 32`.  AMALGAM_LOG=debug|info|quiet
controls verbosity.  Exit codes: 0 success, 2 usage error, 3 bad data or
file format, 4 training divergence.

All artifacts are byte-reproducible for a fixed seed and config; wall
times go to the log, never into files.
"""

import argparse
import io
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfg
from . import tensor as T
from .amalgamation import amalgamate_offline3, amalgamate_online, amalgamate_two
from .checkpoint import (_atomic_write, load_model, save_json, save_model,
                         save_online_student, save_shard, save_text)
from .errors import (AmalgamError, ConfigurationError, DataError,
                     DimensionError, FormatError, TrainingDivergence,
                     UsageError)
from .nets import MultiHead, forward, forward_from
from .scenegen import SceneDataset
from .training import evaluate, head_task, train_teacher

log = logging.getLogger("amalgam")

_LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO,
               "debug": logging.DEBUG}


def _setup_logging():
    name = os.environ.get("AMALGAM_LOG", "info").lower()
    if name not in _LOG_LEVELS:
        raise UsageError(
            f"AMALGAM_LOG must be one of {sorted(_LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=_LOG_LEVELS[name], format="%(levelname)s %(message)s")
    log.setLevel(_LOG_LEVELS[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amalgam",
        description="Train single-task teachers on procedural scenes and "
                    "amalgamate them into one compact multi-task network.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="key = value file")
        p.add_argument("--seed", type=int, help="run seed (overrides config)")
        p.add_argument("--out", metavar="DIR", help="output directory")
        for key in cfg.DEFAULTS:
            if key in ("seed", "out"):
                continue
            p.add_argument(f"--{key}", dest=key, metavar="V",
                           help=argparse.SUPPRESS)

    p = sub.add_parser("train-teacher", help="train one single-task network")
    p.add_argument("--task", required=True, choices=("seg", "depth", "normal"))
    common(p)

    p = sub.add_parser("amalgamate",
                       help="distill frozen teachers into a multi-head student")
    p.add_argument("--teachers", nargs="+", required=True, metavar="CKPT")
    p.add_argument("--mode", choices=("graft", "feat-l2"),
                   help="block-training loss (default graft)")
    p.add_argument("--online-base", metavar="CKPT",
                   help="existing two-task checkpoint to extend with one "
                        "new task (pass exactly one teacher)")
    common(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on the eval stream")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    common(p)

    p = sub.add_parser("graft-probe",
                       help="inject features at a block and dump the "
                            "prediction delta against the unmodified forward")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--features", required=True, metavar="NPY",
                   help="array shaped like the block's features for the "
                        "probe stream (the first probe.count eval images)")
    common(p)

    p = sub.add_parser("gen-data", help="write train/eval dataset shards")
    common(p)
    return parser


def _resolve_values(args) -> dict:
    overrides = {}
    for key in cfg.DEFAULTS:
        raw = getattr(args, key, None)
        if raw is not None:
            overrides[key] = raw
    values = cfg.resolve(args.config, overrides)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out is not None:
        values["out"] = args.out
    if getattr(args, "mode", None) is not None:
        values["amalgamate.loss_mode"] = args.mode
    return values


def _out_dir(values) -> Path:
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_npy(path, arr):
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr))
    _atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------------------
# subcommands

def cmd_train_teacher(values, args) -> int:
    t0 = time.perf_counter()
    spec = cfg.network_spec(values, args.task)
    _, train_view, eval_view = cfg.data_views(values)
    tc = cfg.train_config(values)
    log.info("training %s teacher: %d samples, %d epochs, seed %d",
             args.task, len(train_view), tc.epochs, tc.seed)
    state, curve = train_teacher(spec, train_view, tc)
    report = evaluate(spec, state, eval_view, values["eval.batch_size"])
    out = _out_dir(values)
    save_model(out / f"teacher-{args.task}.ckpt", spec, state)
    save_json(out / f"teacher-{args.task}-metrics.json", report.to_dict())
    save_text(out / f"teacher-{args.task}-curve.csv",
              "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
    print(report.text_block())
    log.info("saved %s (%.1f s)", out / f"teacher-{args.task}.ckpt",
             time.perf_counter() - t0)
    return 0


def _first_spec_difference(a, b):
    if a.widths != b.widths:
        for i, (wa, wb) in enumerate(zip(a.widths, b.widths), start=1):
            if wa != wb:
                return f"block {i} is {wa} channels vs {wb}"
        return f"{len(a.widths)} blocks vs {len(b.widths)}"
    if a.convs_per_block != b.convs_per_block:
        return f"{a.convs_per_block} convs per block vs {b.convs_per_block}"
    if a.in_channels != b.in_channels:
        return f"{a.in_channels} input channels vs {b.in_channels}"
    return None


def _load_teachers(paths):
    teachers = []
    for path in paths:
        spec, state = load_model(path)
        if isinstance(spec.head, MultiHead) or spec.head is None:
            raise ConfigurationError(f"{path} is not a single-task teacher")
        diff = teachers and _first_spec_difference(teachers[0][0], spec)
        if diff:
            raise ConfigurationError(
                f"teacher {path} does not match {paths[0]}: {diff}")
        teachers.append((spec, state))
    return teachers


def cmd_amalgamate(values, args) -> int:
    t0 = time.perf_counter()
    teachers = _load_teachers(args.teachers)
    by_task = {head_task(spec.head): (spec, state) for spec, state in teachers}
    if len(by_task) != len(teachers):
        raise ConfigurationError("every teacher must predict a different task")
    path_by_task = {head_task(spec.head): str(path)
                    for (spec, _), path in zip(teachers, args.teachers)}
    images_only, _, eval_view = cfg.data_views(values)
    acfg = cfg.amalgamation_config(values)
    out = _out_dir(values)

    if args.online_base is not None:
        if sorted(by_task) != ["norm"]:
            raise ConfigurationError(
                "online mode takes the existing two-task checkpoint via "
                "--online-base plus exactly one normal-prediction teacher")
        spec2, state2 = load_model(args.online_base)
        diff = _first_spec_difference(spec2, by_task["norm"][0])
        if diff:
            raise ConfigurationError(
                f"--online-base does not match the teacher: {diff}")
        sha_before = state2.sha256()
        student3, report = amalgamate_online((spec2, state2), by_task["norm"],
                                             images_only, acfg, eval_view)
        save_online_student(out / "student3.ckpt", student3)
        payload = report.to_dict()
        payload["teachers"] = {"target2": args.online_base,
                               "norm": args.teachers[0]}
        payload["freeze_audit"] = {"online_base_sha256_before": sha_before,
                                   "online_base_sha256_after": state2.sha256(),
                                   "unchanged": state2.sha256() == sha_before}
        written = out / "student3.ckpt"
    else:
        if sorted(by_task) == ["depth", "seg"]:
            report = amalgamate_two(teachers[0][0], by_task["seg"],
                                    by_task["depth"], images_only, acfg, eval_view)
        elif sorted(by_task) == ["depth", "norm", "seg"]:
            report = amalgamate_offline3(teachers[0][0], by_task["seg"],
                                         by_task["depth"], by_task["norm"],
                                         images_only, acfg, eval_view)
        else:
            raise ConfigurationError(
                f"expected seg+depth teachers (plus optionally normal), got "
                f"{sorted(by_task)}")
        save_model(out / "student.ckpt", report.target_spec, report.target_state)
        payload = report.to_dict()
        payload["teachers"] = {t: path_by_task[t] for t in sorted(path_by_task)}
        written = out / "student.ckpt"

    save_json(out / "report.json", payload)
    save_text(out / "report.txt", report.text_report())
    print(report.text_report())
    log.info("saved %s and report.{json,txt} (%.1f s)", written,
             time.perf_counter() - t0)
    return 0


def cmd_evaluate(values, args) -> int:
    spec, state = load_model(args.checkpoint)
    if spec.head is None:
        raise UsageError(f"{args.checkpoint} has no prediction head to evaluate")
    _, _, eval_view = cfg.data_views(values)
    report = evaluate(spec, state, eval_view, values["eval.batch_size"])
    out = _out_dir(values)
    stem = Path(args.checkpoint).stem
    save_json(out / f"{stem}-metrics.json", report.to_dict())
    print(report.text_block())
    return 0


def cmd_graft_probe(values, args) -> int:
    spec, state = load_model(args.checkpoint)
    if spec.head is None or isinstance(spec.head, MultiHead):
        raise UsageError("graft-probe expects a single-task teacher checkpoint")
    ds = SceneDataset(cfg.scene_config(values))
    start, count = values["data.train"], values["probe.count"]
    images = T.constant(np.stack([ds.image(start + i) for i in range(count)]))
    try:
        feats = np.load(args.features)
    except ValueError as e:
        raise FormatError(f"{args.features} is not a numpy array file: {e}") from e
    if feats.ndim != 4 or feats.shape[0] != count:
        raise DimensionError(
            f"features must be (probe.count={count}, C, h, w), got {feats.shape}")
    baseline, _ = forward(spec, state, images)
    grafted = forward_from(spec, state, args.block, T.constant(feats))
    delta = grafted.data - baseline.data
    out = _out_dir(values)
    _save_npy(out / "probe-prediction.npy", grafted.data)
    _save_npy(out / "probe-delta.npy", delta)
    save_json(out / "probe-summary.json", {
        "block": args.block, "count": count,
        "max_abs_delta": float(np.abs(delta).max()),
        "delta_l2": float(np.sqrt((delta ** 2).sum())),
        "prediction_shape": list(grafted.shape)})
    print(f"max |delta| = {np.abs(delta).max():.6g}")
    return 0


def cmd_gen_data(values, args) -> int:
    scene = cfg.scene_config(values)
    ds = SceneDataset(scene)
    train_n, eval_n = values["data.train"], values["data.eval"]
    out = _out_dir(values)
    save_shard(out / "train.shard", [ds.sample(i) for i in range(train_n)], scene)
    save_shard(out / "eval.shard",
               [ds.sample(train_n + i) for i in range(eval_n)], scene)
    log.info("wrote %d train / %d eval samples to %s", train_n, eval_n, out)
    return 0


DISPATCH = {"train-teacher": cmd_train_teacher, "amalgamate": cmd_amalgamate,
            "evaluate": cmd_evaluate, "graft-probe": cmd_graft_probe,
            "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        values = _resolve_values(args)
        return DISPATCH[args.command](values, args)
    except (UsageError, ConfigurationError) as e:
        log.error("%s", e)
        return 2
    except (DataError, DimensionError, FormatError, FileNotFoundError) as e:
        log.error("%s", e)
        return 3
    except TrainingDivergence as e:
        log.error("%s", e)
        if e.report:
            log.error("diagnostic: %s", e.report)
        return 4
    except AmalgamError as e:
        log.error("%s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
