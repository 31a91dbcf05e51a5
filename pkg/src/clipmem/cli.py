"""Command-line entry point: ``clipmem {gen-data,train,eval,verify,flops}``.

Exit codes: 0 success, 1 verification or training failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import os

# cap BLAS threads before numpy loads; one thread keeps reductions bitwise reproducible
_threads = os.environ.get("CLIPMEM_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads if _threads.isdigit() else "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

from . import datagen as dg  # noqa: E402
from . import verify as vf  # noqa: E402
from .config import ConfigParseError, RunConfig, dump_config, load_config  # noqa: E402
from .evaluation import evaluate  # noqa: E402
from .learning import (Network, TrainingDiverged, train, train_stagewise,  # noqa: E402
                       write_metrics)
from .memory import flops_cm  # noqa: E402
from .model import assign, load_checkpoint, save_checkpoint  # noqa: E402

log = logging.getLogger("clipmem")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load(path: str) -> RunConfig:
    try:
        return load_config(path)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except (ConfigParseError, dg.ConfigError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _task_blob(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "task": cfg.to_dict()["task"]}


def write_data(cfg: RunConfig, out: Path) -> tuple[list, list]:
    out.mkdir(parents=True, exist_ok=True)
    train_v, val_v = dg.gen_dataset(cfg.task, cfg.seed)
    dg.write_dataset(out / "train.cmvd", train_v)
    dg.write_dataset(out / "val.cmvd", val_v)
    (out / "task.json").write_text(json.dumps(_task_blob(cfg), indent=2, sort_keys=True) + "\n")
    return train_v, val_v


def ensure_data(cfg: RunConfig, data_dir: Path) -> tuple[list, list]:
    """Read the cached datasets, regenerating when absent or made for another task."""
    meta = data_dir / "task.json"
    paths = [data_dir / "train.cmvd", data_dir / "val.cmvd"]
    if meta.exists() and all(p.exists() for p in paths):
        if json.loads(meta.read_text()) == _task_blob(cfg):
            return dg.read_dataset(paths[0])[0], dg.read_dataset(paths[1])[0]
    log.info("generating datasets in %s", data_dir)
    return write_data(cfg, data_dir)


def report_flops(cfg: RunConfig) -> int:
    if not cfg.cm.enabled:
        return 0
    d = cfg.model.d
    return flops_cm(cfg.eval.n_crops, cfg.model.k, d, d // cfg.cm.reduction_ratio)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    cfg = _load(args.config)
    out = Path(args.out)
    train_v, val_v = write_data(cfg, out)
    print(f"wrote {len(train_v)} train and {len(val_v)} val videos to {out}")
    return EXIT_OK


def run_experiment(cfg: RunConfig, out: Path) -> dict:
    """Data (if absent), optional stage 1, training, final evaluation, report.

    Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    out = Path(out)
    ck_dir = out / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    train_v, val_v = ensure_data(cfg, out / "data")

    t0 = time.perf_counter()
    if cfg.train.stagewise:
        res = train_stagewise(cfg, train_v, val_v, ck_dir / "stage1.ck")
        net, history = res.net, res.stage2
        write_metrics(out / "metrics_stage1.csv", res.stage1)
    else:
        net, history = train(cfg, train_v, val_v)
    wall = time.perf_counter() - t0

    write_metrics(out / "metrics.csv", history)
    save_checkpoint(ck_dir / "final.ck", net.named_parameters())
    final = evaluate(val_v, net, cfg.train.L, cfg.eval.n_crops)
    report = {
        "config_hash": cfg.config_hash(),
        "final_val_video_acc": final.video_acc,
        "final_val_clip_acc": final.clip_acc,
        "flops_cm_per_video": report_flops(cfg),
        "wall_seconds": wall,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def cmd_train(args) -> int:
    cfg = _load(args.config)
    try:
        report = run_experiment(cfg, Path(args.out_dir))
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args.config)
    try:
        values = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except ValueError as exc:
        raise UsageError(f"unreadable checkpoint: {exc}") from exc
    net = Network.init(cfg)
    try:
        assign(net.named_parameters(), values)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint does not match config: {exc}") from exc
    if args.data:
        val_v, _ = dg.read_dataset(Path(args.data))
    else:
        _, val_v = dg.gen_dataset(cfg.task, cfg.seed)
    res = evaluate(val_v, net, cfg.train.L, cfg.eval.n_crops)
    print(json.dumps({
        "video_acc": res.video_acc,
        "clip_acc": res.clip_acc,
        "per_position_acc": [float(x) for x in res.per_position_acc],
        "crop_starts": res.starts,
    }))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = vf.run(args.suite)
    print(vf.format_results(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def cmd_flops(args) -> int:
    cfg = _load(args.config)
    d, k = cfg.model.d, cfg.model.k
    dp = d // cfg.cm.reduction_ratio
    print(json.dumps({
        "train_per_video": flops_cm(cfg.train.N, k, d, dp),
        "eval_per_video": flops_cm(cfg.eval.n_crops, k, d, dp),
        "N": cfg.train.N, "n_crops": cfg.eval.n_crops, "k": k, "d": d, "d_prime": dp,
    }))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clipmem", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train.cmvd and val.cmvd into a directory")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train, then write metrics.csv, report.json and checkpoints")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="multi-crop evaluation of a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="CMVD1 file to evaluate (default: the config's val split)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run fixed-seed property suites")
    v.add_argument("--suite", required=True, choices=["all", *vf.SUITES])
    v.set_defaults(func=cmd_verify)

    f = sub.add_parser("flops", help="memory multiply-adds per video")
    f.add_argument("--config", required=True)
    f.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dg.FormatError, dg.ClipLengthError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
