"""Command-line pipeline: gen-data, train, recon, eval, sweep-unrolls.

Configuration is flags-first with an optional JSON config file whose
keys are the flag names (underscored); explicit flags override the
file, the file overrides built-in defaults. All randomness flows from
--seed. Exit codes: 0 success, 2 usage, 3 data error, 4 numeric
failure (non-finite values).

File formats: tensor containers are "DBPT" files (magic, version u8,
dtype u8, rank u8, u64 LE extents, f64 LE row-major payload); datasets
are directories with manifest.json plus per-problem containers; images
export as 16-bit binary PGM (P5, big-endian); metrics.csv has columns
epoch,split,mode,mean_loss,mean_nrmse,wall_time_s and results.csv has
problem_id,method,n1,nrmse.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .cnn import DenoiserArch
from .data import Dataset, GenConfig, generate_dataset
from .evaluation import (
    export_error_map,
    export_image,
    mean_by_method,
    nrmse,
    sweep_unrolls,
    write_results,
)
from .io import DataError, save_tensor
from .recon import dbp_forward, l1_wavelet_bp, modl_forward, zero_filled
from .training import NumericError, TrainConfig, load_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_FORMATS_EPILOG = (
    "Formats: datasets are directories of DBPT tensor containers with a "
    "manifest.json; checkpoints are directories with checkpoint.json plus "
    "one container per parameter; images export as 16-bit binary PGM (P5); "
    "CSV outputs are results.csv (problem_id,method,n1,nrmse) and "
    "metrics.csv (epoch,split,mode,mean_loss,mean_nrmse,wall_time_s)."
)


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                   help="master seed for all randomness (default 0)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="parallelism bound (default: available cores)")
    p.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS,
                   help="single-threaded, zeroed wall times, bit-reproducible")
    p.add_argument("--config", type=str, default=None,
                   help="JSON file of flag defaults (explicit flags override)")


_COMMON_DEFAULTS = {"seed": 0, "threads": os.cpu_count() or 1, "deterministic": False}


def _merge(ns: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    opts = dict(_COMMON_DEFAULTS)
    opts.update(defaults)
    provided = {k: v for k, v in vars(ns).items() if k not in ("func", "config")}
    cfg_path = getattr(ns, "config", None)
    if cfg_path:
        try:
            cfg = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {cfg_path}: {e}") from e
        if not isinstance(cfg, dict):
            raise UsageError(f"config {cfg_path} must hold a JSON object")
        for key, val in cfg.items():
            k = key.replace("-", "_")
            if k not in opts:
                raise UsageError(f"config {cfg_path}: unknown option {key!r}")
            opts[k] = val
    opts.update(provided)
    if opts["deterministic"]:
        opts["threads"] = 1
    if opts["threads"] < 1:
        raise UsageError(f"--threads must be >= 1, got {opts['threads']}")
    return opts


def _parse_widths(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(tok) for tok in str(text).split(",") if tok.strip())
    except ValueError as e:
        raise UsageError(f"bad --widths {text!r}: {e}") from e


def _parse_int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError as e:
        raise UsageError(f"bad integer list {text!r}: {e}") from e


def _split_sizes(count: int) -> tuple[int, int, int]:
    if count < 3:
        raise UsageError(f"--count must be >= 3 to populate all splits, got {count}")
    val = max(1, round(0.1 * count))
    test = max(1, round(0.1 * count))
    train_n = count - val - test
    if train_n < 1:
        raise UsageError(f"--count {count} leaves no training problems")
    return train_n, val, test


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _method_name(info: dict) -> str:
    mode = info.get("mode", "")
    if mode == "supervised":
        return "dbp-supervised"
    if mode == "unsupervised":
        return "dbp-unsupervised"
    if mode == "modl":
        return "modl"
    return "dbp"


def _load_ckpt(path):
    if path is None:
        raise UsageError("--ckpt is required for this method")
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(ns: argparse.Namespace) -> int:
    opts = _merge(ns, {
        "out": None, "count": 250, "size": [32, 32], "coils": 4,
        "sigma": 0.02, "accel": 4.0, "calib": 8,
    })
    if not opts["out"]:
        raise UsageError("--out is required")
    h, w = (int(v) for v in opts["size"])
    if opts["count"] == 250:
        split = (200, 25, 25)
    else:
        split = _split_sizes(int(opts["count"]))
    try:
        config = GenConfig(
            count=int(opts["count"]), height=h, width=w, coils=int(opts["coils"]),
            sigma=float(opts["sigma"]), accel=float(opts["accel"]),
            calib=int(opts["calib"]), seed=int(opts["seed"]), split=split,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e
    generate_dataset(opts["out"], config)
    print(f"wrote {config.count} problems ({split[0]}/{split[1]}/{split[2]} "
          f"train/val/test) to {opts['out']}")
    return EXIT_OK


def _cmd_train(ns: argparse.Namespace) -> int:
    opts = _merge(ns, {
        "data": None, "out": None, "mode": "supervised", "epochs": 20,
        "lr": 1e-3, "cosine_decay": False, "batch_size": 1,
        "n1": 5, "n2": 4, "n3": 6,
        "widths": "16,32", "ckpt_every": 10, "resume": None,
    })
    if not opts["data"] or not opts["out"]:
        raise UsageError("--data and --out are required")
    try:
        config = TrainConfig(
            mode=opts["mode"], epochs=int(opts["epochs"]),
            batch_size=int(opts["batch_size"]), lr=float(opts["lr"]),
            cosine_decay=bool(opts["cosine_decay"]),
            seed=int(opts["seed"]), n1=int(opts["n1"]), n2=int(opts["n2"]),
            n3=int(opts["n3"]), arch=DenoiserArch(widths=_parse_widths(opts["widths"])),
            checkpoint_every=int(opts["ckpt_every"]),
            deterministic=bool(opts["deterministic"]),
        )
    except ValueError as e:
        raise UsageError(str(e)) from e
    dataset = Dataset(opts["data"])
    result = train(dataset, config, opts["out"], resume_from=opts["resume"])
    last = result.metrics[-1]["mean_loss"] if result.metrics else float("nan")
    print(f"trained {config.mode} for {len(result.metrics)} epochs "
          f"(final mean loss {last:.6g}); checkpoint at {result.checkpoint_dir}")
    return EXIT_OK


def _recon_one(problem, method, model, n1, tau):
    if method == "zero-filled":
        return zero_filled(problem)
    if method == "l1":
        return l1_wavelet_bp(problem, tau)
    forward = modl_forward if method == "modl" else dbp_forward
    return forward(problem, model, n1=n1)


def _cmd_recon(ns: argparse.Namespace) -> int:
    opts = _merge(ns, {
        "data": None, "out": None, "ckpt": None, "method": "dbp",
        "split": "test", "indices": None, "n1": None, "tau": 3e-3,
    })
    if not opts["data"] or not opts["out"]:
        raise UsageError("--data and --out are required")
    if opts["method"] not in ("dbp", "modl", "l1", "zero-filled"):
        raise UsageError(f"unknown --method {opts['method']!r}")
    dataset = Dataset(opts["data"])
    model, method = None, opts["method"]
    if method in ("dbp", "modl"):
        model, _, info = _load_ckpt(opts["ckpt"])
        if method == "dbp" and info.get("mode") == "modl":
            method = "modl"
    indices = (_parse_int_list(opts["indices"]) if opts["indices"] is not None
               else list(dataset.indices(opts["split"])))
    n1 = int(opts["n1"]) if opts["n1"] is not None else (model.n1 if model else 0)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for idx in indices:
        problem = dataset.problem(idx)
        x = _recon_one(problem, method, model, n1, float(opts["tau"]))
        _check_finite(x.data, f"reconstruction of problem {idx}")
        save_tensor(out / f"recon{idx:05d}.dbpt", x.data)
        export_image(x, out / f"recon{idx:05d}.pgm")
        if problem.truth is not None:
            export_error_map(x, problem.truth, out / f"recon{idx:05d}_err.pgm")
            rows.append({"problem_id": idx, "method": method, "n1": n1,
                         "nrmse": nrmse(x, problem.truth)})
    if rows:
        write_results(rows, out / "results.csv")
        print(f"reconstructed {len(indices)} problems; mean NRMSE "
              f"{np.mean([r['nrmse'] for r in rows]):.6g}; outputs in {out}")
    else:
        print(f"reconstructed {len(indices)} problems (no truth for NRMSE); "
              f"outputs in {out}")
    return EXIT_OK


def _cmd_eval(ns: argparse.Namespace) -> int:
    opts = _merge(ns, {
        "data": None, "out": None, "ckpt": None, "split": "test", "n1": None,
    })
    if not opts["data"] or not opts["out"]:
        raise UsageError("--data and --out are required")
    model, _, info = _load_ckpt(opts["ckpt"])
    dataset = Dataset(opts["data"])
    method = _method_name(info)
    n1 = int(opts["n1"]) if opts["n1"] is not None else model.n1
    forward = modl_forward if method == "modl" else dbp_forward
    rows = []
    for idx in dataset.indices(opts["split"]):
        problem = dataset.problem(idx)
        if problem.truth is None:
            raise DataError("eval needs ground truth for every problem")
        x = forward(problem, model, n1=n1)
        _check_finite(x.data, f"reconstruction of problem {idx}")
        rows.append({"problem_id": idx, "method": method, "n1": n1,
                     "nrmse": nrmse(x, problem.truth)})
    out = Path(opts["out"])
    write_results(rows, out / "results.csv")
    mean = np.mean([r["nrmse"] for r in rows])
    print(f"{method} at N1={n1} on {opts['split']}: mean NRMSE {mean:.6g} "
          f"over {len(rows)} problems; wrote {out / 'results.csv'}")
    return EXIT_OK


def _cmd_sweep(ns: argparse.Namespace) -> int:
    opts = _merge(ns, {
        "data": None, "out": None, "ckpt": None, "n1": "3,5,7,9,11,13",
        "split": "val",
    })
    if not opts["data"] or not opts["out"]:
        raise UsageError("--data and --out are required")
    model, _, info = _load_ckpt(opts["ckpt"])
    dataset = Dataset(opts["data"])
    n1_list = _parse_int_list(opts["n1"])
    if not n1_list:
        raise UsageError("--n1 list is empty")
    method = "modl" if info.get("mode") == "modl" else "dbp"
    result = sweep_unrolls(model, dataset, n1_list, split=opts["split"],
                           method=method, threads=int(opts["threads"]))
    for row in result.problem_rows:
        if not np.isfinite(row["nrmse"]):
            raise NumericError("non-finite NRMSE in sweep")
    out = Path(opts["out"])
    write_results(result.problem_rows, out / "results.csv")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w") as fh:
        fh.write("n1,mean_nrmse\n")
        for row in result.rows:
            fh.write(f"{row['n1']},{row['mean_nrmse']}\n")
    for row in result.rows:
        print(f"N1={row['n1']:3d}  mean NRMSE {row['mean_nrmse']:.6g}")
    print(f"best N1 = {result.best_n1}; wrote {out / 'sweep.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepbp",
        description="Constrained unrolled reconstruction for simulated "
                    "multi-coil Fourier imaging.",
        epilog=_FORMATS_EPILOG,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset",
                       epilog=_FORMATS_EPILOG)
    p.add_argument("--out", default=argparse.SUPPRESS, help="output dataset directory")
    p.add_argument("--count", type=int, default=argparse.SUPPRESS,
                   help="number of problems (default 250, split 200/25/25)")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"),
                   default=argparse.SUPPRESS, help="image extents, powers of two (default 32 32)")
    p.add_argument("--coils", type=int, default=argparse.SUPPRESS, help="coil count (default 4)")
    p.add_argument("--sigma", type=float, default=argparse.SUPPRESS,
                   help="noise std per complex sample (default 0.02)")
    p.add_argument("--accel", type=float, default=argparse.SUPPRESS,
                   help="target acceleration factor (default 4)")
    p.add_argument("--calib", type=int, default=argparse.SUPPRESS,
                   help="fully sampled central square side (default 8)")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model", epilog=_FORMATS_EPILOG)
    p.add_argument("--data", default=argparse.SUPPRESS, help="dataset directory")
    p.add_argument("--out", default=argparse.SUPPRESS,
                   help="output directory for metrics.csv and checkpoint/")
    p.add_argument("--mode", choices=("supervised", "unsupervised", "modl"),
                   default=argparse.SUPPRESS, help="training mode (default supervised)")
    p.add_argument("--epochs", type=int, default=argparse.SUPPRESS, help="default 20")
    p.add_argument("--lr", type=float, default=argparse.SUPPRESS,
                   help="Adam learning rate (default 1e-3)")
    p.add_argument("--cosine-decay", action="store_true", default=argparse.SUPPRESS,
                   help="anneal the learning rate to ~0 over --epochs")
    p.add_argument("--batch-size", type=int, default=argparse.SUPPRESS, help="default 1")
    p.add_argument("--n1", type=int, default=argparse.SUPPRESS, help="unroll count (default 5)")
    p.add_argument("--n2", type=int, default=argparse.SUPPRESS,
                   help="ADMM iterations per unroll (default 4)")
    p.add_argument("--n3", type=int, default=argparse.SUPPRESS,
                   help="CG iterations per ADMM step (default 6)")
    p.add_argument("--widths", default=argparse.SUPPRESS,
                   help="comma-separated encoder widths (default 16,32)")
    p.add_argument("--ckpt-every", type=int, default=argparse.SUPPRESS,
                   help="checkpoint cadence in epochs (default 10; final always saved)")
    p.add_argument("--resume", default=argparse.SUPPRESS,
                   help="checkpoint directory to resume from")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("recon", help="reconstruct problems and export images",
                       epilog=_FORMATS_EPILOG)
    p.add_argument("--ckpt", default=argparse.SUPPRESS,
                   help="checkpoint directory (dbp/modl methods)")
    p.add_argument("--data", default=argparse.SUPPRESS, help="dataset directory")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--method", choices=("dbp", "modl", "l1", "zero-filled"),
                   default=argparse.SUPPRESS, help="default dbp")
    p.add_argument("--split", choices=("train", "val", "test"),
                   default=argparse.SUPPRESS, help="default test")
    p.add_argument("--indices", default=argparse.SUPPRESS,
                   help="comma-separated problem indices (overrides --split)")
    p.add_argument("--n1", type=int, default=argparse.SUPPRESS,
                   help="inference unroll count (default: as trained)")
    p.add_argument("--tau", type=float, default=argparse.SUPPRESS,
                   help="soft-threshold for --method l1 (default 3e-3)")
    _add_common(p)
    p.set_defaults(func=_cmd_recon)

    p = sub.add_parser("eval", help="per-problem NRMSE for a checkpoint",
                       epilog=_FORMATS_EPILOG)
    p.add_argument("--ckpt", default=argparse.SUPPRESS, help="checkpoint directory")
    p.add_argument("--data", default=argparse.SUPPRESS, help="dataset directory")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory for results.csv")
    p.add_argument("--split", choices=("train", "val", "test"),
                   default=argparse.SUPPRESS, help="default test")
    p.add_argument("--n1", type=int, default=argparse.SUPPRESS,
                   help="inference unroll count (default: as trained)")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-unrolls", help="NRMSE vs inference unroll count",
                       epilog=_FORMATS_EPILOG)
    p.add_argument("--ckpt", default=argparse.SUPPRESS, help="checkpoint directory")
    p.add_argument("--data", default=argparse.SUPPRESS, help="dataset directory")
    p.add_argument("--n1", default=argparse.SUPPRESS,
                   help="comma-separated unroll counts (default 3,5,7,9,11,13)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--split", choices=("train", "val", "test"),
                   default=argparse.SUPPRESS, help="default val")
    _add_common(p)
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
