#!/usr/bin/env python3
"""Desk-scale benchmark: generate data, train all three modes, compare methods.

Produces under --root (default ./desk_run):

    data/                       250 simulated problems (200/25/25 split)
    <mode>/metrics.csv          per-epoch training curves
    <mode>/checkpoint/          latest model + optimizer state
    results.csv                 per-problem NRMSE for every method
    sweep_<mode>.csv            mean test NRMSE vs inference unroll count
    images/                     16-bit PGM magnitude and error exports
    summary.txt                 the table printed at the end

Re-running skips any stage whose outputs already exist, so a finished
training survives an interrupted evaluation.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from deepbp import Dataset, desk_config, generate_dataset
from deepbp.evaluation import (
    compare_methods,
    export_error_map,
    export_image,
    mean_by_method,
    sweep_unrolls,
    write_results,
)
from deepbp.recon import zero_filled
from deepbp.training import TrainConfig, load_checkpoint, train

MODES = ("supervised", "unsupervised", "modl")
N1_SWEEP = tuple(range(3, 15))


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, default=Path("desk_run"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, nargs=len(MODES), default=(12, 30, 12),
                    metavar=("SUP", "UNSUP", "MODL"),
                    help="epochs per mode (default 12 30 12)")
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--threads", type=int, default=1,
                    help="evaluation threads (training is sequential)")
    ap.add_argument("--deterministic", action="store_true")
    return ap.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    root = args.root
    data_dir = root / "data"

    if (data_dir / "manifest.json").exists():
        print(f"reusing dataset at {data_dir}")
        dataset = Dataset(data_dir)
    else:
        t0 = time.perf_counter()
        dataset = generate_dataset(data_dir, desk_config(seed=args.seed))
        print(f"generated {data_dir} in {time.perf_counter() - t0:.1f}s")

    models = {}
    for mode, epochs in zip(MODES, args.epochs):
        out = root / mode
        ckpt = out / "checkpoint"
        if (ckpt / "checkpoint.json").exists():
            print(f"reusing {mode} checkpoint")
        else:
            cfg = TrainConfig(mode=mode, epochs=epochs, lr=args.lr,
                              seed=args.seed, deterministic=args.deterministic)
            t0 = time.perf_counter()
            res = train(dataset, cfg, out)
            last = res.metrics[-1]
            print(f"trained {mode}: {epochs} epochs in {time.perf_counter() - t0:.0f}s, "
                  f"final loss {last['mean_loss']:.3e}")
        name = mode if mode == "modl" else f"dbp-{mode}"
        models[name] = load_checkpoint(ckpt)[0]

    cmp = compare_methods(dataset, models, sweep_n1=N1_SWEEP, threads=args.threads)
    write_results(cmp.rows, root / "results.csv")

    for name, model in models.items():
        method = "modl" if name == "modl" else "dbp"
        sweep = sweep_unrolls(model, dataset, N1_SWEEP, split="test",
                              method=method, threads=args.threads)
        write_results(sweep.problem_rows, root / f"sweep_{name}.csv")

    img_dir = root / "images"
    prob = dataset.load_split("test")[0]
    export_image(prob.truth, img_dir / "truth.pgm")
    export_image(zero_filled(prob), img_dir / "zero_filled.pgm")
    from deepbp.recon import dbp_forward, modl_forward
    for name, model in models.items():
        forward = modl_forward if name == "modl" else dbp_forward
        x = forward(prob, model)
        export_image(x, img_dir / f"{name}.pgm")
        export_error_map(x, prob.truth, img_dir / f"{name}_err.pgm")

    means = mean_by_method(cmp.rows)
    lines = [f"tuned l1 threshold: {cmp.tau:g}",
             f"validation-selected unrolls: {cmp.best_n1}",
             f"{'method':>18} {'n1':>3}  mean test NRMSE"]
    zf = means[("zero-filled", 0)]
    for (method, n1), val in sorted(means.items(), key=lambda kv: kv[1]):
        lines.append(f"{method:>18} {n1:>3}  {val:.4f}  ({100 * (1 - val / zf):+.1f}% vs zero-filled)")
    report = "\n".join(lines)
    (root / "summary.txt").write_text(report + "\n")
    print(report)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
