"""Metrics, inference-time unroll sweeps, method comparison, and image export.

NRMSE is computed on complex images as the vector 2-norm over real and
imaginary components; a magnitude variant is available behind a flag.
results.csv rows are (problem_id, method, n1, nrmse).
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import Dataset, Problem
from .io import DataError
from .recon import UnrolledModel, dbp_forward, l1_wavelet_bp, modl_forward, zero_filled

__all__ = [
    "nrmse",
    "SweepResult",
    "sweep_unrolls",
    "CompareResult",
    "compare_methods",
    "tune_tau",
    "export_image",
    "export_error_map",
    "read_pgm",
    "write_results",
    "mean_by_method",
]

RESULTS_HEADER = ("problem_id", "method", "n1", "nrmse")
DEFAULT_TAU_GRID = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def nrmse(x_hat, truth, magnitude: bool = False) -> float:
    """||x_hat - truth|| / ||truth||; magnitude=True compares |.| images."""
    a, b = _as_array(x_hat), _as_array(truth)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if magnitude:
        a = np.sqrt(a[..., 0] ** 2 + a[..., 1] ** 2)
        b = np.sqrt(b[..., 0] ** 2 + b[..., 1] ** 2)
    denom = np.linalg.norm(b)
    if denom == 0:
        raise ValueError("truth has zero norm")
    return float(np.linalg.norm(a - b) / denom)


def _pmap(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _forward_for(method: str):
    if method == "modl":
        return modl_forward
    return dbp_forward


def _require_truth(problems: list[Problem]) -> None:
    if any(p.truth is None for p in problems):
        raise DataError("evaluation needs ground truth for every problem")


# ---------------------------------------------------------------------------
# sweeps and comparisons


@dataclass
class SweepResult:
    rows: list[dict]
    best_n1: int
    problem_rows: list[dict]

    def mean_for(self, n1: int) -> float:
        for r in self.rows:
            if r["n1"] == n1:
                return r["mean_nrmse"]
        raise KeyError(n1)


def sweep_unrolls(model: UnrolledModel, dataset: Dataset, n1_list,
                  split: str = "val", method: str = "dbp",
                  threads: int = 1) -> SweepResult:
    """Mean NRMSE per inference-time unroll count; argmin identifies the
    operating point. The model is evaluated as trained, only N1 varies."""
    problems = dataset.load_split(split)
    _require_truth(problems)
    ids = list(dataset.indices(split))
    forward = _forward_for(method)
    rows, problem_rows = [], []
    for n1 in n1_list:
        vals = _pmap(lambda p: nrmse(forward(p, model, n1=int(n1)), p.truth),
                     problems, threads)
        rows.append({"n1": int(n1), "mean_nrmse": float(np.mean(vals))})
        problem_rows += [
            {"problem_id": pid, "method": method, "n1": int(n1), "nrmse": v}
            for pid, v in zip(ids, vals)
        ]
    best = min(rows, key=lambda r: r["mean_nrmse"])
    return SweepResult(rows, best["n1"], problem_rows)


def tune_tau(dataset: Dataset, tau_grid=DEFAULT_TAU_GRID, split: str = "val",
             threads: int = 1, **l1_kwargs) -> float:
    """Pick the soft-threshold level minimizing mean validation NRMSE."""
    problems = dataset.load_split(split)
    _require_truth(problems)
    best_tau, best_val = None, np.inf
    for tau in tau_grid:
        vals = _pmap(lambda p: nrmse(l1_wavelet_bp(p, tau, **l1_kwargs), p.truth),
                     problems, threads)
        mean = float(np.mean(vals))
        if mean < best_val:
            best_tau, best_val = float(tau), mean
    return best_tau


@dataclass
class CompareResult:
    rows: list[dict]
    best_n1: dict[str, int]
    tau: float | None


def _eval_rows(problems, ids, method: str, n1: int, recon_fn, threads: int) -> list[dict]:
    vals = _pmap(lambda p: nrmse(recon_fn(p), p.truth), problems, threads)
    for v in vals:
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite NRMSE for method {method}")
    return [
        {"problem_id": pid, "method": method, "n1": n1, "nrmse": v}
        for pid, v in zip(ids, vals)
    ]


def compare_methods(dataset: Dataset, models: dict[str, UnrolledModel],
                    sweep_n1=None, tau: float | None = None,
                    tau_grid=DEFAULT_TAU_GRID, split: str = "test",
                    threads: int = 1, l1_iters: int = 25) -> CompareResult:
    """Per-problem NRMSE table over the given split.

    models maps method names ("dbp-supervised", "dbp-unsupervised",
    "modl") to trained models. Each learned method is evaluated at its
    training N1 and, when sweep_n1 is given, at the validation-optimal
    N1 from that list. The wavelet baseline threshold is tuned on the
    validation split unless tau is supplied; zero-filled rows use n1=0.
    """
    problems = dataset.load_split(split)
    _require_truth(problems)
    ids = list(dataset.indices(split))
    rows: list[dict] = []
    best_n1: dict[str, int] = {}
    for name, model in models.items():
        method = "modl" if name == "modl" else name
        forward = _forward_for(method)
        points = {model.n1}
        if sweep_n1:
            sweep = sweep_unrolls(model, dataset, sweep_n1, split="val",
                                  method=method, threads=threads)
            best_n1[name] = sweep.best_n1
            points.add(sweep.best_n1)
        for n1 in sorted(points):
            rows += _eval_rows(problems, ids, name, n1,
                               lambda p, m=model, k=n1: forward(p, m, n1=k), threads)
    if tau is None:
        tau = tune_tau(dataset, tau_grid, threads=threads, n1=l1_iters)
    rows += _eval_rows(problems, ids, "l1-wavelet", l1_iters,
                       lambda p: l1_wavelet_bp(p, tau, n1=l1_iters), threads)
    rows += _eval_rows(problems, ids, "zero-filled", 0, zero_filled, threads)
    return CompareResult(rows, best_n1, tau)


def mean_by_method(rows: list[dict]) -> dict[tuple[str, int], float]:
    """Mean NRMSE keyed by (method, n1)."""
    acc: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        acc.setdefault((r["method"], int(r["n1"])), []).append(float(r["nrmse"]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def write_results(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER)
        for r in rows:
            writer.writerow([r[k] for k in RESULTS_HEADER])
    return path


# ---------------------------------------------------------------------------
# 16-bit PGM export


def _magnitude(x) -> np.ndarray:
    a = _as_array(x)
    return np.sqrt(a[..., 0] ** 2 + a[..., 1] ** 2)


def _write_pgm16(img: np.ndarray, path) -> Path:
    """Map [0, max] linearly to [0, 65535] and write binary PGM (P5),
    big-endian samples as the format requires."""
    peak = float(img.max())
    scaled = img / peak if peak > 0 else img
    samples = np.round(scaled * 65535.0).astype(">u2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(samples.tobytes(order="C"))
    return path


def export_image(x, path) -> Path:
    """Magnitude image as 16-bit PGM."""
    return _write_pgm16(_magnitude(x), path)


def export_error_map(x, truth, path) -> Path:
    """|x - truth| magnitude of the complex difference as 16-bit PGM."""
    return _write_pgm16(_magnitude(_as_array(x) - _as_array(truth)), path)


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM; returns (samples as uint array (H, W), maxval)."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise DataError(f"{path} is not a binary PGM")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = fields
    dtype = ">u2" if maxval > 255 else "u1"
    img = np.frombuffer(data, dtype=dtype, count=h * w, offset=pos).reshape(h, w)
    return img.astype(np.uint32), maxval
