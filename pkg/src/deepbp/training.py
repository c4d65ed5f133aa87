"""Supervised and unsupervised training loops, Adam, and checkpointing.

Loss conventions: both losses are means over real components (image
domain) or complex samples (measurement domain), so the learning rate
is scale-free across image sizes. The measurement-domain loss never
touches ground truth; NRMSE monitoring uses truth when present, for
reporting only.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .cnn import DenoiserArch, DenoiserWeights, init_weights
from .data import Dataset, Problem
from .io import DataError, load_tensor, save_tensor
from .recon import UnrolledModel, dbp_forward, modl_forward

__all__ = [
    "TrainConfig",
    "TrainResult",
    "NumericError",
    "Adam",
    "supervised_loss",
    "unsupervised_loss",
    "init_model",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

MODES = ("supervised", "unsupervised", "modl")
CHECKPOINT_JSON = "checkpoint.json"
METRICS_HEADER = ("epoch", "split", "mode", "mean_loss", "mean_nrmse", "wall_time_s")


class NumericError(Exception):
    """A non-finite value surfaced where the math guarantees finiteness."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "supervised"
    epochs: int = 20
    batch_size: int = 1
    lr: float = 1e-3
    cosine_decay: bool = False
    seed: int = 0
    n1: int = 5
    n2: int = 4
    n3: int = 6
    arch: DenoiserArch = field(default_factory=DenoiserArch)
    checkpoint_every: int = 10
    deterministic: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def supervised_loss(x_hat: Tensor, truth: Tensor) -> Tensor:
    """Mean squared error over all real components of the image."""
    if x_hat.shape != truth.shape:
        raise ValueError(f"shape mismatch: {x_hat.shape} vs {truth.shape}")
    diff = ad.sub(x_hat, truth)
    return ad.scale(ad.dot(diff, diff), 1.0 / diff.size)


def unsupervised_loss(x_hat: Tensor, problem: Problem) -> Tensor:
    """||A x_hat - y||^2 / M over the sampled positions.

    Unsampled positions contribute zero on both sides, so the sum is
    over the M complex measurements; the floor of this loss is sigma^2.
    """
    resid = ad.sub(problem.operator().forward(x_hat), problem.y)
    return ad.scale(ad.dot(resid, resid), 1.0 / problem.measurements)


class Adam:
    """Adam over named parameters; tensors are immutable so step() returns
    fresh ones. beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, names, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.names = list(names)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        out: dict[str, Tensor] = {}
        for name in self.names:
            p = params[name]
            g = grads.get(name)
            if g is None:
                g = np.zeros(p.shape)
            m = self.m.get(name, np.zeros(p.shape))
            v = self.v.get(name, np.zeros(p.shape))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            new = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            out[name] = Tensor(new, requires_grad=True)
        return out


def init_model(config: TrainConfig) -> UnrolledModel:
    """Fresh model: He-initialized denoiser, rho (or lambda) = 1."""
    weights = init_weights(config.arch, [config.seed, 17])
    log_rho = Tensor(np.zeros(()), requires_grad=True)
    return UnrolledModel(weights, log_rho, n1=config.n1, n2=config.n2, n3=config.n3)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(ckpt_dir, model: UnrolledModel, optimizer: Adam | None = None,
                    meta: dict | None = None) -> Path:
    """One tensor container per parameter plus checkpoint.json; optimizer
    moment tensors are stored alongside when given."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for name, t in model.named_params():
        save_tensor(ckpt_dir / f"param_{name}.dbpt", t.data)
        names.append(name)
    info = {
        "version": 1,
        "arch": {
            "widths": list(model.weights.arch.widths),
            "in_channels": model.weights.arch.in_channels,
            "final_scale": model.weights.arch.final_scale,
        },
        "rho": float(np.exp(model.log_rho.item())),
        "n1": model.n1,
        "n2": model.n2,
        "n3": model.n3,
        "params": names,
        "optimizer": None,
    }
    if optimizer is not None:
        for name in optimizer.names:
            save_tensor(ckpt_dir / f"adam_m_{name}.dbpt", optimizer.m.get(name, np.zeros(())))
            save_tensor(ckpt_dir / f"adam_v_{name}.dbpt", optimizer.v.get(name, np.zeros(())))
        info["optimizer"] = {"t": optimizer.t, "lr": optimizer.lr}
    info.update(meta or {})
    (ckpt_dir / CHECKPOINT_JSON).write_text(json.dumps(info, indent=1))
    return ckpt_dir


def load_checkpoint(ckpt_dir) -> tuple[UnrolledModel, Adam | None, dict]:
    ckpt_dir = Path(ckpt_dir)
    jp = ckpt_dir / CHECKPOINT_JSON
    if not jp.is_file():
        raise DataError(f"no {CHECKPOINT_JSON} in {ckpt_dir}")
    info = json.loads(jp.read_text())
    arch = DenoiserArch(
        widths=tuple(info["arch"]["widths"]),
        in_channels=info["arch"]["in_channels"],
        final_scale=info["arch"]["final_scale"],
    )
    params: dict[str, Tensor] = {}
    for name in info["params"]:
        params[name] = Tensor(load_tensor(ckpt_dir / f"param_{name}.dbpt"), requires_grad=True)
    weights = DenoiserWeights(arch, {k: v for k, v in params.items() if k != "log_rho"})
    model = UnrolledModel(weights, params["log_rho"],
                          n1=info["n1"], n2=info["n2"], n3=info["n3"])
    optimizer = None
    if info.get("optimizer"):
        optimizer = Adam(info["params"], lr=info["optimizer"]["lr"])
        optimizer.t = int(info["optimizer"]["t"])
        for name in info["params"]:
            optimizer.m[name] = load_tensor(ckpt_dir / f"adam_m_{name}.dbpt")
            optimizer.v[name] = load_tensor(ckpt_dir / f"adam_v_{name}.dbpt")
    return model, optimizer, info


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    model: UnrolledModel
    metrics: list[dict]
    checkpoint_dir: Path


def _nrmse_value(x_hat: np.ndarray, truth: np.ndarray) -> float:
    return float(np.linalg.norm(x_hat - truth) / np.linalg.norm(truth))


def _forward(problem: Problem, model: UnrolledModel, mode: str) -> Tensor:
    if mode == "modl":
        return modl_forward(problem, model)
    return dbp_forward(problem, model)


def train(dataset: Dataset, config: TrainConfig, out_dir,
          resume_from=None) -> TrainResult:
    """Adam over (w, log rho), batch gradients averaged, shuffling fixed
    per (seed, epoch); unsupervised mode trains w only, with per-unroll
    state reinitialization. cosine_decay anneals the learning rate to ~0
    over config.epochs. Writes metrics.csv (one row per epoch) and keeps
    the latest checkpoint in out_dir/checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    has_truth = dataset.has_truth(0)
    if config.mode in ("supervised", "modl") and not has_truth:
        raise DataError(f"{config.mode} training needs ground truth, "
                        f"but {dataset.root} has none")

    start_epoch = 0
    if resume_from is not None:
        model, optimizer, info = load_checkpoint(resume_from)
        if optimizer is None:
            raise DataError(f"checkpoint {resume_from} has no optimizer state")
        start_epoch = int(info.get("epoch", 0))
    else:
        model = init_model(config)
        optimizer = Adam([n for n, _ in model.named_params()], lr=config.lr)
    # The measurement-domain loss needs the constraint to stay active: with
    # carried (z, u) the duals settle the output strictly inside the ball,
    # where the only descent direction is fitting measurement noise, and a
    # trainable rho is a degenerate knob (inflating it tightens feasibility
    # for every image without improving the denoiser). So unsupervised runs
    # re-derive the ADMM state at each unroll and keep rho frozen; saved
    # checkpoints still restore the default carried-state inference.
    freeze = ("log_rho",) if config.mode == "unsupervised" else ()
    if config.mode == "unsupervised":
        model = replace(model, reinit_state=True)

    metrics_path = out_dir / "metrics.csv"
    mode_append = resume_from is not None and metrics_path.exists()
    metrics_file = open(metrics_path, "a" if mode_append else "w", newline="")
    writer = csv.writer(metrics_file)
    if not mode_append:
        writer.writerow(METRICS_HEADER)
        metrics_file.flush()

    ckpt_dir = out_dir / "checkpoint"
    rows: list[dict] = []
    train_idx = list(dataset.indices("train"))
    def meta(epoch: int) -> dict:
        return {"epoch": epoch, "mode": config.mode, "seed": config.seed}

    try:
        if config.epochs == start_epoch:
            save_checkpoint(ckpt_dir, model, optimizer, meta(start_epoch))
        for epoch in range(start_epoch + 1, config.epochs + 1):
            t0 = time.perf_counter()
            if config.cosine_decay:
                # Half-cosine from lr down to ~0 across the run; derived from
                # config each epoch so resumed runs follow the same schedule.
                optimizer.lr = config.lr * 0.5 * (
                    1.0 + np.cos(np.pi * (epoch - 1) / config.epochs))
            order = np.random.default_rng([config.seed, epoch]).permutation(train_idx)
            losses, nrmses = [], []
            params = dict(model.named_params())
            for b0 in range(0, len(order), config.batch_size):
                batch = order[b0 : b0 + config.batch_size]
                acc: dict[str, np.ndarray] = {}
                for idx in batch:
                    problem = dataset.problem(int(idx))
                    with Tape() as tape:
                        x_hat = _forward(problem, model, config.mode)
                        if config.mode == "unsupervised":
                            loss = unsupervised_loss(x_hat, problem)
                        else:
                            loss = supervised_loss(x_hat, problem.truth)
                        lval = loss.item()
                        if not np.isfinite(lval):
                            raise NumericError(
                                f"non-finite loss at epoch {epoch}, problem {idx}")
                        grads = tape.backward(loss)
                    losses.append(lval)
                    if problem.truth is not None:
                        nrmses.append(_nrmse_value(x_hat.data, problem.truth.data))
                    for name, t in params.items():
                        g = grads.get(t)
                        if g is None or name in freeze:
                            continue
                        acc[name] = acc[name] + g if name in acc else g
                scale = 1.0 / len(batch)
                acc = {k: v * scale for k, v in acc.items()}
                params = optimizer.step(params, acc)
                model = model.with_params(params)
            wall = 0.0 if config.deterministic else time.perf_counter() - t0
            row = {
                "epoch": epoch,
                "split": "train",
                "mode": config.mode,
                "mean_loss": float(np.mean(losses)),
                "mean_nrmse": float(np.mean(nrmses)) if nrmses else "",
                "wall_time_s": wall,
            }
            rows.append(row)
            writer.writerow([row[k] for k in METRICS_HEADER])
            metrics_file.flush()
            if epoch == config.epochs or (
                config.checkpoint_every and epoch % config.checkpoint_every == 0
            ):
                save_checkpoint(ckpt_dir, model, optimizer, meta(epoch))
    finally:
        metrics_file.close()
    return TrainResult(model, rows, ckpt_dir)
