"""Synthetic problem generation and on-disk dataset management.

Noise convention: sigma is the standard deviation per *complex* sample,
so real and imaginary components are drawn i.i.d. N(0, sigma^2 / 2) and
E|v_j|^2 = sigma^2. With M = C * (mask ones) complex measurements this
makes eps = sigma * sqrt(M) exactly the expected residual norm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .io import DataError, load_tensor, save_tensor
from .linops import SenseOp, measurement_count
from .sampling import MaskSpec, achieved_accel, poisson_disc_mask

__all__ = [
    "Problem",
    "GenConfig",
    "Dataset",
    "make_phantom",
    "make_sensitivities",
    "simulate_measurements",
    "generate_dataset",
    "strip_truth",
    "desk_config",
    "paper_config",
]

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class Problem:
    """One inverse-problem instance: measurements, operator pieces, noise level."""

    y: Tensor
    sens: Tensor
    mask: Tensor
    sigma: float
    epsilon: float
    truth: Tensor | None = None
    _op: SenseOp | None = field(default=None, repr=False, compare=False)

    def operator(self) -> SenseOp:
        if self._op is None:
            self._op = SenseOp(self.sens, self.mask)
        return self._op

    @property
    def coils(self) -> int:
        return self.sens.shape[0]

    @property
    def measurements(self) -> int:
        return measurement_count(self.mask, self.coils)


def make_phantom(h: int, w: int, seed) -> Tensor:
    """Sum of 3-8 random ellipses with piecewise-constant complex amplitudes.

    Magnitudes in [0.2, 1.0], phases in [-pi/4, pi/4], one 3x3 averaging
    pass, then the maximum magnitude is normalized to 1.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    img = np.zeros((h, w), dtype=complex)
    for _ in range(int(rng.integers(3, 9))):
        cy = rng.uniform(0.25, 0.75) * h
        cx = rng.uniform(0.25, 0.75) * w
        a = max(rng.uniform(0.1, 0.35) * h, 1.0)
        b = max(rng.uniform(0.1, 0.35) * w, 1.0)
        theta = rng.uniform(0.0, np.pi)
        mag = rng.uniform(0.2, 1.0)
        phase = rng.uniform(-np.pi / 4, np.pi / 4)
        ct, st = np.cos(theta), np.sin(theta)
        u = (yy - cy) * ct + (xx - cx) * st
        v = -(yy - cy) * st + (xx - cx) * ct
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        img += inside * (mag * np.exp(1j * phase))
    img = _box3(img.real) + 1j * _box3(img.imag)
    peak = np.abs(img).max()
    img /= peak
    return Tensor(np.stack([img.real, img.imag], axis=-1))


def _box3(a: np.ndarray) -> np.ndarray:
    """One 3x3 averaging pass with zero padding."""
    h, w = a.shape
    p = np.zeros((h + 2, w + 2))
    p[1:-1, 1:-1] = a
    out = np.zeros_like(a)
    for di in range(3):
        for dj in range(3):
            out += p[di : di + h, dj : dj + w]
    return out / 9.0


def make_sensitivities(c: int, h: int, w: int, seed) -> Tensor:
    """Smooth complex coil profiles, normalized so sum_c |S_c|^2 = 1 everywhere.

    Gaussian magnitude bumps sit at equally spaced angles on a circle of
    radius 0.6 * min(H, W) / 2 around the image center; each coil carries
    a gentle seeded linear phase.
    """
    if c < 1:
        raise ValueError(f"need at least one coil, got {c}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    cy0, cx0 = (h - 1) / 2.0, (w - 1) / 2.0
    ring = 0.6 * min(h, w) / 2.0
    width = 0.6 * min(h, w)
    angle0 = rng.uniform(0.0, 2.0 * np.pi)
    maps = np.empty((c, h, w), dtype=complex)
    for i in range(c):
        ang = angle0 + 2.0 * np.pi * i / c
        cy = cy0 + ring * np.sin(ang)
        cx = cx0 + ring * np.cos(ang)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))
        slope_y = rng.uniform(-np.pi, np.pi) / max(h, 1)
        slope_x = rng.uniform(-np.pi, np.pi) / max(w, 1)
        phase = slope_y * (yy - cy0) + slope_x * (xx - cx0)
        maps[i] = bump * np.exp(1j * phase)
    norm = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    maps /= norm
    return Tensor(np.stack([maps.real, maps.imag], axis=-1))


def simulate_measurements(truth: Tensor, sens: Tensor, mask: Tensor, sigma: float, seed) -> Problem:
    """y = mask * (A truth + v) with complex noise of per-sample power sigma^2."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    op = SenseOp(sens, mask)
    y_clean = op.forward(truth).data
    if sigma > 0:
        rng = np.random.default_rng(seed)
        v = rng.normal(0.0, sigma / np.sqrt(2.0), size=y_clean.shape)
        v *= mask.data[None, :, :, None]
        y = y_clean + v
    else:
        y = y_clean
    m = measurement_count(mask, sens.shape[0])
    eps = sigma * np.sqrt(m)
    prob = Problem(Tensor(y), sens, mask, float(sigma), float(eps), truth)
    prob._op = op
    return prob


# ---------------------------------------------------------------------------
# dataset generation and storage


@dataclass(frozen=True)
class GenConfig:
    count: int = 250
    height: int = 32
    width: int = 32
    coils: int = 4
    sigma: float = 0.02
    accel: float = 4.0
    calib: int = 8
    seed: int = 0
    split: tuple[int, int, int] = (200, 25, 25)

    def __post_init__(self):
        if sum(self.split) != self.count:
            raise ValueError(f"split {self.split} does not sum to count {self.count}")


def desk_config(seed: int = 0) -> GenConfig:
    return GenConfig(seed=seed)


def paper_config(seed: int = 0) -> GenConfig:
    """Full-scale preset mirroring the clinical setup; not exercised by tests."""
    return GenConfig(
        count=5480,
        height=320,
        width=256,
        coils=8,
        sigma=0.01,
        accel=12.0,
        calib=16,
        seed=seed,
        split=(4384, 548, 548),
    )


def _problem_paths(root: Path, idx: int) -> dict[str, Path]:
    stem = f"prob{idx:05d}"
    return {name: root / f"{stem}_{name}.dbpt" for name in ("y", "sens", "mask", "truth")}


def generate_dataset(root, config: GenConfig, include_truth: bool = True) -> "Dataset":
    """Create a dataset directory: manifest.json plus per-problem containers."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(config.seed)
    seeds = [int(s) for s in master.integers(0, 2**63, size=config.count)]
    for i, s in enumerate(seeds):
        truth = make_phantom(config.height, config.width, [s, 0])
        sens = make_sensitivities(config.coils, config.height, config.width, [s, 1])
        mask = poisson_disc_mask(
            MaskSpec(config.height, config.width, config.calib, config.accel, [s, 2])
        )
        prob = simulate_measurements(truth, sens, Tensor(mask), config.sigma, [s, 3])
        paths = _problem_paths(root, i)
        save_tensor(paths["y"], prob.y.data)
        save_tensor(paths["sens"], sens.data)
        save_tensor(paths["mask"], mask)
        if include_truth:
            save_tensor(paths["truth"], truth.data)
    manifest = {
        "version": MANIFEST_VERSION,
        "count": config.count,
        "H": config.height,
        "W": config.width,
        "C": config.coils,
        "sigma": config.sigma,
        "accel": config.accel,
        "calib": config.calib,
        "seeds": seeds,
        "split": {"train": config.split[0], "val": config.split[1], "test": config.split[2]},
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return Dataset(root)


def strip_truth(root) -> None:
    """Remove all ground-truth tensors, leaving a measurement-only dataset."""
    for p in Path(root).glob("prob*_truth.dbpt"):
        p.unlink()


class Dataset:
    """Read access to a dataset directory written by :func:`generate_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        mp = self.root / MANIFEST_NAME
        if not mp.is_file():
            raise DataError(f"no {MANIFEST_NAME} in {self.root}")
        try:
            man = json.loads(mp.read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"corrupt manifest in {self.root}: {e}") from e
        for key in ("version", "count", "H", "W", "C", "sigma", "split", "seeds"):
            if key not in man:
                raise DataError(f"manifest in {self.root} is missing '{key}'")
        if man["version"] != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {man['version']}")
        split = man["split"]
        if split["train"] + split["val"] + split["test"] != man["count"]:
            raise DataError("manifest split sizes do not sum to count")
        self.manifest = man
        self.count = int(man["count"])
        self.sigma = float(man["sigma"])

    def indices(self, split: str) -> range:
        sp = self.manifest["split"]
        if split == "train":
            return range(0, sp["train"])
        if split == "val":
            return range(sp["train"], sp["train"] + sp["val"])
        if split == "test":
            return range(sp["train"] + sp["val"], self.count)
        raise ValueError(f"unknown split {split!r}")

    def has_truth(self, idx: int = 0) -> bool:
        return _problem_paths(self.root, idx)["truth"].is_file()

    def problem(self, idx: int) -> Problem:
        if not 0 <= idx < self.count:
            raise IndexError(f"problem index {idx} out of range 0..{self.count - 1}")
        paths = _problem_paths(self.root, idx)
        y = load_tensor(paths["y"])
        sens = load_tensor(paths["sens"])
        mask = load_tensor(paths["mask"])
        truth = Tensor(load_tensor(paths["truth"])) if paths["truth"].is_file() else None
        m = measurement_count(mask, sens.shape[0])
        eps = self.sigma * np.sqrt(m)
        return Problem(Tensor(y), Tensor(sens), Tensor(mask), self.sigma, float(eps), truth)

    def load_split(self, split: str) -> list[Problem]:
        return [self.problem(i) for i in self.indices(split)]

    def accel_of(self, idx: int) -> float:
        return achieved_accel(load_tensor(_problem_paths(self.root, idx)["mask"]))
