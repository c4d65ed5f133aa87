"""Variable-density Poisson-disc sampling masks with a calibration region.

Masks live in the centered frequency layout (DC at (H/2, W/2)), matching
the FFT convention used everywhere else. Generation is dart-throwing with
rejection: a candidate is accepted when it keeps at least the local
minimum distance r(k) = r0 * (1 + slope * k / k_max) from every accepted
sample, with k the distance from the k-space center. r0 is found by
bisection so the achieved acceleration lands within +/-15% of the target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MaskSpec", "poisson_disc_mask", "achieved_accel", "ACCEL_TOLERANCE", "DENSITY_SLOPE"]

ACCEL_TOLERANCE = 0.15
DENSITY_SLOPE = 2.0
_BISECT_STEPS = 60


@dataclass(frozen=True)
class MaskSpec:
    height: int
    width: int
    calib: int
    target_accel: float
    seed: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("mask extents must be positive")
        if not 0 <= self.calib <= min(self.height, self.width):
            raise ValueError(f"calib {self.calib} exceeds grid {self.height}x{self.width}")
        if self.target_accel < 1.0:
            raise ValueError(f"target acceleration must be >= 1, got {self.target_accel}")


def _calib_slices(spec: MaskSpec):
    r0 = spec.height // 2 - spec.calib // 2
    c0 = spec.width // 2 - spec.calib // 2
    return slice(r0, r0 + spec.calib), slice(c0, c0 + spec.calib)


def _candidates(spec: MaskSpec):
    """All grid points outside the calibration block, in seeded random order."""
    h, w = spec.height, spec.width
    rs, cs = _calib_slices(spec)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    in_calib = (ii >= rs.start) & (ii < rs.stop) & (jj >= cs.start) & (jj < cs.stop)
    pts = np.stack([ii[~in_calib], jj[~in_calib]], axis=1).astype(np.float64)
    rng = np.random.default_rng(spec.seed)
    pts = pts[rng.permutation(len(pts))]
    center = np.array([h / 2.0, w / 2.0])
    k = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])
    k_max = np.hypot(max(center[0], h - 1 - center[0]), max(center[1], w - 1 - center[1]))
    profile = 1.0 + DENSITY_SLOPE * k / max(k_max, 1.0)
    return pts, profile


def _throw(pts: np.ndarray, profile: np.ndarray, r0: float) -> np.ndarray:
    """Dart-throwing pass; returns indices of accepted candidates."""
    n_cand = len(pts)
    acc = np.empty((n_cand, 2))
    acc_r = np.empty(n_cand)
    kept = np.empty(n_cand, dtype=np.intp)
    n = 0
    for i in range(n_cand):
        r_i = r0 * profile[i]
        if n:
            d2 = (acc[:n, 0] - pts[i, 0]) ** 2 + (acc[:n, 1] - pts[i, 1]) ** 2
            rmin = np.minimum(acc_r[:n], r_i)
            if np.any(d2 < rmin * rmin):
                continue
        acc[n] = pts[i]
        acc_r[n] = r_i
        kept[n] = i
        n += 1
    return kept[:n]


def poisson_disc_mask(spec: MaskSpec) -> np.ndarray:
    """Binary (H, W) mask; deterministic per (spec, seed).

    Raises ValueError when no disc radius reaches the target acceleration
    within the +/-15% band.
    """
    h, w = spec.height, spec.width
    mask = np.zeros((h, w))
    rs, cs = _calib_slices(spec)
    mask[rs, cs] = 1.0
    if spec.target_accel == 1.0:
        mask[:] = 1.0
        return mask

    pts, profile = _candidates(spec)
    total = h * w
    lo_band = spec.target_accel * (1.0 - ACCEL_TOLERANCE)
    hi_band = spec.target_accel * (1.0 + ACCEL_TOLERANCE)

    lo, hi = 0.0, 2.0 * max(h, w)
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        kept = _throw(pts, profile, mid)
        ones = spec.calib * spec.calib + len(kept)
        accel = total / ones
        if lo_band <= accel <= hi_band:
            out = mask.copy()
            sel = pts[kept].astype(np.intp)
            out[sel[:, 0], sel[:, 1]] = 1.0
            return out
        if accel < spec.target_accel:
            lo = mid
        else:
            hi = mid
    raise ValueError(
        f"cannot reach acceleration {spec.target_accel} within +/-{ACCEL_TOLERANCE:.0%} "
        f"on a {h}x{w} grid with calib {spec.calib}"
    )


def achieved_accel(mask: np.ndarray) -> float:
    mask = np.asarray(mask)
    ones = np.count_nonzero(mask)
    if ones == 0:
        raise ValueError("achieved_accel: mask has no sampled points")
    return mask.size / ones
