"""Solvers: CG, the hard l2-ball data-consistency layer, the unrolled
network, a soft (penalized) variant, and classical baselines.

The unrolled reconstruction alternates N1 times between a learned
denoiser r_k = denoise(x_{k-1}) and the constrained proximal step

    x_k = argmin_x  0.5 ||x - r_k||^2   s.t.  ||y - A x|| <= eps,

solved with N2 ADMM iterations whose x-update runs N3 CG iterations on
(rho A*A + I) x = rho A*(z - u) + r_k. Iteration counts are fixed while
a tape is active so the recorded graph has a static shape.

Dual update: u <- u + Ax - z. The scaled-dual form with "- z" is the
one that converges; the "+ z" variant is kept behind a debug flag
(legacy_dual_sign) for comparison only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cnn import DenoiserWeights, denoise
from .data import Problem
from .linops import LinOp, gram_plus_identity

__all__ = [
    "UnrolledModel",
    "DCState",
    "epsilon_from_sigma",
    "l2proj",
    "conjugate_gradient",
    "dc_layer",
    "dbp_forward",
    "modl_forward",
    "haar2_forward",
    "haar2_inverse",
    "soft_threshold",
    "soft_threshold_complex",
    "l1_wavelet_bp",
    "zero_filled",
]

CG_INFERENCE_TOL = 1e-9


def epsilon_from_sigma(sigma: float, m: int) -> float:
    """Constraint radius sigma * sqrt(M) for M complex measurements."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if m < 1:
        raise ValueError(f"measurement count must be >= 1, got {m}")
    return float(sigma) * float(np.sqrt(m))


def l2proj(v: Tensor, eps: float) -> Tensor:
    """Project v onto the l2-ball of radius eps.

    Inside the ball this is the identity; outside, v is scaled by
    eps / ||v||, built from taped ops so the quotient-rule backward is
    automatic.
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    nrm = float(np.linalg.norm(v.data))
    if nrm <= eps:
        return v
    norm_t = ad.sqrt(ad.dot(v, v))
    factor = ad.div(ad.as_tensor(eps), norm_t)
    return ad.mul(v, factor)


def conjugate_gradient(
    apply_op: Callable[[Tensor], Tensor],
    b: Tensor,
    x0: Tensor | None = None,
    iters: int = 10,
) -> Tensor:
    """CG for symmetric positive definite apply_op, differentiable by unrolling.

    With a tape active the loop runs exactly `iters` iterations; without
    one it may stop early once the relative residual drops below 1e-9.
    If p^T A p <= 0 (breakdown; impossible for SPD in exact arithmetic)
    the current iterate is returned.
    """
    taped = ad.active_tape() is not None
    bnorm = float(np.linalg.norm(b.data))
    x = x0 if x0 is not None else ad.zeros(b.shape)
    r = ad.sub(b, apply_op(x))
    p = r
    rs = ad.dot(r, r)
    for _ in range(int(iters)):
        if not taped and np.sqrt(rs.item()) <= CG_INFERENCE_TOL * bnorm:
            break
        ap = apply_op(p)
        pap = ad.dot(p, ap)
        if pap.item() <= 0:
            break
        alpha = ad.div(rs, pap)
        x = ad.add(x, ad.mul(p, alpha))
        r = ad.sub(r, ad.mul(ap, alpha))
        rs_new = ad.dot(r, r)
        beta = ad.div(rs_new, rs)
        p = ad.add(r, ad.mul(p, beta))
        rs = rs_new
    return x


@dataclass
class UnrolledModel:
    """Denoiser weights plus the trainable log of the coupling scalar.

    log_rho holds log(rho) for the constrained network and log(lambda)
    for the penalized variant; exponentiation keeps the scalar positive.
    """

    weights: DenoiserWeights
    log_rho: Tensor
    n1: int = 5
    n2: int = 4
    n3: int = 6
    reinit_state: bool = False
    legacy_dual_sign: bool = False

    def rho(self) -> Tensor:
        return ad.exp(self.log_rho)

    def named_params(self) -> list[tuple[str, Tensor]]:
        return [("log_rho", self.log_rho)] + list(self.weights.items())

    def with_params(self, params: dict[str, Tensor]) -> "UnrolledModel":
        weights = DenoiserWeights(
            self.weights.arch, {k: params[k] for k in self.weights.params}
        )
        return replace(self, weights=weights, log_rho=params["log_rho"])


@dataclass
class DCState:
    """ADMM iterates carried across unrolls: primal x, slack z, dual u."""

    x: Tensor
    z: Tensor
    u: Tensor


def _initial_state(op: LinOp, x: Tensor) -> DCState:
    return DCState(x, op.forward(x), ad.zeros(op.oshape))


def _admm_ball(
    r_k: Tensor,
    op: LinOp,
    y: Tensor,
    eps: float,
    rho: Tensor,
    n2: int,
    n3: int,
    state: DCState,
    legacy_dual_sign: bool = False,
) -> tuple[Tensor, DCState]:
    """N2 ADMM iterations for min 0.5||x - r_k||^2 s.t. ||y - Ax|| <= eps."""
    x, z, u = state.x, state.z, state.u
    for _ in range(int(n2)):
        rhs = ad.add(ad.mul(op.adjoint(ad.sub(z, u)), rho), r_k)
        x = conjugate_gradient(
            lambda t: gram_plus_identity(op, t, rho), rhs, x0=x, iters=n3
        )
        ax = op.forward(x)
        z = ad.add(y, l2proj(ad.sub(ad.add(ax, u), y), eps))
        if legacy_dual_sign:
            u = ad.add(u, ad.add(ax, z))
        else:
            u = ad.add(u, ad.sub(ax, z))
    return x, DCState(x, z, u)


def dc_layer(
    r_k: Tensor, problem: Problem, model: UnrolledModel, state: DCState
) -> tuple[Tensor, DCState]:
    """Constrained proximal step toward r_k, warm-started from state."""
    return _admm_ball(
        r_k,
        problem.operator(),
        problem.y,
        problem.epsilon,
        model.rho(),
        model.n2,
        model.n3,
        state,
        legacy_dual_sign=model.legacy_dual_sign,
    )


def dbp_forward(problem: Problem, model: UnrolledModel, n1: int | None = None) -> Tensor:
    """Unrolled reconstruction: N1 alternations of denoiser and dc_layer.

    x0 = A*y; z0 = A x0; u0 = 0. (z, u) are carried across unrolls unless
    model.reinit_state is set. n1 overrides model.n1 at inference so the
    unroll count can be swept without retraining.
    """
    op = problem.operator()
    x = op.adjoint(problem.y)
    state = _initial_state(op, x)
    for _ in range(int(n1 if n1 is not None else model.n1)):
        r = denoise(x, model.weights)
        if model.reinit_state:
            state = _initial_state(op, x)
        x, state = _admm_ball(
            r,
            op,
            problem.y,
            problem.epsilon,
            model.rho(),
            model.n2,
            model.n3,
            state,
            legacy_dual_sign=model.legacy_dual_sign,
        )
    return x


def modl_forward(problem: Problem, model: UnrolledModel, n1: int | None = None) -> Tensor:
    """Penalized variant: x_k solves (A*A + lambda I) x = A*y + lambda r_k.

    model.log_rho stores log(lambda). Each data-consistency solve gets a
    CG budget of N2*N3 iterations, matching the inner-step count of the
    constrained layer.
    """
    op = problem.operator()
    aty = op.adjoint(problem.y)
    lam = model.rho()
    iters = int(model.n2) * int(model.n3)
    x = aty

    def apply_op(t: Tensor) -> Tensor:
        return ad.add(op.normal(t), ad.mul(t, lam))

    for _ in range(int(n1 if n1 is not None else model.n1)):
        r = denoise(x, model.weights)
        rhs = ad.add(aty, ad.mul(r, lam))
        x = conjugate_gradient(apply_op, rhs, x0=r, iters=iters)
    return x


def zero_filled(problem: Problem) -> Tensor:
    """Adjoint reconstruction A*y, the naive baseline."""
    return problem.operator().adjoint(problem.y)


# ---------------------------------------------------------------------------
# orthonormal Haar wavelets and the l1 baseline


def _haar_level(block: np.ndarray) -> np.ndarray:
    s = np.sqrt(0.5)
    e, o = block[:, 0::2], block[:, 1::2]
    block = np.concatenate([(e + o) * s, (e - o) * s], axis=1)
    e, o = block[0::2, :], block[1::2, :]
    return np.concatenate([(e + o) * s, (e - o) * s], axis=0)


def _haar_level_inv(block: np.ndarray) -> np.ndarray:
    s = np.sqrt(0.5)
    h = block.shape[0] // 2
    lo, hi = block[:h, :], block[h:, :]
    rows = np.empty_like(block)
    rows[0::2, :] = (lo + hi) * s
    rows[1::2, :] = (lo - hi) * s
    w = block.shape[1] // 2
    lo, hi = rows[:, :w], rows[:, w:]
    out = np.empty_like(block)
    out[:, 0::2] = (lo + hi) * s
    out[:, 1::2] = (lo - hi) * s
    return out


def _check_levels(h: int, w: int, levels: int) -> None:
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if h % (1 << levels) or w % (1 << levels):
        raise ValueError(f"extents {h}x{w} not divisible by 2^{levels}")


def haar2_forward(x: np.ndarray, levels: int) -> np.ndarray:
    """Multi-level orthonormal 2-D Haar analysis of an (H, W) array."""
    h, w = x.shape
    _check_levels(h, w, levels)
    out = np.array(x, dtype=float)
    for _ in range(levels):
        out[:h, :w] = _haar_level(out[:h, :w])
        h //= 2
        w //= 2
    return out


def haar2_inverse(c: np.ndarray, levels: int) -> np.ndarray:
    h, w = c.shape
    _check_levels(h, w, levels)
    out = np.array(c, dtype=float)
    hs = [h >> k for k in range(levels)]
    ws = [w >> k for k in range(levels)]
    for hh, ww in zip(reversed(hs), reversed(ws)):
        out[:hh, :ww] = _haar_level_inv(out[:hh, :ww])
    return out


def soft_threshold(x: np.ndarray, tau: float) -> np.ndarray:
    """sign(x) * max(|x| - tau, 0), elementwise on real arrays."""
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def soft_threshold_complex(pair: np.ndarray, tau: float) -> np.ndarray:
    """Magnitude shrinkage of an (..., 2) real-pair array."""
    mag = np.sqrt(pair[..., 0] ** 2 + pair[..., 1] ** 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(mag > 0, np.maximum(mag - tau, 0.0) / np.where(mag > 0, mag, 1.0), 0.0)
    return pair * scale[..., None]


def _haar_shrink(x: Tensor, tau: float, levels: int) -> Tensor:
    """W^T soft(W x, tau) with complex-magnitude shrinkage of coefficients."""
    cr = haar2_forward(x.data[..., 0], levels)
    ci = haar2_forward(x.data[..., 1], levels)
    shrunk = soft_threshold_complex(np.stack([cr, ci], axis=-1), tau)
    out_r = haar2_inverse(shrunk[..., 0], levels)
    out_i = haar2_inverse(shrunk[..., 1], levels)
    return Tensor(np.stack([out_r, out_i], axis=-1))


def l1_wavelet_bp(
    problem: Problem,
    tau: float,
    n1: int = 25,
    n2: int = 4,
    n3: int = 6,
    levels: int = 3,
    rho: float = 1.0,
) -> Tensor:
    """Classical sparsity baseline: the unrolled scheme with the denoiser
    replaced by Haar soft-thresholding. Runs untaped."""
    h, w = problem.mask.shape
    _check_levels(h, w, levels)
    op = problem.operator()
    x = op.adjoint(problem.y)
    state = _initial_state(op, x)
    rho_t = ad.as_tensor(float(rho))
    for _ in range(int(n1)):
        r = _haar_shrink(x, tau, levels)
        x, state = _admm_ball(
            r, op, problem.y, problem.epsilon, rho_t, n2, n3, state
        )
    return x
