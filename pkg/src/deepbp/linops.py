"""Matrix-free linear operators for multi-coil Fourier imaging.

The forward model stacks per-coil operators: mix the image with each coil
sensitivity profile, Fourier transform, and keep only the sampled
frequencies. Sensitivities are expected pre-normalized so that
sum_c |S_c(p)|^2 = 1 at every pixel, which makes the fully sampled
noiseless inverse exact.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["LinOp", "SenseOp", "gram_plus_identity", "complex_dot", "measurement_count"]


class LinOp:
    """Matrix-free linear operator with forward and adjoint actions."""

    ishape: tuple[int, ...]
    oshape: tuple[int, ...]

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def adjoint(self, y: Tensor) -> Tensor:
        raise NotImplementedError

    def normal(self, x: Tensor) -> Tensor:
        """A* A x."""
        return self.adjoint(self.forward(x))


class SenseOp(LinOp):
    """Multi-coil sampled Fourier operator.

    Per coil c the forward action is mask * fft2(S_c * x) on an (H, W, 2)
    image, stacking coils into (C, H, W, 2). The adjoint sums
    conj(S_c) * ifft2(mask * y_c) over coils.
    """

    def __init__(self, sens: Tensor, mask: Tensor):
        sens = ad.as_tensor(sens)
        mask = ad.as_tensor(mask)
        if sens.data.ndim != 4 or sens.shape[-1] != 2:
            raise ValueError(f"SenseOp: sensitivities must be (C, H, W, 2), got {sens.shape}")
        c, h, w, _ = sens.shape
        if mask.shape != (h, w):
            raise ValueError(f"SenseOp: mask must be ({h}, {w}), got {mask.shape}")
        md = mask.data
        if not np.all((md == 0.0) | (md == 1.0)):
            raise ValueError("SenseOp: mask entries must be exactly 0 or 1")
        self.sens = sens
        self.conj_sens = ad.complex_conj(sens)
        self.mask = mask
        # mask expanded over coils and the real/imag pair, as a constant
        self._mask_full = Tensor(np.broadcast_to(md[None, :, :, None], (c, h, w, 2)).copy())
        self.coils = c
        self.ishape = (h, w, 2)
        self.oshape = (c, h, w, 2)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape != self.ishape:
            raise ValueError(f"SenseOp.forward: expected image {self.ishape}, got {x.shape}")
        xc = ad.broadcast_leading(x, self.coils)
        k = ad.fft2_centered(ad.complex_mul(self.sens, xc))
        return ad.mul(k, self._mask_full)

    def adjoint(self, y: Tensor) -> Tensor:
        if y.shape != self.oshape:
            raise ValueError(f"SenseOp.adjoint: expected k-space {self.oshape}, got {y.shape}")
        img = ad.fft2_centered(ad.mul(y, self._mask_full), inverse=True)
        return ad.sum_leading(ad.complex_mul(self.conj_sens, img))


def gram_plus_identity(op: LinOp, x: Tensor, rho: Tensor) -> Tensor:
    """rho * A*(A x) + x, the left-hand operator of the ADMM x-update.

    rho may be a trainable scalar tensor; it must be positive.
    """
    rho_val = rho.item() if isinstance(rho, Tensor) else float(rho)
    if not rho_val > 0:
        raise ValueError(f"gram_plus_identity: rho must be positive, got {rho_val}")
    rho = ad.as_tensor(rho)
    return ad.add(ad.mul(op.normal(x), rho), x)


def measurement_count(mask: np.ndarray | Tensor, coils: int) -> int:
    """Number of complex measurements M = C * (ones in the mask)."""
    md = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return int(coils) * int(np.count_nonzero(md))


def complex_dot(a: np.ndarray, b: np.ndarray) -> complex:
    """<a, b> with conjugation on b, over (..., 2) real-pair arrays."""
    ac = a[..., 0] + 1j * a[..., 1]
    bc = b[..., 0] + 1j * b[..., 1]
    return complex(np.vdot(bc, ac))  # vdot conjugates its first argument
