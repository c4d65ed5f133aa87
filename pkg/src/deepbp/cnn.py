"""Residual U-Net denoiser built on the tape autodiff ops.

The network maps a complex image stored as an (H, W, 2) real pair to a
denoised image of the same shape. It operates in residual form,

    denoise(x) = x - f_w(x),

so f_w only has to represent the artifact content; the final conv layer
is therefore initialized small (scale 0.1) to start near the identity.
One weight set is shared across all unrolled iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["DenoiserArch", "DenoiserWeights", "init_weights", "denoise", "DESK_ARCH", "PAPER_ARCH"]


@dataclass(frozen=True)
class DenoiserArch:
    """Encoder widths, one per resolution level. Kernels are fixed 3x3."""

    widths: tuple[int, ...] = (16, 32)
    in_channels: int = 2
    final_scale: float = 0.1

    def __post_init__(self):
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")

    @property
    def levels(self) -> int:
        return len(self.widths)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...], tuple[int, ...]]]:
        """(name, kernel shape, bias shape) for every conv, in forward order."""
        ws = self.widths
        cin = self.in_channels
        shapes = []
        prev = cin
        for i, w in enumerate(ws, start=1):
            shapes.append((f"enc{i}", (w, prev, 3, 3), (w,)))
            prev = w
        shapes.append(("bott", (ws[-1], ws[-1], 3, 3), (ws[-1],)))
        prev = ws[-1]
        for i in range(len(ws), 0, -1):
            shapes.append((f"dec{i}", (ws[i - 1], prev + ws[i - 1], 3, 3), (ws[i - 1],)))
            prev = ws[i - 1]
        shapes.append(("out", (cin, ws[0], 3, 3), (cin,)))
        return shapes


DESK_ARCH = DenoiserArch(widths=(16, 32))
PAPER_ARCH = DenoiserArch(widths=(64, 128, 256))


@dataclass
class DenoiserWeights:
    arch: DenoiserArch
    params: dict[str, Tensor]

    def items(self):
        return self.params.items()

    def param(self, name: str) -> Tensor:
        return self.params[name]

    def replace(self, updates: dict[str, np.ndarray]) -> "DenoiserWeights":
        new = {k: (Tensor(updates[k], requires_grad=True) if k in updates else v)
               for k, v in self.params.items()}
        return DenoiserWeights(self.arch, new)


def init_weights(arch: DenoiserArch, seed) -> DenoiserWeights:
    """He-normal kernels, std sqrt(2 / (C_in * 9)); zero biases.

    The output conv is scaled by arch.final_scale so the residual branch
    starts close to zero.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, kshape, bshape in arch.layer_shapes():
        fan_in = kshape[1] * kshape[2] * kshape[3]
        k = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=kshape)
        if name == "out":
            k = k * arch.final_scale
        params[f"{name}_w"] = Tensor(k, requires_grad=True)
        params[f"{name}_b"] = Tensor(np.zeros(bshape), requires_grad=True)
    return DenoiserWeights(arch, params)


def _conv_relu(x: Tensor, weights: DenoiserWeights, name: str) -> Tensor:
    return ad.relu(ad.conv2d(x, weights.param(f"{name}_w"), weights.param(f"{name}_b")))


def denoise(x: Tensor, weights: DenoiserWeights) -> Tensor:
    """Apply the residual denoiser to an (H, W, 2) image."""
    arch = weights.arch
    h, w = x.shape[0], x.shape[1]
    factor = 2 ** arch.levels
    if h % factor or w % factor:
        raise ValueError(
            f"denoise: {arch.levels} pooling levels need extents divisible by "
            f"{factor}, got {h}x{w}"
        )
    t = ad.hwc_to_chw(x)
    skips = []
    for i in range(1, arch.levels + 1):
        t = _conv_relu(t, weights, f"enc{i}")
        skips.append(t)
        t = ad.avg_pool2(t)
    t = _conv_relu(t, weights, "bott")
    for i in range(arch.levels, 0, -1):
        t = ad.upsample_nearest2(t)
        t = ad.concat_channels([t, skips[i - 1]])
        t = _conv_relu(t, weights, f"dec{i}")
    t = ad.conv2d(t, weights.param("out_w"), weights.param("out_b"))
    return ad.sub(x, ad.chw_to_hwc(t))
