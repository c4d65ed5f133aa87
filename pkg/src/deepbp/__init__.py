"""Constrained unrolled reconstruction for simulated multi-coil Fourier
imaging: a tape-based autodiff core, a SENSE-style forward operator, a
residual U-Net denoiser, and an ADMM data-consistency layer with a hard
measurement-ball constraint, trainable with or without ground truth.
"""

from . import autodiff
from .autodiff import Tape, Tensor
from .cnn import DESK_ARCH, PAPER_ARCH, DenoiserArch, DenoiserWeights, denoise, init_weights
from .data import (
    Dataset,
    GenConfig,
    Problem,
    desk_config,
    generate_dataset,
    make_phantom,
    make_sensitivities,
    paper_config,
    simulate_measurements,
    strip_truth,
)
from .evaluation import (
    compare_methods,
    export_error_map,
    export_image,
    nrmse,
    sweep_unrolls,
    write_results,
)
from .io import DataError, load_tensor, save_tensor
from .linops import LinOp, SenseOp, complex_dot, gram_plus_identity, measurement_count
from .recon import (
    DCState,
    UnrolledModel,
    conjugate_gradient,
    dbp_forward,
    dc_layer,
    epsilon_from_sigma,
    l1_wavelet_bp,
    l2proj,
    modl_forward,
    zero_filled,
)
from .sampling import MaskSpec, achieved_accel, poisson_disc_mask
from .training import (
    Adam,
    NumericError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    supervised_loss,
    train,
    unsupervised_loss,
)

__version__ = "0.1.0"
