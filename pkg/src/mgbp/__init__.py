"""Multigrid back-projection super-resolution and activation-freeze filter analysis."""

from .backprojection import (
    ConvergenceTrace,
    LevelStack,
    OperatorPair,
    bp_step,
    certify,
    classic_operators,
    ibp,
    mgbp,
    mgbp_generic,
    mismatch_error,
    network_operators,
    unfold_schedule,
)
from .convnet import Activation, Conv, ConvNet, forward, load_network, save_network, toy_network
from .freeze import effective_filter, effective_residual, explicit_fr, filter_atlas, freeze, freeze_equivalence
from .metrics import multiscale_l1, psnr, ssim
from .resample import (
    ResampleSpec,
    SparseOperator,
    bicubic_kernel,
    contraction_norm,
    downscale,
    gaussian_kernel,
    operator_matrix,
    upscale,
)
from .tensor import BoundaryRule, Kernel, convolve, devectorize, read_image, vectorize, write_image

__version__ = "0.1.0"
