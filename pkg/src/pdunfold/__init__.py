"""Unrolled primal-dual proximal network for image restoration.

The package restores blurred, noisy images by unfolding a convergent
primal-dual splitting scheme into a fixed-depth network whose step sizes
and analysis operators are learned from data with fully analytic
gradients.  A reference convex solver, a degradation and patch pipeline,
and a CLI round out the toolbox.
"""

__version__ = "0.1.0"

from ._kernels import available_backends, get_backend_name, set_backend
from .backprop import (Adjoint, GradCheckReport, ParamGrads, gradient_check,
                       layer_backward, loss_and_grad, network_backward)
from .cp import (CPProblem, CPSettings, StepSizeError, cp_iterate, cp_solve,
                 difference_matrix_1d, objective, operator_norm,
                 tv_analysis_operator)
from .linops import CirculantOp, Resolvent, build_circulant, uniform_kernel
from .network import (FeatureDesign, LayerCache, LayerParams, NetworkParams,
                      build_feature_operator, layer_forward, load_checkpoint,
                      network_forward, save_checkpoint)
from .prox import (ProxFamily, prox_l1, prox_l1_conjugate,
                   soft_threshold_dsigma, subgradient_masks)
from .imaging import (DegradationSpec, ImageTensor, PatchPairSet,
                      build_pair_set, degrade, degrade_patches,
                      extract_patches, list_images, load_image, psnr,
                      read_pgm, restore, synthetic_image, write_image,
                      write_pgm)
from .training import (GradientError, TrainConfig, TrainState, init_network,
                       init_state, load_state, save_state, train, train_step)

__all__ = [
    "__version__",
    "available_backends", "get_backend_name", "set_backend",
    "Adjoint", "GradCheckReport", "ParamGrads", "gradient_check",
    "layer_backward", "loss_and_grad", "network_backward",
    "CPProblem", "CPSettings", "StepSizeError", "cp_iterate", "cp_solve",
    "difference_matrix_1d", "objective", "operator_norm",
    "tv_analysis_operator",
    "CirculantOp", "Resolvent", "build_circulant", "uniform_kernel",
    "FeatureDesign", "LayerCache", "LayerParams", "NetworkParams",
    "build_feature_operator", "layer_forward", "load_checkpoint",
    "network_forward", "save_checkpoint",
    "ProxFamily", "prox_l1", "prox_l1_conjugate", "soft_threshold_dsigma",
    "subgradient_masks",
    "DegradationSpec", "ImageTensor", "PatchPairSet", "build_pair_set",
    "degrade", "degrade_patches", "extract_patches", "list_images",
    "load_image", "psnr", "read_pgm", "restore", "synthetic_image",
    "write_image", "write_pgm",
    "GradientError", "TrainConfig", "TrainState", "init_network",
    "init_state", "load_state", "save_state", "train", "train_step",
]
