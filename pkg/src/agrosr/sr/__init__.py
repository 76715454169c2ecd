"""Super-resolution learners, paired-patch datasets and similarity metrics."""

from .convnet import ConvNet, LayerSpec, default_arch, validate_arch
from .metrics import SimilarityReport, psnr_from_mse, similarity, ssim_grid
from .models import (
    MODEL_KINDS,
    Normalization,
    SRModel,
    apply_sr,
    fit_conv_net,
    fit_interp_baseline,
    fit_patch_linear,
    load_model,
    save_model,
    write_loss_curve,
)
from .pairs import PairDataset, SRTaskSpec, make_training_pairs, pairs_from_stacks

__all__ = [
    "ConvNet", "LayerSpec", "default_arch", "validate_arch",
    "SimilarityReport", "psnr_from_mse", "similarity", "ssim_grid",
    "MODEL_KINDS", "Normalization", "SRModel", "apply_sr", "fit_conv_net", "fit_interp_baseline",
    "fit_patch_linear", "load_model", "save_model", "write_loss_curve",
    "PairDataset", "SRTaskSpec", "make_training_pairs", "pairs_from_stacks",
]
