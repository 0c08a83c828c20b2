"""Gradient-reversal domain adaptation toolkit.

Small numpy-backed stack for training a dual-branch classifier that learns
domain-invariant features from labeled source images and unlabeled target
images, plus the surrounding plumbing: stain normalization, integrated
gradients attribution, metrics, and a deterministic CLI.
"""

import os as _os

# GRLA_THREADS caps BLAS/OpenMP parallelism; it must take effect before numpy
# initializes its thread pools, hence before any other import here.
_threads = _os.environ.get("GRLA_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from . import tensor
from .tensor import (
    Tensor,
    ShapeError,
    NonFiniteError,
    GraphError,
    no_grad,
    using_dtype,
    set_default_dtype,
    backward,
    clip_grad_norm,
    gradient_reversal,
)
from .model import (
    DannConfig,
    DannModel,
    build_dann,
    desk_config,
    forward,
    label_logits,
    predict_proba,
)
from .objectives import (
    LossBreakdown,
    masked_cross_entropy,
    domain_bce,
    total_loss,
    lambda_value,
    lr_value,
    LAMBDA_KINDS,
)
from .data import (
    LabeledImageSet,
    SplitSpec,
    ShiftSpec,
    DomainRecipe,
    load_image_dataset,
    split,
    synth_shifted_pair,
    synth_domain,
    density_oracle,
    mean_image_baseline,
)
from .trainer import (
    TrainConfig,
    RunManifest,
    DivergenceError,
    CheckpointError,
    train,
    evaluate,
    sgd_step,
    save_checkpoint,
    load_checkpoint,
)
from .stain import (
    StainStats,
    DegenerateStainError,
    compute_stain_stats,
    normalize_image,
    normalize_dataset,
)
from .attribution import AttributionMap, integrated_gradients, render_attribution
from .evaluation import (
    MetricsReport,
    CrossDomainMatrix,
    VerificationReport,
    compute_metrics,
    ensemble_predict,
    cross_domain_eval,
    verify_no_leakage,
)

__version__ = "0.1.0"
