"""saliencylab: a desk-scale lab for training small predictors whose
gradient-based explanations stay consistent across data distributions.

The package is organized in layers:

* :mod:`saliencylab.graph` — reverse-mode autodiff on an explicit op graph;
  differentiation appends ordinary nodes, so gradients are re-differentiable.
* :mod:`saliencylab.models` — small MLP / CNN predictors and checkpoints.
* :mod:`saliencylab.explainers` — input gradients and conv saliency maps,
  each with a graph-level variant usable inside loss terms.
* :mod:`saliencylab.objective` — the explanation-consistency training
  objective (task + consistency + sparsity over mixed cross-environment
  pairs).
* :mod:`saliencylab.envdata` — synthetic multi-environment datasets with a
  planted causal signal and an environment-dependent spurious one.
* :mod:`saliencylab.training` — seeded Adam loop for erm / mixup / dre.
* :mod:`saliencylab.metrics` — consistency (DEC), insertion fidelity (iAUC),
  agreement with ground-truth importance (SC), task performance.
* :mod:`saliencylab.cli` — reproducible pipelines and report files.
"""

from .envdata import (
    DatasetBundle,
    EnvironmentDataset,
    GeneratorConfig,
    generate,
    load_bundle,
    rotations,
    save_bundle,
    split_train_val,
)
from .errors import (
    BundleFormatError,
    BundleVersionError,
    DegenerateDistributionError,
    DivergenceError,
    EmptyPairsError,
    GraphInputError,
    NumericError,
    SaliencyLabError,
    UnsupportedModelError,
    UnsupportedOpError,
)
from .explainers import (
    Attribution,
    batch_attributions,
    grad_cam,
    input_gradient,
    rank_features,
)
from .graph import ComputeGraph, derive, evaluate, finite_difference_check
from .metrics import (
    EvalOptions,
    InsertionCurve,
    MetricReport,
    dec_metric,
    evaluate_model,
    iauc,
    iauc_dataset,
    make_reference,
    normalize_dec,
    pooled_env,
    scientific_consistency,
    task_metric,
)
from .models import Model, ModelSpec, build_model, forward, load_params, save_params
from .objective import (
    LossBreakdown,
    MixConfig,
    MixPair,
    consistency_discrepancy,
    dre_loss,
    mixup_inputs,
    pair_batch,
    sample_tau,
    sparsity_penalty,
)
from .training import HyperParams, TrainingHistory, train

__version__ = "0.1.0"

__all__ = [
    "Attribution",
    "BundleFormatError",
    "BundleVersionError",
    "ComputeGraph",
    "DatasetBundle",
    "DegenerateDistributionError",
    "DivergenceError",
    "EmptyPairsError",
    "EnvironmentDataset",
    "EvalOptions",
    "GeneratorConfig",
    "GraphInputError",
    "HyperParams",
    "InsertionCurve",
    "LossBreakdown",
    "MetricReport",
    "MixConfig",
    "MixPair",
    "Model",
    "ModelSpec",
    "NumericError",
    "SaliencyLabError",
    "TrainingHistory",
    "UnsupportedModelError",
    "UnsupportedOpError",
    "batch_attributions",
    "build_model",
    "consistency_discrepancy",
    "dec_metric",
    "derive",
    "dre_loss",
    "evaluate",
    "evaluate_model",
    "finite_difference_check",
    "forward",
    "generate",
    "grad_cam",
    "iauc",
    "iauc_dataset",
    "input_gradient",
    "load_bundle",
    "load_params",
    "make_reference",
    "mixup_inputs",
    "normalize_dec",
    "pair_batch",
    "pooled_env",
    "rank_features",
    "rotations",
    "sample_tau",
    "save_bundle",
    "save_params",
    "scientific_consistency",
    "sparsity_penalty",
    "split_train_val",
    "task_metric",
    "train",
]
