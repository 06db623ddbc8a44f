"""Evaluation suite: cross-distribution explanation consistency, insertion
fidelity, agreement with known feature importance, and task performance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DegenerateDistributionError, EmptyPairsError, GraphInputError
from .explainers import batch_attributions, rank_features
from .graph import as_tensor
from .models import Model, forward
from .objective import MixConfig, consistency_discrepancy, sample_tau

IAUC_SCORE_FLOOR = 1e-6


def _target_score(outputs, target):
    """Insertion-curve score: softmax probability of the target class for
    classifiers, the raw output for single-output models.

    Softmax logits are only identified up to a shared additive shift, so the
    raw logit's sign carries no meaning; the probability is shift-invariant
    and bounded, which keeps the per-sample normalization stable.
    """
    outputs = np.atleast_2d(outputs)
    if outputs.shape[-1] == 1:
        return outputs[..., 0]
    shifted = outputs - outputs.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e[..., target] / e.sum(axis=-1)


@dataclass
class InsertionCurve:
    fractions: np.ndarray   # ascending in [0, 1], ending at 1.0
    scores: np.ndarray      # normalized target score per fraction


@dataclass
class MetricReport:
    task: str
    dec_raw: float
    iauc: float
    sc: float
    accuracy: float = None          # classification only
    mae_residual: float = None      # regression only
    dec_relative: float = None      # filled by normalize_dec
    n_samples: int = 0
    n_pairs: int = 0
    iauc_skipped: int = 0
    seed: int = 0


def task_metric(model: Model, env) -> float:
    """Accuracy for classifiers, mean absolute residual for regressors."""
    pred = forward(model, env.x)
    if model.spec.output_dim > 1:
        return float(np.mean(np.argmax(pred, axis=1) == env.y))
    return float(np.mean(np.abs(pred[:, 0] - env.y)))


def _dec_pairs(id_env, ood_env, n_pairs, classification, delta, rng):
    """Index pairs (ood idx, id idx) under the training pairing rule."""
    pairs = []
    if classification:
        by_label = {}
        for i, y in enumerate(id_env.y):
            by_label.setdefault(int(y), []).append(i)
        candidates = [i for i, y in enumerate(ood_env.y) if int(y) in by_label]
        if not candidates:
            raise EmptyPairsError("no shared labels between the environments")
        for _ in range(n_pairs):
            o = candidates[rng.integers(len(candidates))]
            ids = by_label[int(ood_env.y[o])]
            pairs.append((o, ids[rng.integers(len(ids))]))
    else:
        order = np.argsort(id_env.y)
        sorted_y = id_env.y[order]
        tries = 0
        while len(pairs) < n_pairs and tries < 20 * n_pairs:
            tries += 1
            o = int(rng.integers(len(ood_env)))
            lo = np.searchsorted(sorted_y, ood_env.y[o] - delta)
            hi = np.searchsorted(sorted_y, ood_env.y[o] + delta, side="right")
            if hi <= lo:
                continue
            pairs.append((o, int(order[lo + rng.integers(hi - lo)])))
        if not pairs:
            raise EmptyPairsError("no target-proximal pairs within delta")
    return pairs


def dec_metric(model: Model, id_env, ood_env, n_pairs, mix_config: MixConfig, rng):
    """Mean explanation-consistency discrepancy over OOD/ID mixed pairs."""
    if len(id_env) == 0 or len(ood_env) == 0 or n_pairs < 1:
        raise GraphInputError("dec_metric needs nonempty environments and n_pairs >= 1")
    classification = model.spec.output_dim > 1
    delta = mix_config.delta
    if not classification and delta is None:
        std = float(np.std(id_env.y))
        delta = 0.1 * std if std > 0 else 0.1
    pairs = _dec_pairs(id_env, ood_env, n_pairs, classification, delta, rng)

    xo = np.stack([ood_env.x[o] for o, _ in pairs])
    xi = np.stack([id_env.x[i] for _, i in pairs])
    taus = np.array([sample_tau(mix_config.alpha, rng) for _ in pairs])
    shape = (-1,) + (1,) * (xo.ndim - 1)
    mixed = taus.reshape(shape) * xo + (1 - taus).reshape(shape) * xi
    if classification:
        targets = np.array([int(ood_env.y[o]) for o, _ in pairs])
    else:
        targets = np.zeros(len(pairs), dtype=np.int64)

    method = mix_config.explainer
    g_o = batch_attributions(model, xo, targets, method)
    g_i = batch_attributions(model, xi, targets, method)
    g_m = batch_attributions(model, mixed, targets, method)
    tshape = (-1,) + (1,) * (g_o.ndim - 1)
    mixed_expl = taus.reshape(tshape) * g_o + (1 - taus).reshape(tshape) * g_i
    vals = [consistency_discrepancy(g_m[p], mixed_expl[p], mix_config.discrepancy)
            for p in range(len(pairs))]
    return float(np.mean(vals))


def normalize_dec(raw_values, baseline_values):
    """Rescale so the baseline's mean maps to exactly 1.0."""
    baseline = np.atleast_1d(as_tensor(baseline_values))
    base = float(np.mean(baseline))
    if base <= 0:
        raise DegenerateDistributionError("baseline mean DEC must be positive")
    return as_tensor(raw_values) / base


def make_reference(x, kind, feature_means=None):
    """Insertion-curve starting canvas: blurred image or per-feature means."""
    x = as_tensor(x)
    if kind == "blur":
        # sigma 2, truncated at radius 2 (5x5 kernel), reflective padding
        sigma = [0.0] * (x.ndim - 2) + [2.0, 2.0]
        return gaussian_filter(x, sigma=sigma, truncate=1.0, mode="reflect")
    if kind == "feature_mean":
        if feature_means is None:
            raise GraphInputError("feature_mean reference needs training-set means")
        return np.broadcast_to(as_tensor(feature_means), x.shape).copy()
    raise GraphInputError(f"unknown reference kind {kind!r}")


def iauc(model: Model, x, target, attribution, reference, n_steps):
    """Area under the insertion curve for one sample.

    Features are restored from ``x`` onto ``reference`` in descending
    attribution order; the target score is normalized by its full-input value.
    """
    x, reference = as_tensor(x), as_tensor(reference)
    if x.shape != reference.shape or x.shape != model.spec.input_shape:
        raise GraphInputError(
            f"iauc: sample {x.shape}, reference {reference.shape}, "
            f"model input {model.spec.input_shape} must agree")
    if n_steps < 2:
        raise GraphInputError("iauc needs n_steps >= 2")
    full = float(_target_score(forward(model, x)[None], target)[0])
    if full <= IAUC_SCORE_FLOOR:
        raise GraphInputError(
            f"full-input target score {full} at or below {IAUC_SCORE_FLOOR}")
    order = rank_features(attribution)
    d = order.size
    flat_x = x.reshape(-1)
    canvases = []
    fractions = []
    for i in range(n_steps + 1):
        frac = i / n_steps
        k = int(round(frac * d))
        canvas = reference.reshape(-1).copy()
        canvas[order[:k]] = flat_x[order[:k]]
        canvases.append(canvas.reshape(x.shape))
        fractions.append(frac)
    scores = _target_score(forward(model, np.stack(canvases)), target) / full
    fractions = np.array(fractions)
    area = float(np.trapezoid(scores, fractions))
    return area, InsertionCurve(fractions=fractions, scores=scores)


def default_iauc_steps(feature_count):
    return min(int(feature_count), 50)


def iauc_dataset(model: Model, env, reference_kind, feature_means=None,
                 n_samples=None, rng=None, explainer="input_gradient"):
    """Mean insertion area over an environment; targets are the true labels.

    Classification samples the model misclassifies are excluded (insertion
    fidelity is only meaningful for a prediction the curve can recover), as
    are samples whose full-input target score is at or below the floor; both
    count as skipped.  Returns (mean area, n used, n skipped).
    """
    rng = rng if rng is not None else np.random.default_rng()
    idx = np.arange(len(env))
    if n_samples is not None and n_samples < len(env):
        idx = rng.choice(len(env), size=n_samples, replace=False)
    classification = model.spec.output_dim > 1
    targets = env.y[idx].astype(np.int64) if classification else np.zeros(len(idx), np.int64)
    if classification:
        correct = np.argmax(forward(model, env.x[idx]), axis=1) == targets
    else:
        correct = np.ones(len(idx), dtype=bool)
    attrs = batch_attributions(model, env.x[idx], targets, explainer)
    n_steps = default_iauc_steps(int(np.prod(model.spec.input_shape)))
    areas, skipped = [], 0
    for row, i in enumerate(idx):
        if not correct[row]:
            skipped += 1
            continue
        ref = make_reference(env.x[i], reference_kind, feature_means)
        try:
            area, _ = iauc(model, env.x[i], int(targets[row]), attrs[row], ref, n_steps)
        except GraphInputError:
            skipped += 1
            continue
        areas.append(area)
    mean = float(np.mean(areas)) if areas else float("nan")
    return mean, len(areas), skipped


def scientific_consistency(model: Model, env, explainer, true_importance):
    """Cosine similarity between mean |attribution| and known importance."""
    true_importance = as_tensor(true_importance).reshape(-1)
    if not np.any(true_importance):
        raise GraphInputError("true_importance must not be all-zero")
    classification = model.spec.output_dim > 1
    if classification:
        targets = np.argmax(forward(model, env.x), axis=1)
    else:
        targets = np.zeros(len(env), dtype=np.int64)
    attrs = batch_attributions(model, env.x, targets, explainer)
    importance = np.abs(attrs).mean(axis=0).reshape(-1)
    norm = float(np.linalg.norm(importance))
    if norm == 0.0:
        raise DegenerateDistributionError("attribution importance is all-zero")
    return float(importance @ true_importance
                 / (norm * np.linalg.norm(true_importance)))


@dataclass
class EvalOptions:
    n_pairs: int = 128
    n_iauc_samples: int = 128
    mix: MixConfig = field(default_factory=MixConfig)
    seed: int = 0


def pooled_env(envs, env_id="pooled"):
    from .envdata import EnvironmentDataset
    return EnvironmentDataset(env_id=env_id,
                              x=np.concatenate([e.x for e in envs]),
                              y=np.concatenate([e.y for e in envs]))


def evaluate_model(model: Model, bundle, options: EvalOptions = None) -> MetricReport:
    """Full metric sweep of one model against a bundle's test environment."""
    options = options or EvalOptions()
    rng = np.random.default_rng([options.seed, 3])
    classification = bundle.task == "classification"
    id_env = pooled_env(bundle.train_envs)
    test = bundle.test_env

    dec = dec_metric(model, id_env, test, options.n_pairs, options.mix, rng)
    if model.spec.kind == "cnn":
        ref_kind, means = "blur", None
    else:
        ref_kind, means = "feature_mean", id_env.x.mean(axis=0)
    iauc_mean, used, skipped = iauc_dataset(
        model, test, ref_kind, feature_means=means,
        n_samples=options.n_iauc_samples, rng=rng, explainer=options.mix.explainer)
    sc = scientific_consistency(model, test, options.mix.explainer,
                                bundle.true_importance)
    perf = task_metric(model, test)
    return MetricReport(task=bundle.task,
                        dec_raw=dec, iauc=iauc_mean, sc=sc,
                        accuracy=perf if classification else None,
                        mae_residual=None if classification else perf,
                        n_samples=len(test), n_pairs=options.n_pairs,
                        iauc_skipped=skipped, seed=options.seed)
