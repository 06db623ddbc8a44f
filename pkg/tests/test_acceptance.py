"""Acceptance gate: one test per release criterion.

Each test function below is a single criterion, so ``pytest -v`` prints one
pass/fail line per criterion.  Criteria 5-7 share two module-scoped training
sweeps (four method variants x five seeds on the classification bundle, two
methods x five seeds on the regression bundle); together they dominate the
runtime of the suite (several minutes on one CPU core).

One assertion inside criterion 7 fails by construction; see the docstring of
``test_criterion_7_ablation_directions`` for the analysis.
"""

import json
import time

import numpy as np
import pytest
from conftest import affine_relu_model

from saliencylab.cli import main as cli_main
from saliencylab.envdata import EnvironmentDataset, GeneratorConfig, generate
from saliencylab.graph import ComputeGraph, finite_difference_check
from saliencylab.metrics import (
    dec_metric,
    iauc,
    iauc_dataset,
    normalize_dec,
    pooled_env,
    scientific_consistency,
    task_metric,
)
from saliencylab.models import ModelSpec, add_param_inputs, build_model
from saliencylab.objective import (
    MixConfig,
    build_dre_loss,
    consistency_discrepancy,
    mixup_inputs,
)
from saliencylab.training import HyperParams, train

from gradcheck_utils import random_graph, random_model_loss

CLS_SPEC = ModelSpec(kind="mlp", hidden=(16, 16), input_shape=(20,),
                     output_dim=2, activation="relu")
REG_SPEC = ModelSpec(kind="mlp", hidden=(16, 16), input_shape=(20,),
                     output_dim=1, activation="relu")
SEEDS = range(5)

VARIANTS = {
    "erm": dict(method="erm"),
    "dre": dict(method="dre"),
    "gamma0": dict(method="dre", mix=MixConfig(gamma=0.0)),
    "lam0": dict(method="dre", mix=MixConfig(lam=0.0)),
}


@pytest.fixture(scope="module")
def cls_sweep():
    """Per-variant, per-seed metrics on the default classification bundle."""
    out = {name: dict(acc=[], dec=[], iauc=[], iauc_id=[]) for name in VARIANTS}
    for seed in SEEDS:
        bundle = generate(GeneratorConfig(), seed)
        id_pool = pooled_env(bundle.train_envs)
        means = id_pool.x.mean(axis=0)
        for name, kwargs in VARIANTS.items():
            model, _ = train(bundle, CLS_SPEC, HyperParams(seed=seed, **kwargs))
            out[name]["acc"].append(task_metric(model, bundle.test_env))
            out[name]["dec"].append(dec_metric(
                model, id_pool, bundle.test_env, 64, MixConfig(),
                np.random.default_rng(7)))
            ood, _, _ = iauc_dataset(model, bundle.test_env, "feature_mean",
                                     means, n_samples=128,
                                     rng=np.random.default_rng(seed))
            out[name]["iauc"].append(ood)
            if name == "erm":
                # in-distribution / out-of-distribution pair sharing one
                # generator stream, for the degradation criterion
                rng = np.random.default_rng(seed)
                i_id, _, _ = iauc_dataset(model, id_pool, "feature_mean",
                                          means, n_samples=128, rng=rng)
                i_ood, _, _ = iauc_dataset(model, bundle.test_env,
                                           "feature_mean", means,
                                           n_samples=128, rng=rng)
                out[name]["iauc_id"].append((i_id, i_ood))
    return out


@pytest.fixture(scope="module")
def reg_sweep():
    """ERM vs the consistency-regularized objective on the regression bundle."""
    out = {"erm": dict(sc=[], residual=[]), "dre": dict(sc=[], residual=[])}
    cfg = GeneratorConfig(kind="tabular_reg")
    for seed in SEEDS:
        bundle = generate(cfg, seed)
        for method in ("erm", "dre"):
            model, _ = train(bundle, REG_SPEC,
                             HyperParams(method=method, seed=seed))
            out[method]["sc"].append(scientific_consistency(
                model, bundle.test_env, "input_gradient",
                bundle.true_importance))
            out[method]["residual"].append(task_metric(model, bundle.test_env))
    return out


def test_criterion_1_first_order_gradient_oracle():
    """derive() matches central finite differences on 100 random graphs,
    max relative error < 1e-5, in under 60 seconds."""
    start = time.time()
    worst = 0.0
    for seed in range(80):
        g, scalar, bindings = random_graph(seed)
        wrt = [g.inputs[name] for name in bindings]
        report = finite_difference_check(g, scalar, wrt, bindings)
        worst = max(worst, report.max_relative_error)
    for seed in range(20):
        g, loss, bindings, param_nodes = random_model_loss(seed)
        report = finite_difference_check(g, loss, list(param_nodes.values()),
                                         bindings)
        worst = max(worst, report.max_relative_error)
    assert worst < 1e-5
    assert time.time() - start < 60.0


def test_criterion_2_second_order_penalty_gradient_oracle():
    """Parameter gradients of the consistency and sparsity penalties (which
    themselves contain input gradients) match finite differences in the
    parameters, max relative error < 1e-4, over 20 random instances."""
    spec = ModelSpec(kind="mlp", hidden=(4,), input_shape=(3,), output_dim=2,
                     activation="softplus")
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = build_model(spec, seed)
        batches = {"e0": (rng.standard_normal((4, 3)), rng.integers(0, 2, 4)),
                   "e1": (rng.standard_normal((4, 3)), rng.integers(0, 2, 4))}
        g = ComputeGraph()
        param_nodes = add_param_inputs(g, spec)
        g, nodes, bindings, n_pairs = build_dre_loss(
            g, spec, param_nodes, batches, MixConfig(),
            np.random.default_rng(seed))
        assert n_pairs > 0
        bindings.update(model.params)
        wrt = list(param_nodes.values())
        for term in (nodes.consistency, nodes.sparsity):
            report = finite_difference_check(g, term, wrt, bindings, step=1e-5)
            worst = max(worst, report.max_relative_error)
    assert worst < 1e-4


def test_criterion_3_exact_algebraic_identities():
    """Mixing endpoints, zero discrepancy of identical operands, zero
    consistency gap for affine models, zero-weight objective reproducing the
    plain-risk trajectory, and exact baseline normalization."""
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(5), rng.standard_normal(5)
    np.testing.assert_array_equal(mixup_inputs(a, b, 1.0), a)
    np.testing.assert_array_equal(mixup_inputs(a, b, 0.0), b)

    g = rng.standard_normal((3, 4))
    assert consistency_discrepancy(g, g, "l1") == 0.0

    # the consistency gap of any affine model vanishes identically
    env_rng = np.random.default_rng(0)
    envs = [EnvironmentDataset(eid, env_rng.standard_normal((30, 4)),
                               env_rng.integers(0, 2, 30))
            for eid in ("id", "ood")]
    affine = affine_relu_model(np.array([[1.0, -1.0], [2.0, 0.5],
                                         [-0.3, 0.2], [0.0, 1.0]]), shift=1e6)
    assert dec_metric(affine, envs[0], envs[1], 16, MixConfig(),
                      np.random.default_rng(1)) == 0.0

    # zero penalty weights reproduce plain risk minimization step-for-step
    data = GeneratorConfig(d_core=3, d_spur=3, d_noise=4, samples_per_env=150)
    bundle = generate(data, seed=0)
    spec = ModelSpec(kind="mlp", hidden=(8,), input_shape=(10,), output_dim=2,
                     activation="relu")
    hp = dict(steps=120, val_every=40, batch_per_env=8, seed=0)
    m_erm, h_erm = train(bundle, spec, HyperParams(method="erm", **hp))
    m_zero, h_zero = train(bundle, spec, HyperParams(
        method="dre", mix=MixConfig(lam=0.0, gamma=0.0), **hp))
    assert [r.total for r in h_erm.records] == [r.total for r in h_zero.records]
    for name in m_erm.params:
        np.testing.assert_array_equal(m_erm.params[name], m_zero.params[name])

    # the baseline maps to exactly 1.0 under its own normalization
    baseline = [0.25, 0.5, 0.75]
    assert float(np.mean(normalize_dec(baseline, baseline))) == 1.0


def test_criterion_4_insertion_curve_oracle():
    """Hand-computed two-feature insertion area equals 0.625, and ordering
    features correctly beats ordering them in reverse on 50 random monotone
    models."""
    model = affine_relu_model(np.array([[3.0], [1.0]]))
    x = np.array([1.0, 1.0])
    area, curve = iauc(model, x, target=0, attribution=np.array([3.0, 1.0]),
                       reference=np.zeros(2), n_steps=2)
    assert area == pytest.approx(0.625, abs=1e-12)
    np.testing.assert_allclose(curve.scores, [0.0, 0.75, 1.0], atol=1e-12)

    wins = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        w = np.sort(rng.uniform(0.1, 3.0, size=6))[::-1]
        m = affine_relu_model(w.reshape(-1, 1))
        x = np.ones(6)
        attr = w * x
        # features are ranked by descending magnitude, so the reversed
        # ordering needs reversed magnitudes, not flipped signs
        correct, _ = iauc(m, x, 0, attr, np.zeros(6), n_steps=6)
        reverse, _ = iauc(m, x, 0, np.ascontiguousarray(attr[::-1]),
                          np.zeros(6), n_steps=6)
        wins += correct > reverse
    assert wins == 50


def test_criterion_5_ood_explanation_degradation(cls_sweep):
    """The plain-risk model's insertion fidelity drops from held-in to
    shifted data in at least 4 of 5 seeds."""
    pairs = cls_sweep["erm"]["iauc_id"]
    drops = sum(ood < i_id for i_id, ood in pairs)
    assert drops >= 4, pairs


def test_criterion_6_regularized_training_beats_the_baseline(cls_sweep,
                                                             reg_sweep):
    """Mean over seeds: the consistency-regularized model is at least 3
    accuracy points better out of distribution, its relative consistency gap
    is below 0.8, and on the regression bundle its attributions align better
    with the planted importance while its residual is lower."""
    acc_erm = np.mean(cls_sweep["erm"]["acc"])
    acc_dre = np.mean(cls_sweep["dre"]["acc"])
    assert acc_dre - acc_erm >= 0.03, (acc_dre, acc_erm)

    rel = normalize_dec(cls_sweep["dre"]["dec"], cls_sweep["erm"]["dec"])
    assert np.mean(rel) < 0.8, rel

    assert np.mean(reg_sweep["dre"]["sc"]) > np.mean(reg_sweep["erm"]["sc"])
    assert (np.mean(reg_sweep["dre"]["residual"])
            < np.mean(reg_sweep["erm"]["residual"]))


def test_criterion_7_ablation_directions(cls_sweep):
    """Ablating each penalty moves the metrics in the expected direction.

    The final assertion — that the sparsity-only variant (consistency weight
    zero) achieves the lowest consistency gap of all variants — fails by
    construction and is expected to fail: the full objective trains directly
    on the same functional the consistency-gap metric evaluates, at weight
    1.0, while the sparsity-only variant touches it only indirectly through a
    penalty three orders of magnitude smaller.  Measured over these five
    seeds the gap ordering is always full < sparsity-free < sparsity-only <
    baseline.  The assertion is kept faithful to the stated criterion rather
    than weakened.
    """
    mean = {name: {k: float(np.mean(v)) for k, v in d.items() if v}
            for name, d in cls_sweep.items()}

    # removing sparsity (gamma=0) still improves accuracy over the baseline
    # but closes the consistency gap less than the full objective
    assert mean["gamma0"]["acc"] > mean["erm"]["acc"]
    assert mean["gamma0"]["dec"] > mean["dre"]["dec"]

    # removing consistency (lam=0) degrades accuracy and insertion fidelity
    # relative to the full objective
    assert mean["lam0"]["acc"] < mean["dre"]["acc"]
    assert mean["lam0"]["iauc"] < mean["dre"]["iauc"]

    # expected failure (see docstring): the sparsity-only variant does not
    # achieve the lowest consistency gap
    assert mean["lam0"]["dec"] <= min(mean["dre"]["dec"],
                                      mean["gamma0"]["dec"],
                                      mean["erm"]["dec"]), mean


def test_criterion_8_benchmark_is_byte_deterministic(tmp_path):
    """Running the full benchmark command twice with one config produces
    byte-identical report files."""
    out = tmp_path / "bench"
    cfg = tmp_path / "bench.json"
    cfg.write_text(json.dumps({
        "output_dir": str(out),
        "seeds": [0, 1],
        "methods": ["erm", "dre"],
        "generator": {"kind": "tabular_cls", "d_core": 3, "d_spur": 3,
                      "d_noise": 4, "samples_per_env": 120},
        "model": {"hidden": [6], "activation": "relu"},
        "training": {"method": "erm", "steps": 40, "val_every": 20,
                     "batch_per_env": 8},
        "metrics": {"n_pairs": 8, "n_iauc_samples": 8},
        "n_dump_samples": 1,
    }))
    assert cli_main(["benchmark", str(cfg)]) == 0
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert "metrics.csv" in first and "summary.txt" in first
    assert cli_main(["benchmark", str(cfg)]) == 0
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first == second
