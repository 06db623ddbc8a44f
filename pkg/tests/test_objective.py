"""Training-objective tests: mixing algebra, pairing properties, loss
recomposition, and second-order gradient oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saliencylab.errors import DegenerateDistributionError, GraphInputError
from saliencylab.graph import ComputeGraph, evaluate_ids, finite_difference_check
from saliencylab.models import ModelSpec, add_param_inputs, build_model, forward
from saliencylab.objective import (
    MixConfig,
    build_dre_loss,
    consistency_discrepancy,
    dre_loss,
    mixup_inputs,
    pair_batch,
    sample_tau,
    sparsity_penalty,
)


def two_env_batches(rng, n=6, d=4, classification=True):
    def env():
        x = rng.standard_normal((n, d))
        y = (rng.integers(0, 2, size=n) if classification
             else rng.standard_normal(n))
        return x, y
    return {"e0": env(), "e1": env()}


# -- mixing draw ----------------------------------------------------------------

def test_sample_tau_bounds_and_symmetry():
    rng = np.random.default_rng(0)
    draws = np.array([sample_tau(0.2, rng) for _ in range(4000)])
    assert np.all((draws >= 0) & (draws <= 1))
    assert abs(draws.mean() - 0.5) < 0.02          # Beta(a,a) is symmetric
    # concentration 0.2 puts most mass near the endpoints
    assert np.mean((draws < 0.1) | (draws > 0.9)) > 0.5


def test_sample_tau_rejects_nonpositive_alpha():
    with pytest.raises(GraphInputError):
        sample_tau(0.0, np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3))
def test_mixup_endpoints_are_exact(a, b):
    a, b = np.array(a), np.array(b)
    np.testing.assert_array_equal(mixup_inputs(a, b, 1.0), a)
    np.testing.assert_array_equal(mixup_inputs(a, b, 0.0), b)


def test_mixup_rejects_bad_tau_and_shapes():
    with pytest.raises(GraphInputError):
        mixup_inputs(np.ones(2), np.ones(2), 1.5)
    with pytest.raises(GraphInputError):
        mixup_inputs(np.ones(2), np.ones(3), 0.5)


# -- discrepancy and sparsity ---------------------------------------------------

def test_discrepancy_of_identical_operands_is_zero():
    g = np.random.default_rng(0).standard_normal((3, 4))
    assert consistency_discrepancy(g, g, "l1") == 0.0
    assert consistency_discrepancy(g, g, "kl") == pytest.approx(0.0, abs=1e-12)


def test_l1_discrepancy_is_the_mean_absolute_gap():
    a = np.array([[1.0, -1.0], [0.0, 2.0]])
    b = np.array([[0.0, 1.0], [0.0, 0.0]])
    assert consistency_discrepancy(a, b, "l1") == pytest.approx(5.0 / 4)


def test_kl_discrepancy_nonnegative_and_asymmetric():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    ab = consistency_discrepancy(a, b, "kl")
    ba = consistency_discrepancy(b, a, "kl")
    assert ab >= 0.0 and ba >= 0.0
    assert ab != ba


def test_kl_discrepancy_rejects_all_zero_attribution():
    with pytest.raises(DegenerateDistributionError):
        consistency_discrepancy(np.zeros(4), np.ones(4), "kl")


def test_sparsity_penalty_is_mean_absolute_value():
    assert sparsity_penalty(np.array([1.0, -3.0, 0.0, 2.0])) == 1.5


# -- pairing ----------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_classification_pairs_cross_envs_and_share_labels(seed):
    rng = np.random.default_rng(seed)
    batches = two_env_batches(rng)
    pairs = pair_batch(batches, rng=np.random.default_rng(seed + 1))
    seen = set()
    for p in pairs:
        assert p.env_a != p.env_b
        key_a = (p.env_a, p.x_a.tobytes())
        key_b = (p.env_b, p.x_b.tobytes())
        assert key_a not in seen and key_b not in seen
        seen.update({key_a, key_b})
    # label agreement, checked against the source batches
    lookup = {}
    for env_id, (x, y) in batches.items():
        for i in range(len(y)):
            lookup[(env_id, x[i].tobytes())] = int(y[i])
    for p in pairs:
        assert lookup[(p.env_a, p.x_a.tobytes())] == p.label
        assert lookup[(p.env_b, p.x_b.tobytes())] == p.label


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_regression_pairs_have_delta_close_targets(seed):
    rng = np.random.default_rng(seed)
    batches = two_env_batches(rng, classification=False)
    delta = 0.5
    pairs = pair_batch(batches, task="regression", delta=delta,
                       rng=np.random.default_rng(seed + 1))
    for p in pairs:
        y_a, y_b = p.label
        assert abs(y_a - y_b) <= delta


def test_greedy_pairing_leaves_no_matchable_leftovers():
    # after greedy matching, no two unmatched samples from different envs may
    # still share a label (otherwise they would have been paired)
    rng = np.random.default_rng(5)
    batches = two_env_batches(rng, n=9)
    pairs = pair_batch(batches, rng=np.random.default_rng(6))
    used = {(p.env_a, p.x_a.tobytes()) for p in pairs}
    used |= {(p.env_b, p.x_b.tobytes()) for p in pairs}
    leftovers = []
    for env_id, (x, y) in batches.items():
        for i in range(len(y)):
            if (env_id, x[i].tobytes()) not in used:
                leftovers.append((env_id, int(y[i])))
    for env_a, y_a in leftovers:
        for env_b, y_b in leftovers:
            assert env_a == env_b or y_a != y_b


def test_pair_batch_requires_two_envs_and_delta():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3))
    with pytest.raises(GraphInputError):
        pair_batch({"only": (x, np.zeros(4))})
    with pytest.raises(GraphInputError):
        pair_batch({"a": (x, np.zeros(4)), "b": (x, np.zeros(4))},
                   task="regression", delta=None)


# -- loss structure ----------------------------------------------------------

def small_model(seed=0, output_dim=2):
    spec = ModelSpec(kind="mlp", hidden=(5,), input_shape=(4,),
                     output_dim=output_dim, activation="softplus")
    return build_model(spec, seed)


def test_loss_with_zero_weights_equals_task_cross_entropy_oracle():
    rng = np.random.default_rng(0)
    batches = two_env_batches(rng)
    model = small_model()
    config = MixConfig(lam=0.0, gamma=0.0)
    breakdown = dre_loss(model, batches, config, np.random.default_rng(1))
    # independent numpy cross-entropy over the concatenated batch
    xs = np.concatenate([batches[e][0] for e in sorted(batches)])
    ys = np.concatenate([batches[e][1] for e in sorted(batches)])
    logits = forward(model, xs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    oracle = -logp[np.arange(len(ys)), ys.astype(int)].mean()
    assert breakdown.total == pytest.approx(oracle, rel=1e-12)
    assert breakdown.consistency == 0.0
    assert breakdown.sparsity == 0.0


@pytest.mark.parametrize("discrepancy", ["l1", "kl"])
def test_total_recomposes_from_parts(discrepancy):
    rng = np.random.default_rng(2)
    batches = two_env_batches(rng)
    model = small_model(seed=3)
    config = MixConfig(lam=0.7, gamma=0.05, discrepancy=discrepancy)
    b = dre_loss(model, batches, config, np.random.default_rng(4))
    assert b.n_pairs > 0
    assert b.total == pytest.approx(
        b.task + config.lam * b.consistency + config.gamma * b.sparsity,
        rel=1e-12)


def test_loss_breakdown_values_match_numeric_recomputation():
    # replay the pairing/tau draws with an identically seeded rng and rebuild
    # the consistency and sparsity terms from numeric attributions
    from saliencylab.explainers import batch_attributions
    rng = np.random.default_rng(7)
    batches = two_env_batches(rng)
    model = small_model(seed=8)
    config = MixConfig(lam=1.0, gamma=0.01)
    b = dre_loss(model, batches, config, np.random.default_rng(9))

    replay = np.random.default_rng(9)
    pairs = pair_batch(batches, rng=replay)
    taus = np.array([sample_tau(config.alpha, replay) for _ in pairs])
    xa = np.stack([p.x_a for p in pairs])
    xb = np.stack([p.x_b for p in pairs])
    targets = np.array([p.label for p in pairs])
    mixed = taus[:, None] * xa + (1 - taus)[:, None] * xb
    ga = batch_attributions(model, xa, targets)
    gb = batch_attributions(model, xb, targets)
    gm = batch_attributions(model, mixed, targets)
    mixed_expl = taus[:, None] * ga + (1 - taus)[:, None] * gb
    consistency = float(np.mean(np.abs(gm - mixed_expl)))
    sparsity = float(np.mean(np.abs(ga)) + np.mean(np.abs(gb)))
    assert b.consistency == pytest.approx(consistency, rel=1e-10)
    assert b.sparsity == pytest.approx(sparsity, rel=1e-10)


def test_kl_consistency_matches_numeric_discrepancy():
    from saliencylab.explainers import batch_attributions
    rng = np.random.default_rng(11)
    batches = two_env_batches(rng)
    model = small_model(seed=12)
    config = MixConfig(discrepancy="kl")
    b = dre_loss(model, batches, config, np.random.default_rng(13))

    replay = np.random.default_rng(13)
    pairs = pair_batch(batches, rng=replay)
    taus = np.array([sample_tau(config.alpha, replay) for _ in pairs])
    xa = np.stack([p.x_a for p in pairs])
    xb = np.stack([p.x_b for p in pairs])
    targets = np.array([p.label for p in pairs])
    mixed = taus[:, None] * xa + (1 - taus)[:, None] * xb
    ga = batch_attributions(model, xa, targets)
    gb = batch_attributions(model, xb, targets)
    gm = batch_attributions(model, mixed, targets)
    mixed_expl = taus[:, None] * ga + (1 - taus)[:, None] * gb
    oracle = np.mean([consistency_discrepancy(gm[i], mixed_expl[i], "kl")
                      for i in range(len(pairs))])
    assert b.consistency == pytest.approx(oracle, rel=1e-6)


def test_regression_objective_uses_squared_error_and_delta_pairing():
    rng = np.random.default_rng(20)
    batches = two_env_batches(rng, classification=False)
    model = small_model(seed=21, output_dim=1)
    b = dre_loss(model, batches, MixConfig(delta=10.0),
                 np.random.default_rng(22))
    xs = np.concatenate([batches[e][0] for e in sorted(batches)])
    ys = np.concatenate([batches[e][1] for e in sorted(batches)])
    oracle = float(np.mean((forward(model, xs)[:, 0] - ys) ** 2))
    assert b.task == pytest.approx(oracle, rel=1e-12)
    assert b.n_pairs > 0


# -- second-order oracle ----------------------------------------------------------

@pytest.mark.parametrize("seed", range(4))
def test_penalty_gradients_wrt_parameters_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(kind="mlp", hidden=(4,), input_shape=(3,), output_dim=2,
                     activation="softplus")
    model = build_model(spec, seed)
    batches = {"e0": (rng.standard_normal((4, 3)), rng.integers(0, 2, 4)),
               "e1": (rng.standard_normal((4, 3)), rng.integers(0, 2, 4))}
    g = ComputeGraph()
    param_nodes = add_param_inputs(g, spec)
    g, nodes, bindings, n_pairs = build_dre_loss(
        g, spec, param_nodes, batches, MixConfig(), np.random.default_rng(seed))
    assert n_pairs > 0
    bindings.update(model.params)
    wrt = list(param_nodes.values())
    for term in (nodes.consistency, nodes.sparsity):
        report = finite_difference_check(g, term, wrt, bindings, step=1e-5)
        assert report.max_relative_error < 1e-4
