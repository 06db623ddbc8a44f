"""The explanation-consistency training objective.

Pairs same-label samples across environments, mixes inputs and explanations
with a shared Beta-distributed coefficient, and penalizes the gap between
the explanation of the mixed sample and the mixture of explanations, plus an
L1 sparsity term on the paired samples' explanations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDistributionError, GraphInputError
from .explainers import grad_cam_nodes, input_gradient_nodes
from .graph import as_tensor

KL_FLOOR = 1e-12


@dataclass(frozen=True)
class MixConfig:
    alpha: float = 0.2          # Beta concentration for the mixing draw
    discrepancy: str = "l1"     # "l1" or "kl"
    lam: float = 1.0            # consistency weight
    gamma: float = 0.01         # sparsity weight
    delta: float = None         # regression pairing threshold; None = 0.1*std(y)
    explainer: str = "input_gradient"   # training-time explanation
    differentiate_cam_weights: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise GraphInputError("alpha must be positive")
        if self.lam < 0 or self.gamma < 0:
            raise GraphInputError("lam and gamma must be nonnegative")
        if self.discrepancy not in ("l1", "kl"):
            raise GraphInputError(f"unknown discrepancy {self.discrepancy!r}")
        if self.explainer not in ("input_gradient", "grad_cam"):
            raise GraphInputError(f"unknown explainer {self.explainer!r}")


@dataclass
class MixPair:
    x_a: np.ndarray
    x_b: np.ndarray
    label: object            # shared class id, or (y_a, y_b) for regression
    env_a: str
    env_b: str


@dataclass
class LossBreakdown:
    task: float
    consistency: float
    sparsity: float
    total: float
    n_pairs: int = 0


def sample_tau(alpha, rng):
    if alpha <= 0:
        raise GraphInputError("alpha must be positive")
    return float(rng.beta(alpha, alpha))


def mixup_inputs(x_a, x_b, tau):
    x_a, x_b = as_tensor(x_a), as_tensor(x_b)
    if x_a.shape != x_b.shape:
        raise GraphInputError(f"mixup: shapes {x_a.shape} and {x_b.shape} differ")
    if not 0.0 <= tau <= 1.0:
        raise GraphInputError(f"mixup: tau {tau} outside [0, 1]")
    return tau * x_a + (1.0 - tau) * x_b


# The same draw must be applied to inputs and explanations; exposing the
# explanation mix as the same function makes that a single code path.
mixup_explanations = mixup_inputs


def consistency_discrepancy(a, b, kind="l1"):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise GraphInputError(f"discrepancy: shapes {a.shape} and {b.shape} differ")
    if kind == "l1":
        return float(np.mean(np.abs(a - b)))
    if kind == "kl":
        p, q = np.abs(a).reshape(-1), np.abs(b).reshape(-1)
        if p.sum() == 0.0 or q.sum() == 0.0:
            raise DegenerateDistributionError(
                "all-zero attribution cannot be normalized for KL")
        p = np.maximum(p, KL_FLOOR)
        q = np.maximum(q, KL_FLOOR)
        p, q = p / p.sum(), q / q.sum()
        return float(np.sum(p * (np.log(p) - np.log(q))))
    raise GraphInputError(f"unknown discrepancy {kind!r}")


def sparsity_penalty(g):
    return float(np.mean(np.abs(as_tensor(g))))


def pair_batch(per_env_batches, task="classification", delta=None, rng=None):
    """Greedy random cross-environment pairing.

    ``per_env_batches``: {env_id: (x, y)}.  Classification pairs share a
    label; regression pairs must have targets within ``delta``.  Samples that
    find no partner are simply absent from the result (the task term still
    sees them).
    """
    if len(per_env_batches) < 2:
        raise GraphInputError("pairing needs at least two environments")
    rng = rng if rng is not None else np.random.default_rng()
    items = []   # (env, y, x)
    for env_id in sorted(per_env_batches):
        x, y = per_env_batches[env_id]
        x, y = as_tensor(x), np.asarray(y)
        for i in range(x.shape[0]):
            items.append((env_id, y[i], x[i]))
    order = rng.permutation(len(items))
    pairs = []
    used = np.zeros(len(items), dtype=bool)
    for pos, i in enumerate(order):
        if used[i]:
            continue
        env_i, y_i, x_i = items[i]
        for j in order[pos + 1:]:
            if used[j]:
                continue
            env_j, y_j, x_j = items[j]
            if env_j == env_i:
                continue
            if task == "classification":
                if y_i != y_j:
                    continue
                label = int(y_i)
            else:
                if delta is None:
                    raise GraphInputError("regression pairing needs delta")
                if abs(float(y_i) - float(y_j)) > delta:
                    continue
                label = (float(y_i), float(y_j))
            used[i] = used[j] = True
            pairs.append(MixPair(x_a=x_i, x_b=x_j, label=label,
                                 env_a=env_i, env_b=env_j))
            break
    return pairs


def _explainer_nodes(g, spec, param_nodes, x_node, targets, config):
    if config.explainer == "grad_cam":
        return grad_cam_nodes(g, spec, param_nodes, x_node, targets,
                              differentiate_weights=config.differentiate_cam_weights)
    return input_gradient_nodes(g, spec, param_nodes, x_node, targets)


def _kl_nodes(g, a, b):
    """Per-row KL between |a| and |b| normalized over trailing features."""
    n = g.shape(a)[0]
    feat = int(np.prod(g.shape(a)[1:]))
    pa = g.add(g.abs(g.reshape(a, (n, feat))), g.const(np.full((n, feat), KL_FLOOR)))
    pb = g.add(g.abs(g.reshape(b, (n, feat))), g.const(np.full((n, feat), KL_FLOOR)))
    pa = g.multiply(pa, g.reciprocal(g.sum(pa, axes=(1,), keepdims=True)))
    pb = g.multiply(pb, g.reciprocal(g.sum(pb, axes=(1,), keepdims=True)))
    kl = g.sum(g.multiply(pa, g.subtract(g.log(pa), g.log(pb))), axes=(1,))
    return g.mean(kl)


def build_dre_loss(g, spec, param_nodes, per_env_batches, config, rng):
    """Append the full objective to a graph; params must be graph inputs.

    Returns ``(graph, LossBreakdown-of-node-ids, bindings, n_pairs)`` where
    bindings carry the data arrays for the appended input nodes.
    """
    envs = sorted(per_env_batches)
    xs = np.concatenate([as_tensor(per_env_batches[e][0]) for e in envs])
    ys = np.concatenate([np.asarray(per_env_batches[e][1]) for e in envs])
    bindings = {"task_x": xs}
    x_all = g.input("task_x", xs.shape)
    out = forward_like(g, spec, param_nodes, x_all)
    if spec.output_dim == 1:
        target = g.const(ys.reshape(-1, 1).astype(np.float64))
        task = g.mean(g.squared_error(out, target))
    else:
        task = g.mean(g.cross_entropy_with_logits(out, ys.astype(np.int64)))

    classification = spec.output_dim > 1
    task_kind = "classification" if classification else "regression"
    delta = config.delta
    if not classification and delta is None:
        delta = 0.1 * float(np.std(ys)) if np.std(ys) > 0 else 0.1
    pairs = pair_batch(per_env_batches, task=task_kind, delta=delta, rng=rng)

    if (config.lam == 0.0 and config.gamma == 0.0) or not pairs:
        zero = g.const(np.zeros(()))
        breakdown = LossBreakdown(task=task, consistency=zero, sparsity=zero,
                                  total=task, n_pairs=len(pairs))
        return g, breakdown, bindings, len(pairs)

    taus = np.array([sample_tau(config.alpha, rng) for _ in pairs])
    xa = np.stack([p.x_a for p in pairs])
    xb = np.stack([p.x_b for p in pairs])
    if classification:
        targets = np.array([p.label for p in pairs], dtype=np.int64)
    else:
        targets = np.zeros(len(pairs), dtype=np.int64)
    mixed = taus.reshape((-1,) + (1,) * (xa.ndim - 1)) * xa \
        + (1.0 - taus).reshape((-1,) + (1,) * (xa.ndim - 1)) * xb

    bindings.update({"pair_a": xa, "pair_b": xb, "pair_mixed": mixed})
    na = g.input("pair_a", xa.shape)
    nb = g.input("pair_b", xb.shape)
    nm = g.input("pair_mixed", mixed.shape)
    g, ga = _explainer_nodes(g, spec, param_nodes, na, targets, config)
    g, gb = _explainer_nodes(g, spec, param_nodes, nb, targets, config)
    g, gm = _explainer_nodes(g, spec, param_nodes, nm, targets, config)

    tau_shape = (len(pairs),) + (1,) * (len(g.shape(ga)) - 1)
    t = g.const(taus.reshape(tau_shape))
    omt = g.const((1.0 - taus).reshape(tau_shape))
    mixed_expl = g.add(g.multiply(t, ga), g.multiply(omt, gb))
    if config.discrepancy == "l1":
        consistency = g.mean(g.abs(g.subtract(gm, mixed_expl)))
    else:
        consistency = _kl_nodes(g, gm, mixed_expl)
    sparsity = g.add(g.mean(g.abs(ga)), g.mean(g.abs(gb)))

    total = task
    if config.lam > 0:
        total = g.add(total, g.scale(consistency, config.lam))
    if config.gamma > 0:
        total = g.add(total, g.scale(sparsity, config.gamma))
    breakdown = LossBreakdown(task=task, consistency=consistency,
                              sparsity=sparsity, total=total, n_pairs=len(pairs))
    return g, breakdown, bindings, len(pairs)


def forward_like(g, spec, param_nodes, x_node):
    from .models import forward_nodes
    out = forward_nodes(g, spec, param_nodes, x_node)
    return out[0] if spec.kind == "cnn" else out


def dre_loss(model, per_env_batches, config: MixConfig, rng) -> LossBreakdown:
    """Numeric loss breakdown for a fixed model (no parameter gradients)."""
    from .graph import ComputeGraph, evaluate_ids
    g = ComputeGraph()
    param_nodes = {name: g.const(v) for name, v in model.params.items()}
    g, nodes, bindings, n_pairs = build_dre_loss(
        g, model.spec, param_nodes, per_env_batches, config, rng)
    ids = {nodes.task, nodes.consistency, nodes.sparsity, nodes.total}
    vals = evaluate_ids(g, bindings, ids)
    return LossBreakdown(task=float(vals[nodes.task]),
                         consistency=float(vals[nodes.consistency]),
                         sparsity=float(vals[nodes.sparsity]),
                         total=float(vals[nodes.total]),
                         n_pairs=n_pairs)
