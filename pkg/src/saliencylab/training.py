"""Adam training loop with three methods: plain risk minimization (erm),
label-mixing augmentation (mixup), and the explanation-consistency objective
(dre).  Runs are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, GraphInputError, NumericError
from .graph import ComputeGraph, derive, evaluate_ids
from .models import Model, ModelSpec, add_param_inputs, build_model, forward
from .objective import LossBreakdown, MixConfig, build_dre_loss, sample_tau

METHODS = ("erm", "mixup", "dre")


@dataclass(frozen=True)
class HyperParams:
    method: str = "erm"
    learning_rate: float = 1e-3
    batch_per_env: int = 16
    steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mix: MixConfig = field(default_factory=MixConfig)
    mixup_alpha: float = 0.2
    val_every: int = 100
    clip_norm: float = 10.0      # None disables clipping
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise GraphInputError(f"unknown method {self.method!r}")
        if self.steps <= 0 or self.learning_rate <= 0:
            raise GraphInputError("steps and learning_rate must be positive")


@dataclass
class TrainState:
    t: int
    m: dict
    v: dict


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)   # one LossBreakdown per step
    validation: list = field(default_factory=list)  # (step, metric)
    selected_step: int = -1
    empty_pair_steps: int = 0

    def to_csv(self, path):
        val = dict(self.validation)
        with open(path, "w") as fh:
            fh.write("step,task,consistency,sparsity,total,val_metric\n")
            for i, rec in enumerate(self.records, start=1):
                vm = repr(val[i]) if i in val else ""
                fh.write(f"{i},{rec.task!r},{rec.consistency!r},"
                         f"{rec.sparsity!r},{rec.total!r},{vm}\n")


def init_train_state(params) -> TrainState:
    return TrainState(t=0,
                      m={k: np.zeros_like(v) for k, v in params.items()},
                      v={k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state: TrainState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam; mutates state, returns new params."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    t = state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = state.m[name] / (1 - beta1 ** t)
        v_hat = state.v[name] / (1 - beta2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


def _clip_grads(grads, max_norm):
    if max_norm is None:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}


def _task_graph(spec, xs, ys):
    """Plain task objective on a merged batch; params as graph inputs."""
    g = ComputeGraph()
    param_nodes = add_param_inputs(g, spec)
    x = g.input("task_x", xs.shape)
    from .objective import forward_like
    out = forward_like(g, spec, param_nodes, x)
    if spec.output_dim == 1:
        task = g.mean(g.squared_error(out, g.const(ys.reshape(-1, 1))))
    else:
        task = g.mean(g.cross_entropy_with_logits(out, ys.astype(np.int64)))
    return g, param_nodes, task, {"task_x": xs}


def _mixup_graph(spec, xs, ys, alpha, rng):
    """Original-style mixup: random pairs, one tau per batch, mixed labels."""
    perm = rng.permutation(xs.shape[0])
    tau = sample_tau(alpha, rng)
    mixed = tau * xs + (1 - tau) * xs[perm]
    g = ComputeGraph()
    param_nodes = add_param_inputs(g, spec)
    x = g.input("task_x", mixed.shape)
    from .objective import forward_like
    out = forward_like(g, spec, param_nodes, x)
    if spec.output_dim == 1:
        target = tau * ys + (1 - tau) * ys[perm]
        task = g.mean(g.squared_error(out, g.const(target.reshape(-1, 1))))
    else:
        ce_a = g.mean(g.cross_entropy_with_logits(out, ys.astype(np.int64)))
        ce_b = g.mean(g.cross_entropy_with_logits(out, ys[perm].astype(np.int64)))
        task = g.add(g.scale(ce_a, tau), g.scale(ce_b, 1 - tau))
    return g, param_nodes, task, {"task_x": mixed}


def _validation_metric(model, val_sets, classification):
    xs = np.concatenate([v.x for v in val_sets])
    ys = np.concatenate([v.y for v in val_sets])
    pred = forward(model, xs)
    if classification:
        return float(np.mean(np.argmax(pred, axis=1) == ys))
    return float(np.mean(np.abs(pred[:, 0] - ys)))


def train(bundle, spec: ModelSpec, hyper: HyperParams):
    """Run the optimization loop; returns the selected Model and its history."""
    from .envdata import split_train_val

    if hyper.method == "dre" and len(bundle.train_envs) < 2:
        raise GraphInputError("dre needs at least two training environments")
    classification = bundle.task == "classification"
    splits = [split_train_val(env, 0.8, seed=hyper.seed + i)
              for i, env in enumerate(bundle.train_envs)]
    train_sets = [s[0] for s in splits]
    val_sets = [s[1] for s in splits]

    model = build_model(spec, hyper.seed)
    params = model.params
    state = init_train_state(params)
    data_rng = np.random.default_rng([hyper.seed, 1])
    mix_rng = np.random.default_rng([hyper.seed, 2])

    history = TrainingHistory()
    best = None   # (metric, step, params)

    # Ties go to the later checkpoint, so with a saturated validation metric
    # the returned model reflects the full optimization budget.
    def better(metric, incumbent):
        if incumbent is None:
            return True
        return metric >= incumbent if classification else metric <= incumbent

    last_finite = None
    for step in range(1, hyper.steps + 1):
        batches = {}
        for ts in train_sets:
            k = min(hyper.batch_per_env, len(ts))
            idx = data_rng.choice(len(ts), size=k, replace=False)
            batches[ts.env_id] = (ts.x[idx], ts.y[idx])
        xs = np.concatenate([batches[ts.env_id][0] for ts in train_sets])
        ys = np.concatenate([batches[ts.env_id][1] for ts in train_sets]).astype(np.float64)

        if hyper.method == "erm":
            g, param_nodes, total, bindings = _task_graph(spec, xs, ys)
            nodes = LossBreakdown(task=total, consistency=None,
                                  sparsity=None, total=total)
        elif hyper.method == "mixup":
            g, param_nodes, total, bindings = _mixup_graph(
                spec, xs, ys, hyper.mixup_alpha, mix_rng)
            nodes = LossBreakdown(task=total, consistency=None,
                                  sparsity=None, total=total)
        else:
            g = ComputeGraph()
            param_nodes = add_param_inputs(g, spec)
            g, nodes, bindings, n_pairs = build_dre_loss(
                g, spec, param_nodes, batches, hyper.mix, mix_rng)
            if n_pairs == 0:
                history.empty_pair_steps += 1

        wrt = list(param_nodes.values())
        g, grad_ids = derive(g, nodes.total, wrt)
        want = set(grad_ids.values()) | {nodes.total, nodes.task}
        if nodes.consistency is not None:
            want |= {nodes.consistency, nodes.sparsity}
        bindings.update(params)
        try:
            vals = evaluate_ids(g, bindings, want)
        except NumericError as exc:
            raise DivergenceError(step, last_finite) from exc

        rec = LossBreakdown(
            task=float(vals[nodes.task]),
            consistency=float(vals[nodes.consistency]) if nodes.consistency is not None else 0.0,
            sparsity=float(vals[nodes.sparsity]) if nodes.sparsity is not None else 0.0,
            total=float(vals[nodes.total]),
            n_pairs=getattr(nodes, "n_pairs", 0))
        if not np.isfinite(rec.total):
            raise DivergenceError(step, last_finite)
        last_finite = rec
        history.records.append(rec)

        grads = {name: vals[grad_ids[node]] for name, node in param_nodes.items()}
        grads = _clip_grads(grads, hyper.clip_norm)
        params = adam_step(params, grads, state, hyper.learning_rate,
                           hyper.beta1, hyper.beta2, hyper.eps)

        if step % hyper.val_every == 0 or step == hyper.steps:
            candidate = Model(spec=spec, params=dict(params))
            metric = _validation_metric(candidate, val_sets, classification)
            history.validation.append((step, metric))
            if better(metric, best[0] if best else None):
                best = (metric, step, copy.deepcopy(params))

    history.selected_step = best[1]
    return Model(spec=spec, params=best[2]), history
