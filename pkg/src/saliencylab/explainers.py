"""Gradient-based explanations: input gradients and channel-weighted
saliency maps for the CNN's last conv layer.

Every explainer has two faces: a numeric one operating on a fixed model and
sample, and a graph-level one (``*_nodes``) that appends the explanation to
an existing graph so it can participate in differentiable loss terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphInputError, UnsupportedModelError
from .graph import ComputeGraph, as_tensor, derive, evaluate_ids
from .models import Model, forward, forward_nodes

__all__ = [
    "Attribution",
    "input_gradient",
    "grad_cam",
    "rank_features",
    "input_gradient_nodes",
    "grad_cam_nodes",
]


@dataclass
class Attribution:
    values: np.ndarray   # input-shaped (input_gradient) or spatial (grad_cam)
    method: str
    target: int


def _resolve_target(model: Model, x, target):
    if target is None:
        if model.spec.output_dim == 1:
            return 0
        logits = forward(model, x)
        return int(np.argmax(logits))
    target = int(target)
    if not 0 <= target < model.spec.output_dim:
        raise GraphInputError(
            f"target {target} out of range for output_dim {model.spec.output_dim}")
    return target


def _selected_scalar(g: ComputeGraph, logits, targets, output_dim):
    """Sum of each sample's selected output (per-sample grads stay separate)."""
    n = g.shape(logits)[0]
    if output_dim == 1:
        return g.sum(logits)
    onehot = g.const(np.eye(output_dim)[np.asarray(targets, dtype=np.int64)])
    return g.sum(g.multiply(logits, onehot))


def input_gradient_nodes(g, spec, param_nodes, x_node, targets):
    """Append d(selected logit)/dx for a batched input; returns (graph, node)."""
    out = forward_nodes(g, spec, param_nodes, x_node)
    logits = out[0] if spec.kind == "cnn" else out
    scalar = _selected_scalar(g, logits, targets, spec.output_dim)
    g2, grads = derive(g, scalar, [x_node])
    return g2, grads[x_node]


def input_gradient(model: Model, x, target=None) -> Attribution:
    x = as_tensor(x)
    if x.shape != model.spec.input_shape:
        raise GraphInputError(
            f"expected a single sample of shape {model.spec.input_shape}, got {x.shape}")
    target = _resolve_target(model, x, target)
    g = ComputeGraph()
    xn = g.input("x", (1,) + x.shape)
    param_nodes = {name: g.const(v) for name, v in model.params.items()}
    g, grad = input_gradient_nodes(g, model.spec, param_nodes, xn, [target])
    values = evaluate_ids(g, {"x": x[None]}, {grad})[grad][0]
    return Attribution(values=values, method="input_gradient", target=target)


def grad_cam_nodes(g, spec, param_nodes, x_node, targets, differentiate_weights=True):
    """Append the saliency map of the last conv layer; returns (graph, node).

    Channel weights are the spatial average of d(selected logit)/d(activation);
    the map is the rectified weighted sum of channels, bilinearly upsampled to
    the input's spatial shape.  Output node shape: (n, H, W).
    """
    if spec.kind != "cnn":
        raise UnsupportedModelError("grad_cam requires a cnn model")
    logits, conv = forward_nodes(g, spec, param_nodes, x_node)
    scalar = _selected_scalar(g, logits, targets, spec.output_dim)
    g, grads = derive(g, scalar, [conv])
    weights = g.mean(grads[conv], axes=(2, 3), keepdims=True)
    if not differentiate_weights:
        weights = g.stop_gradient(weights)
    raw = g.relu(g.sum(g.multiply(weights, conv), axes=(1,), keepdims=True))
    n, _, h, w = g.shape(grads[conv])
    in_h, in_w = spec.input_shape[1:]
    if in_h % h or in_w % w or in_h // h != in_w // w:
        raise GraphInputError(
            f"conv map {h}x{w} does not evenly upsample to input {in_h}x{in_w}")
    factor = in_h // h
    if factor > 1:
        raw = g.bilinear_upsample(raw, factor)
    return g, g.reshape(raw, (n, in_h, in_w))


def grad_cam(model: Model, x, target=None, differentiate_weights=True) -> Attribution:
    x = as_tensor(x)
    if x.shape != model.spec.input_shape:
        raise GraphInputError(
            f"expected a single sample of shape {model.spec.input_shape}, got {x.shape}")
    target = _resolve_target(model, x, target)
    g = ComputeGraph()
    xn = g.input("x", (1,) + x.shape)
    param_nodes = {name: g.const(v) for name, v in model.params.items()}
    g, node = grad_cam_nodes(g, model.spec, param_nodes, xn, [target],
                             differentiate_weights=differentiate_weights)
    values = evaluate_ids(g, {"x": x[None]}, {node})[node][0]
    return Attribution(values=values, method="grad_cam", target=target)


def rank_features(attr) -> np.ndarray:
    """Feature indices by descending |value|; ties break toward lower index."""
    values = attr.values if isinstance(attr, Attribution) else as_tensor(attr)
    flat = np.abs(values).reshape(-1)
    return np.argsort(-flat, kind="stable")


# -- dump formats -------------------------------------------------------------

def write_attribution_csv(attr: Attribution, path):
    flat = attr.values.reshape(-1)
    with open(path, "w") as fh:
        fh.write("feature,value\n")
        for i, v in enumerate(flat):
            fh.write(f"{i},{float(v)!r}\n")


def write_attribution_pgm(attr: Attribution, path):
    """Min-max scaled 8-bit PGM; input must be a 2-D map."""
    v = attr.values
    if v.ndim != 2:
        raise GraphInputError(f"PGM dump needs a 2-D map, got shape {v.shape}")
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def batch_attributions(model: Model, xs, targets, method="input_gradient"):
    """Vectorized per-sample attributions for a batch; returns an ndarray."""
    xs = as_tensor(xs)
    targets = np.asarray(targets, dtype=np.int64)
    g = ComputeGraph()
    xn = g.input("x", xs.shape)
    param_nodes = {name: g.const(v) for name, v in model.params.items()}
    if method == "grad_cam":
        g, node = grad_cam_nodes(g, model.spec, param_nodes, xn, targets)
    else:
        g, node = input_gradient_nodes(g, model.spec, param_nodes, xn, targets)
    return evaluate_ids(g, {"x": xs}, {node})[node]
