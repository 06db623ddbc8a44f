"""Small MLP and CNN predictors built on the op graph.

Models are immutable after construction.  Forward passes are expressed as
graph nodes so that downstream explanation terms stay differentiable with
respect to both inputs and parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphInputError
from .graph import ComputeGraph, as_tensor, evaluate

PARAMS_MAGIC = "SLPARAMS"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    kind: str                      # "mlp" or "cnn"
    hidden: tuple                  # layer widths (mlp) or conv channels (cnn)
    input_shape: tuple             # (d,) for mlp, (c, h, w) for cnn
    output_dim: int
    activation: str = "relu"       # "relu" or "softplus"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.kind not in ("mlp", "cnn"):
            raise GraphInputError(f"unknown model kind {self.kind!r}")
        if self.activation not in ("relu", "softplus"):
            raise GraphInputError(f"unknown activation {self.activation!r}")
        if len(self.hidden) < 1 or any(h < 1 for h in self.hidden):
            raise GraphInputError("need at least one hidden layer of positive width")
        if self.output_dim < 1:
            raise GraphInputError("output_dim must be >= 1")
        if self.kind == "mlp" and len(self.input_shape) != 1:
            raise GraphInputError(f"mlp expects a flat input shape, got {self.input_shape}")
        if self.kind == "cnn" and len(self.input_shape) != 3:
            raise GraphInputError(f"cnn expects (channels, h, w), got {self.input_shape}")

    def parameter_shapes(self):
        """Ordered {name: shape} for this architecture."""
        shapes = {}
        if self.kind == "mlp":
            widths = (self.input_shape[0],) + self.hidden + (self.output_dim,)
            for i in range(len(widths) - 1):
                shapes[f"W{i}"] = (widths[i], widths[i + 1])
                shapes[f"b{i}"] = (widths[i + 1],)
        else:
            # conv(3x3)-act-conv(3x3)-act-GAP-linear; the second conv is the
            # designated saliency layer for spatial explanations
            cin = self.input_shape[0]
            channels = (cin,) + self.hidden
            for i in range(len(self.hidden)):
                shapes[f"K{i}"] = (channels[i + 1], channels[i], 3, 3)
                shapes[f"c{i}"] = (channels[i + 1],)
            shapes["Whead"] = (self.hidden[-1], self.output_dim)
            shapes["bhead"] = (self.output_dim,)
        return shapes


@dataclass
class Model:
    spec: ModelSpec
    params: dict = field(default_factory=dict)  # name -> float64 ndarray

    def __post_init__(self):
        expected = self.spec.parameter_shapes()
        if set(self.params) != set(expected):
            raise GraphInputError(
                f"parameter names {sorted(self.params)} do not match spec "
                f"{sorted(expected)}")
        for name, shape in expected.items():
            v = as_tensor(self.params[name])
            if v.shape != shape:
                raise GraphInputError(
                    f"parameter {name} has shape {v.shape}, expected {shape}")
            if not np.all(np.isfinite(v)):
                raise GraphInputError(f"parameter {name} contains non-finite values")
            self.params[name] = v


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Initialize parameters: fan-in-scaled uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.parameter_shapes().items():
        if name.startswith(("b", "c")):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return Model(spec=spec, params=params)


def add_param_inputs(g: ComputeGraph, spec: ModelSpec, prefix: str = "") -> dict:
    """Register one graph input per parameter; returns {name: node id}."""
    return {name: g.input(prefix + name, shape)
            for name, shape in spec.parameter_shapes().items()}


def param_bindings(model: Model, prefix: str = "") -> dict:
    return {prefix + name: v for name, v in model.params.items()}


def forward_nodes(g: ComputeGraph, spec: ModelSpec, param_nodes: dict, x: int):
    """Append the forward pass for a batched input node; returns logits id.

    For CNNs the post-activation map of the last conv layer is returned as
    well (``(logits, last_conv)``), since spatial explainers need it.
    """
    act = g.relu if spec.activation == "relu" else g.softplus
    if spec.kind == "mlp":
        h = x
        n_layers = len(spec.hidden) + 1
        for i in range(n_layers):
            h = g.add(g.matmul(h, param_nodes[f"W{i}"]), param_nodes[f"b{i}"])
            if i < n_layers - 1:
                h = act(h)
        return h
    h = x
    c_now = spec.input_shape[0]
    for i, ch in enumerate(spec.hidden):
        bias = g.reshape(param_nodes[f"c{i}"], (ch, 1, 1))
        h = act(g.add(g.conv2d(h, param_nodes[f"K{i}"]), bias))
        c_now = ch
    pooled = g.global_avg_pool(h)
    logits = g.add(g.matmul(pooled, param_nodes["Whead"]), param_nodes["bhead"])
    return logits, h


def build_forward_graph(model: Model, batch: int):
    """Graph computing logits for a batch of the given size, params as consts."""
    g = ComputeGraph()
    x = g.input("x", (batch,) + model.spec.input_shape)
    param_nodes = {name: g.const(v) for name, v in model.params.items()}
    out = forward_nodes(g, model.spec, param_nodes, x)
    logits = out[0] if model.spec.kind == "cnn" else out
    g.mark_output("logits", logits)
    return g, x, logits


def forward(model: Model, x) -> np.ndarray:
    """Run the predictor; accepts a single sample or a batch."""
    x = as_tensor(x)
    single = x.shape == model.spec.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != model.spec.input_shape:
        raise GraphInputError(
            f"input shape {x.shape} incompatible with model input "
            f"{model.spec.input_shape}")
    g, _, _ = build_forward_graph(model, x.shape[0])
    logits = evaluate(g, {"x": x})["logits"]
    return logits[0] if single else logits


# -- parameter serialization -------------------------------------------------
#
# Layout: a text header terminated by an END line, then the raw values.
#   SLPARAMS 1
#   kind mlp
#   hidden 8 8
#   input_shape 20
#   output_dim 2
#   activation relu
#   param W0 20 8
#   ...
#   END
# After END: for each param line in order, little-endian float64 values in
# row-major order, no padding.

def save_params(model: Model, path):
    lines = [f"{PARAMS_MAGIC} {PARAMS_VERSION}",
             f"kind {model.spec.kind}",
             "hidden " + " ".join(str(h) for h in model.spec.hidden),
             "input_shape " + " ".join(str(s) for s in model.spec.input_shape),
             f"output_dim {model.spec.output_dim}",
             f"activation {model.spec.activation}"]
    names = list(model.params)
    for name in names:
        lines.append(f"param {name} " + " ".join(str(s) for s in model.params[name].shape))
    lines.append("END\n")
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("ascii"))
        for name in names:
            fh.write(model.params[name].astype("<f8").tobytes())


def load_params(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"END\n")
    if end < 0:
        raise GraphInputError(f"{path}: missing END marker")
    header = blob[:end].decode("ascii").splitlines()
    if not header or not header[0].startswith(PARAMS_MAGIC):
        raise GraphInputError(f"{path}: not a parameter file")
    version = int(header[0].split()[1])
    if version != PARAMS_VERSION:
        raise GraphInputError(f"{path}: unsupported version {version}")
    fields = {}
    params_meta = []
    for line in header[1:]:
        key, *rest = line.split()
        if key == "param":
            params_meta.append((rest[0], tuple(int(s) for s in rest[1:])))
        else:
            fields[key] = rest
    spec = ModelSpec(kind=fields["kind"][0],
                     hidden=tuple(int(h) for h in fields["hidden"]),
                     input_shape=tuple(int(s) for s in fields["input_shape"]),
                     output_dim=int(fields["output_dim"][0]),
                     activation=fields["activation"][0])
    offset = end + 4
    params = {}
    for name, shape in params_meta:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise GraphInputError(f"{path}: truncated data for parameter {name}")
        params[name] = np.frombuffer(blob, dtype="<f8", count=count,
                                     offset=offset).reshape(shape).copy()
        offset += nbytes
    return Model(spec=spec, params=params)
