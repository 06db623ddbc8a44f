"""Reverse-mode differentiation over an explicit operation graph.

Values are float64 numpy arrays throughout.  Gradients are emitted as new
graph nodes (not a tape replay), so the output of :func:`derive` is an
ordinary graph that can itself be differentiated again.  That structural
property is what makes losses containing input gradients trainable.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphInputError, NumericError, UnsupportedOpError

__all__ = [
    "ComputeGraph",
    "GradCheckReport",
    "derive",
    "evaluate",
    "finite_difference_check",
]


def as_tensor(value):
    """Coerce to a float64 ndarray (the package's tensor carrier)."""
    return np.asarray(value, dtype=np.float64)


class Node:
    __slots__ = ("op", "parents", "payload", "shape")

    def __init__(self, op, parents, shape, payload=None):
        self.op = op
        self.parents = parents
        self.shape = shape
        self.payload = payload

    def __repr__(self):
        return f"Node({self.op}, parents={self.parents}, shape={self.shape})"


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_coordinate: tuple  # (node id, flat index)
    step_size: float


class ComputeGraph:
    """Acyclic op graph in topological order (parents precede children).

    Builder methods append a node and return its integer id.  Shapes are
    inferred and validated at construction time so that evaluation and
    differentiation never have to guess.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.outputs: dict[str, int] = {}

    def copy(self):
        g = ComputeGraph()
        g.nodes = list(self.nodes)
        g.inputs = dict(self.inputs)
        g.outputs = dict(self.outputs)
        return g

    def shape(self, nid):
        return self.nodes[nid].shape

    def mark_output(self, name, nid):
        self._check_id(nid)
        self.outputs[name] = nid

    # -- node construction -------------------------------------------------

    def _check_id(self, nid):
        if not (isinstance(nid, (int, np.integer)) and 0 <= nid < len(self.nodes)):
            raise GraphInputError(f"unknown node id {nid!r}")

    def _append(self, op, parents, shape, payload=None):
        for p in parents:
            self._check_id(p)
        self.nodes.append(Node(op, tuple(parents), tuple(shape), payload))
        return len(self.nodes) - 1

    def input(self, name, shape):
        if name in self.inputs:
            raise GraphInputError(f"duplicate input name {name!r}")
        nid = self._append("input", (), tuple(int(s) for s in shape), {"name": name})
        self.inputs[name] = nid
        return nid

    def const(self, value):
        v = as_tensor(value)
        return self._append("const", (), v.shape, {"value": v})

    def _broadcast_binary(self, op, a, b):
        sa, sb = self.shape(a), self.shape(b)
        try:
            out = np.broadcast_shapes(sa, sb)
        except ValueError:
            raise GraphInputError(f"{op}: incompatible shapes {sa} and {sb}") from None
        return self._append(op, (a, b), out)

    def add(self, a, b):
        return self._broadcast_binary("add", a, b)

    def subtract(self, a, b):
        return self._broadcast_binary("subtract", a, b)

    def multiply(self, a, b):
        return self._broadcast_binary("multiply", a, b)

    def scale(self, a, factor):
        return self._append("scale", (a,), self.shape(a), {"factor": float(factor)})

    def matmul(self, a, b):
        sa, sb = self.shape(a), self.shape(b)
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            raise GraphInputError(f"matmul: incompatible shapes {sa} and {sb}")
        return self._append("matmul", (a, b), (sa[0], sb[1]))

    def transpose(self, a):
        sa = self.shape(a)
        if len(sa) != 2:
            raise GraphInputError(f"transpose: expected 2-D, got {sa}")
        return self._append("transpose", (a,), (sa[1], sa[0]))

    def conv2d(self, x, k, pad=None):
        """stride-1 zero-padded 2-D convolution; pad defaults to 'same'."""
        sx, sk = self.shape(x), self.shape(k)
        if len(sx) != 4 or len(sk) != 4:
            raise GraphInputError(f"conv2d: expected 4-D operands, got {sx} and {sk}")
        if sx[1] != sk[1]:
            raise GraphInputError(f"conv2d: channel mismatch {sx} vs {sk}")
        if pad is None:
            pad = ((sk[2] - 1) // 2, (sk[3] - 1) // 2)
        ph, pw = pad
        oh = sx[2] + 2 * ph - sk[2] + 1
        ow = sx[3] + 2 * pw - sk[3] + 1
        if oh < 1 or ow < 1:
            raise GraphInputError(f"conv2d: kernel {sk} too large for input {sx}")
        return self._append("conv2d", (x, k), (sx[0], sk[0], oh, ow), {"pad": (ph, pw)})

    def conv2d_input_grad(self, u, k, pad):
        su, sk = self.shape(u), self.shape(k)
        ph, pw = pad
        h = su[2] - 2 * ph + sk[2] - 1
        w = su[3] - 2 * pw + sk[3] - 1
        return self._append("conv2d_input_grad", (u, k), (su[0], sk[1], h, w), {"pad": (ph, pw)})

    def conv2d_kernel_grad(self, x, u, pad):
        sx, su = self.shape(x), self.shape(u)
        ph, pw = pad
        kh = sx[2] + 2 * ph - su[2] + 1
        kw = sx[3] + 2 * pw - su[3] + 1
        return self._append("conv2d_kernel_grad", (x, u), (su[1], sx[1], kh, kw), {"pad": (ph, pw)})

    def _unary(self, op, a):
        return self._append(op, (a,), self.shape(a))

    def relu(self, a):
        return self._unary("relu", a)

    def softplus(self, a):
        return self._unary("softplus", a)

    def sigmoid(self, a):
        return self._unary("sigmoid", a)

    def abs(self, a):
        return self._unary("abs", a)

    def signum(self, a):
        return self._unary("signum", a)

    def posmask(self, a):
        return self._unary("posmask", a)

    def log(self, a):
        return self._unary("log", a)

    def stop_gradient(self, a):
        """Identity forward; blocks gradient flow (used to freeze subterms)."""
        return self._unary("stop_gradient", a)

    def reciprocal(self, a):
        return self._unary("reciprocal", a)

    def softmax(self, a):
        if len(self.shape(a)) < 1:
            raise GraphInputError("softmax: scalar operand")
        return self._unary("softmax", a)

    def cross_entropy_with_logits(self, logits, labels):
        s = self.shape(logits)
        labels = np.asarray(labels, dtype=np.int64)
        if len(s) != 2 or labels.shape != (s[0],):
            raise GraphInputError(f"cross_entropy: logits {s} vs labels {labels.shape}")
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= s[1]:
            raise GraphInputError("cross_entropy: label out of range")
        return self._append("cross_entropy_with_logits", (logits,), (s[0],), {"labels": labels})

    def squared_error(self, a, b):
        if self.shape(a) != self.shape(b):
            raise GraphInputError(
                f"squared_error: shapes {self.shape(a)} and {self.shape(b)} differ")
        return self._append("squared_error", (a, b), self.shape(a))

    def _reduce(self, op, a, axes, keepdims):
        sa = self.shape(a)
        if axes is None:
            axes_n = tuple(range(len(sa)))
        else:
            axes_n = tuple(ax % len(sa) for ax in axes)
            if len(set(axes_n)) != len(axes_n):
                raise GraphInputError(f"{op}: repeated axis in {axes}")
        if keepdims:
            shape = tuple(1 if i in axes_n else s for i, s in enumerate(sa))
        else:
            shape = tuple(s for i, s in enumerate(sa) if i not in axes_n)
        return self._append(op, (a,), shape, {"axes": axes_n, "keepdims": keepdims})

    def sum(self, a, axes=None, keepdims=False):
        return self._reduce("sum", a, axes, keepdims)

    def mean(self, a, axes=None, keepdims=False):
        return self._reduce("mean", a, axes, keepdims)

    def global_avg_pool(self, a):
        sa = self.shape(a)
        if len(sa) != 4:
            raise GraphInputError(f"global_avg_pool: expected 4-D, got {sa}")
        return self._append("global_avg_pool", (a,), sa[:2])

    def bilinear_upsample(self, a, factor):
        sa = self.shape(a)
        if len(sa) != 4 or factor < 1:
            raise GraphInputError(f"bilinear_upsample: bad operand {sa} or factor {factor}")
        f = int(factor)
        return self._append("bilinear_upsample", (a,),
                            (sa[0], sa[1], sa[2] * f, sa[3] * f), {"factor": f})

    def bilinear_upsample_adjoint(self, a, factor):
        sa = self.shape(a)
        f = int(factor)
        if len(sa) != 4 or sa[2] % f or sa[3] % f:
            raise GraphInputError(f"bilinear_upsample_adjoint: {sa} not divisible by {f}")
        return self._append("bilinear_upsample_adjoint", (a,),
                            (sa[0], sa[1], sa[2] // f, sa[3] // f), {"factor": f})

    def reshape(self, a, shape):
        sa = self.shape(a)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(sa, dtype=np.int64)) != int(np.prod(shape, dtype=np.int64)):
            raise GraphInputError(f"reshape: cannot reshape {sa} to {shape}")
        return self._append("reshape", (a,), shape, {"shape": shape})

    def broadcast_to(self, a, shape):
        sa = self.shape(a)
        shape = tuple(int(s) for s in shape)
        try:
            if np.broadcast_shapes(sa, shape) != shape:
                raise ValueError
        except ValueError:
            raise GraphInputError(f"broadcast_to: cannot broadcast {sa} to {shape}") from None
        return self._append("broadcast_to", (a,), shape, {"shape": shape})


# -- forward evaluation ----------------------------------------------------

@lru_cache(maxsize=None)
def _bilinear_matrix(n, factor):
    """1-D interpolation weights mapping n samples to factor*n (edge clamped)."""
    out = np.zeros((factor * n, n))
    for i in range(factor * n):
        src = (i + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        lo = min(max(i0, 0), n - 1)
        hi = min(max(i0 + 1, 0), n - 1)
        out[i, lo] += 1.0 - t
        out[i, hi] += t
    return out


def _conv2d_raw(x, k, pad):
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (k.shape[2], k.shape[3]), axis=(2, 3))
    return np.einsum("ncijpq,ocpq->noij", win, k)


def _conv2d_input_grad_raw(u, k, pad):
    ph, pw = pad
    k2 = np.flip(k, (2, 3)).transpose(1, 0, 2, 3)
    return _conv2d_raw(u, k2, (k.shape[2] - 1 - ph, k.shape[3] - 1 - pw))


def _conv2d_kernel_grad_raw(x, u, pad):
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (u.shape[2], u.shape[3]), axis=(2, 3))
    return np.einsum("ncpqij,noij->ocpq", win, u)


def _softmax_raw(z):
    m = z - z.max(axis=-1, keepdims=True)
    e = np.exp(m)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(node, vals):
    op = node.op
    if op == "add":
        return vals[0] + vals[1]
    if op == "subtract":
        return vals[0] - vals[1]
    if op == "multiply":
        return vals[0] * vals[1]
    if op == "scale":
        return vals[0] * node.payload["factor"]
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "transpose":
        return vals[0].T
    if op == "conv2d":
        return _conv2d_raw(vals[0], vals[1], node.payload["pad"])
    if op == "conv2d_input_grad":
        return _conv2d_input_grad_raw(vals[0], vals[1], node.payload["pad"])
    if op == "conv2d_kernel_grad":
        return _conv2d_kernel_grad_raw(vals[0], vals[1], node.payload["pad"])
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "softplus":
        # overflow-safe: log(1+e^x) = max(x,0) + log1p(e^-|x|)
        x = vals[0]
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    if op == "sigmoid":
        x = vals[0]
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if op == "abs":
        return np.abs(vals[0])
    if op == "signum":
        return np.sign(vals[0])
    if op == "posmask":
        return (vals[0] > 0).astype(np.float64)
    if op == "log":
        return np.log(vals[0])
    if op == "reciprocal":
        return 1.0 / vals[0]
    if op == "softmax":
        return _softmax_raw(vals[0])
    if op == "cross_entropy_with_logits":
        z = vals[0]
        labels = node.payload["labels"]
        m = z.max(axis=-1)
        lse = m + np.log(np.exp(z - m[:, None]).sum(axis=-1))
        return lse - z[np.arange(z.shape[0]), labels]
    if op == "squared_error":
        d = vals[0] - vals[1]
        return d * d
    if op == "sum":
        return vals[0].sum(axis=node.payload["axes"], keepdims=node.payload["keepdims"])
    if op == "mean":
        return vals[0].mean(axis=node.payload["axes"], keepdims=node.payload["keepdims"])
    if op == "global_avg_pool":
        return vals[0].mean(axis=(2, 3))
    if op == "bilinear_upsample":
        x = vals[0]
        wh = _bilinear_matrix(x.shape[2], node.payload["factor"])
        ww = _bilinear_matrix(x.shape[3], node.payload["factor"])
        return np.einsum("ij,ncjk,lk->ncil", wh, x, ww)
    if op == "bilinear_upsample_adjoint":
        u = vals[0]
        f = node.payload["factor"]
        wh = _bilinear_matrix(u.shape[2] // f, f)
        ww = _bilinear_matrix(u.shape[3] // f, f)
        return np.einsum("ij,ncil,lk->ncjk", wh, u, ww)
    if op == "stop_gradient":
        return vals[0]
    if op == "reshape":
        return vals[0].reshape(node.payload["shape"])
    if op == "broadcast_to":
        return np.broadcast_to(vals[0], node.payload["shape"])
    raise UnsupportedOpError(f"no forward rule for op {op!r}")


def _needed_ids(graph, targets):
    needed = set()
    stack = list(targets)
    while stack:
        nid = stack.pop()
        if nid in needed:
            continue
        needed.add(nid)
        stack.extend(graph.nodes[nid].parents)
    return needed


def evaluate_ids(graph, bindings, ids, check_finite=True, overrides=None):
    """Evaluate the given node ids; returns {id: ndarray}."""
    overrides = overrides or {}
    needed = _needed_ids(graph, ids)
    values = [None] * len(graph.nodes)
    for nid in sorted(needed):
        node = graph.nodes[nid]
        if nid in overrides:
            v = as_tensor(overrides[nid])
            if v.shape != node.shape:
                raise GraphInputError(
                    f"override for node {nid} has shape {v.shape}, expected {node.shape}")
        elif node.op == "input":
            name = node.payload["name"]
            if name not in bindings:
                raise GraphInputError(f"input {name!r} (node {nid}) is unbound")
            v = as_tensor(bindings[name])
            if v.shape != node.shape:
                raise GraphInputError(
                    f"input {name!r} has shape {v.shape}, expected {node.shape}")
        elif node.op == "const":
            v = node.payload["value"]
        else:
            v = _forward(node, [values[p] for p in node.parents])
        if check_finite and not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite value at node {nid} ({node.op})")
        values[nid] = v
    return {nid: values[nid] for nid in ids}


def evaluate(graph, bindings, check_finite=True):
    """Evaluate every designated output of the graph; returns {name: ndarray}."""
    if not graph.outputs:
        raise GraphInputError("graph has no designated outputs")
    by_id = evaluate_ids(graph, bindings, set(graph.outputs.values()),
                         check_finite=check_finite)
    return {name: by_id[nid] for name, nid in graph.outputs.items()}


# -- reverse-mode differentiation -------------------------------------------

def _reduce_to(g, u, to_shape):
    """Sum a broadcast adjoint back down to the operand's shape."""
    from_shape = g.shape(u)
    if from_shape == to_shape:
        return u
    ndiff = len(from_shape) - len(to_shape)
    axes = list(range(ndiff))
    for i, t in enumerate(to_shape):
        if t == 1 and from_shape[i + ndiff] != 1:
            axes.append(i + ndiff)
    s = g.sum(u, axes=tuple(axes), keepdims=True) if axes else u
    return g.reshape(s, to_shape)


def _vjp(g, nid, node, u):
    """Return [(parent id, adjoint contribution id), ...] for one node."""
    op = node.op
    a = node.parents[0] if node.parents else None
    b = node.parents[1] if len(node.parents) > 1 else None
    if op in ("input", "const"):
        return []
    if op == "add":
        return [(a, _reduce_to(g, u, g.shape(a))), (b, _reduce_to(g, u, g.shape(b)))]
    if op == "subtract":
        return [(a, _reduce_to(g, u, g.shape(a))),
                (b, _reduce_to(g, g.scale(u, -1.0), g.shape(b)))]
    if op == "multiply":
        return [(a, _reduce_to(g, g.multiply(u, b), g.shape(a))),
                (b, _reduce_to(g, g.multiply(u, a), g.shape(b)))]
    if op == "scale":
        return [(a, g.scale(u, node.payload["factor"]))]
    if op == "matmul":
        return [(a, g.matmul(u, g.transpose(b))), (b, g.matmul(g.transpose(a), u))]
    if op == "transpose":
        return [(a, g.transpose(u))]
    if op == "conv2d":
        pad = node.payload["pad"]
        return [(a, g.conv2d_input_grad(u, b, pad)), (b, g.conv2d_kernel_grad(a, u, pad))]
    if op == "conv2d_input_grad":
        # node = adjoint-of-conv2d applied to (a=upstream image grad, b=kernel)
        pad = node.payload["pad"]
        return [(a, g.conv2d(u, b, pad)), (b, g.conv2d_kernel_grad(u, a, pad))]
    if op == "conv2d_kernel_grad":
        pad = node.payload["pad"]
        return [(a, g.conv2d_input_grad(b, u, pad)), (b, g.conv2d(a, u, pad))]
    if op == "relu":
        return [(a, g.multiply(u, g.posmask(a)))]
    if op == "softplus":
        return [(a, g.multiply(u, g.sigmoid(a)))]
    if op == "sigmoid":
        one = g.const(np.ones(node.shape))
        return [(a, g.multiply(g.multiply(u, nid), g.subtract(one, nid)))]
    if op == "abs":
        return [(a, g.multiply(u, g.signum(a)))]
    if op in ("signum", "posmask", "stop_gradient"):
        # piecewise-constant: derivative 0 everywhere by convention
        return []
    if op == "log":
        return [(a, g.multiply(u, g.reciprocal(a)))]
    if op == "reciprocal":
        return [(a, g.scale(g.multiply(u, g.multiply(nid, nid)), -1.0))]
    if op == "softmax":
        t = g.multiply(u, nid)
        inner = g.sum(t, axes=(-1,), keepdims=True)
        return [(a, g.multiply(nid, g.subtract(u, inner)))]
    if op == "cross_entropy_with_logits":
        labels = node.payload["labels"]
        k = g.shape(a)[1]
        onehot = g.const(np.eye(k)[labels])
        diff = g.subtract(g.softmax(a), onehot)
        return [(a, g.multiply(diff, g.reshape(u, (g.shape(a)[0], 1))))]
    if op == "squared_error":
        d = g.scale(g.subtract(a, b), 2.0)
        return [(a, g.multiply(u, d)), (b, g.scale(g.multiply(u, d), -1.0))]
    if op in ("sum", "mean"):
        axes, keepdims = node.payload["axes"], node.payload["keepdims"]
        sa = g.shape(a)
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(sa))
            u = g.reshape(u, kshape)
        spread = g.broadcast_to(u, sa)
        if op == "mean":
            count = int(np.prod([sa[i] for i in axes], dtype=np.int64)) if axes else 1
            spread = g.scale(spread, 1.0 / max(count, 1))
        return [(a, spread)]
    if op == "global_avg_pool":
        n, c, h, w = g.shape(a)
        spread = g.broadcast_to(g.reshape(u, (n, c, 1, 1)), (n, c, h, w))
        return [(a, g.scale(spread, 1.0 / (h * w)))]
    if op == "bilinear_upsample":
        return [(a, g.bilinear_upsample_adjoint(u, node.payload["factor"]))]
    if op == "bilinear_upsample_adjoint":
        return [(a, g.bilinear_upsample(u, node.payload["factor"]))]
    if op == "reshape":
        return [(a, g.reshape(u, g.shape(a)))]
    if op == "broadcast_to":
        return [(a, _reduce_to(g, u, g.shape(a)))]
    raise UnsupportedOpError(f"no derivative rule for op {op!r}")


def derive(graph, scalar_output, wrt):
    """Extend the graph with nodes computing d(scalar_output)/d(each wrt node).

    Returns ``(extended_graph, {wrt id: gradient node id})``.  The extension
    consists only of primitive ops, so it can be differentiated again.
    """
    wrt = list(wrt)
    g = graph.copy()
    g._check_id(scalar_output)
    if g.shape(scalar_output) != ():
        raise GraphInputError(
            f"derive: output node {scalar_output} has shape "
            f"{g.shape(scalar_output)}, expected a scalar")
    for w in wrt:
        g._check_id(w)

    # adjoint accumulation over the ancestors of the output
    reachable = _needed_ids(g, [scalar_output])
    contributions = {scalar_output: [g.const(np.ones(()))]}
    grads = {}
    for nid in sorted(reachable, reverse=True):
        contrib = contributions.pop(nid, None)
        if not contrib:
            continue
        u = contrib[0]
        for extra in contrib[1:]:
            u = g.add(u, extra)
        grads[nid] = u
        for parent, piece in _vjp(g, nid, g.nodes[nid], u):
            contributions.setdefault(parent, []).append(piece)

    result = {}
    for w in wrt:
        if w in grads:
            result[w] = grads[w]
        else:
            result[w] = g.const(np.zeros(g.shape(w)))  # not on any path
        g.outputs[f"d_{w}"] = result[w]
    return g, result


def finite_difference_check(graph, scalar_output, wrt, bindings, step=1e-5):
    """Central-difference oracle for derive; independent of the VJP rules."""
    if step <= 0:
        raise GraphInputError("finite_difference_check: step must be positive")
    wrt = list(wrt)
    dgraph, grad_ids = derive(graph, scalar_output, wrt)
    analytic = evaluate_ids(dgraph, bindings, set(grad_ids.values()))

    def value_at(nid, override=None):
        overrides = {} if override is None else {nid: override}
        return float(evaluate_ids(graph, bindings, {scalar_output},
                                  overrides=overrides)[scalar_output])

    worst = (0.0, (wrt[0] if wrt else -1, 0))
    for w in wrt:
        node = graph.nodes[w]
        if node.op == "input":
            base = as_tensor(bindings[node.payload["name"]]).copy()
        elif node.op == "const":
            base = node.payload["value"].copy()
        else:
            raise GraphInputError(
                f"finite_difference_check: node {w} ({node.op}) is not a leaf")
        an = analytic[grad_ids[w]]
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value_at(w, base.reshape(node.shape))
            flat[i] = orig - step
            fm = value_at(w, base.reshape(node.shape))
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            ana = an.reshape(-1)[i] if an.shape else float(an)
            # floor at 1 so near-zero gradients are compared absolutely:
            # central differences carry O(eps/step) roundoff noise that would
            # otherwise dominate a purely relative comparison
            denom = max(abs(ana), abs(num), 1.0)
            rel = abs(ana - num) / denom
            if rel > worst[0]:
                worst = (rel, (w, i))
    return GradCheckReport(max_relative_error=worst[0],
                           worst_coordinate=worst[1], step_size=step)
