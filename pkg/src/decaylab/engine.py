"""Dense-tensor reverse-mode differentiation on a replayable tape.

The primitive-op set is deliberately small: matmul, elementwise add/multiply,
bias add, relu, mean reduction, non-affine feature normalization, and two
fused losses (softmax cross-entropy, logistic cross-entropy). All arithmetic
is float64; a reduced-precision policy, when active, rounds every primitive-op
output (and optionally every backward gradient) into the emulated format.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .precision import FULL, MixedPrecisionPolicy, NumericMode, mode_from_name, quantize

__all__ = [
    "Tensor",
    "ParamSet",
    "Tape",
    "TapeBuilder",
    "ForwardResult",
    "ShapeMismatchError",
    "NonFiniteLossError",
    "StaleTapeError",
    "forward",
    "forward_outputs",
    "gradient",
    "hvp",
    "hvp_step_size",
]


class ShapeMismatchError(ValueError):
    """Raised when a primitive op receives incompatible shapes."""


class NonFiniteLossError(FloatingPointError):
    """Raised when a full-precision forward pass produces a non-finite loss."""


class StaleTapeError(RuntimeError):
    """Raised when a tape is differentiated after its parameters changed."""


class Tensor:
    """Dense float64 array tagged with the numeric mode it is stored under."""

    __slots__ = ("data", "mode")

    def __init__(self, data, mode: str = "full"):
        self.data = np.asarray(data, dtype=np.float64)
        self.mode = mode

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.mode)

    def mode_consistent(self) -> bool:
        """True when every stored value is representable in the tagged mode."""
        if self.mode == "full":
            return True
        q = quantize(self.data, mode_from_name(self.mode))
        return bool(np.array_equal(q, self.data, equal_nan=True))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, mode={self.mode!r})"


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    role: str = "weight"  # weight | bias | norm_gain | norm_bias


class ParamSet:
    """Ordered, named collection of parameter tensors.

    Flattening concatenates entries in declaration order; unflattening is the
    exact inverse, so round trips are bit-identical.
    """

    def __init__(self, entries):
        self.entries = list(entries)
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    @property
    def total_dim(self) -> int:
        return sum(e.tensor.size for e in self.entries)

    def names(self):
        return [e.name for e in self.entries]

    def __getitem__(self, name: str) -> Tensor:
        for e in self.entries:
            if e.name == name:
                return e.tensor
        raise KeyError(name)

    def flatten(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([e.tensor.data.ravel() for e in self.entries])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.total_dim,):
            raise ValueError(f"expected flat vector of dim {self.total_dim}, got {vec.shape}")
        off = 0
        for e in self.entries:
            n = e.tensor.size
            e.tensor.data = vec[off : off + n].reshape(e.tensor.shape).copy()
            off += n

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        out = self.copy()
        out.set_flat(vec)
        return out

    def copy(self) -> "ParamSet":
        return ParamSet([ParamEntry(e.name, e.tensor.copy(), e.role) for e in self.entries])

    def norm(self) -> float:
        v = self.flatten()
        return float(np.sqrt(v @ v))

    def checksum(self) -> int:
        crc = 0
        for e in self.entries:
            crc = zlib.crc32(e.name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(e.tensor.data).tobytes(), crc)
        return crc

    def decay_mask(self, decay_norm_params: bool = True) -> np.ndarray:
        """Per-coordinate 0/1 mask selecting which parameters receive decay.

        With decay_norm_params=False, entries registered as normalization
        gains or biases are excluded.
        """
        parts = []
        for e in self.entries:
            on = decay_norm_params or e.role not in ("norm_gain", "norm_bias")
            parts.append(np.full(e.tensor.size, 1.0 if on else 0.0))
        return np.concatenate(parts) if parts else np.zeros(0)


# --------------------------------------------------------------------------
# primitive ops
#
# Each op maps (input values, static args) -> (output value, saved context).
# Backward maps (saved, input values, output grad) -> per-input grads.


def _fwd_matmul(vals, static):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b, None


def _bwd_matmul(saved, vals, g):
    a, b = vals
    return [g @ b.T, a.T @ g]


def _fwd_add(vals, static):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b, None


def _bwd_add(saved, vals, g):
    return [g, g]


def _fwd_bias_add(vals, static):
    x, b = vals
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"bias_add: bias {b.shape} does not fit {x.shape}")
    return x + b, None


def _bwd_bias_add(saved, vals, g):
    return [g, g.reshape(-1, g.shape[-1]).sum(axis=0)]


def _fwd_mul(vals, static):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return a * b, None


def _bwd_mul(saved, vals, g):
    a, b = vals
    return [g * b, g * a]


def _fwd_relu(vals, static):
    (x,) = vals
    return np.maximum(x, 0.0), None


def _bwd_relu(saved, vals, g):
    (x,) = vals
    return [g * (x > 0)]


def _fwd_mean_reduce(vals, static):
    (x,) = vals
    return np.asarray(x.mean()), None


def _bwd_mean_reduce(saved, vals, g):
    (x,) = vals
    return [np.full_like(x, float(g) / x.size)]


def _fwd_feature_norm(vals, static):
    (x,) = vals
    eps = static["eps"]
    if x.ndim != 2:
        raise ShapeMismatchError(f"feature_norm: expected rank-2 input, got {x.shape}")
    m = x.mean(axis=1, keepdims=True)
    u = x - m
    s = np.sqrt((u * u).mean(axis=1, keepdims=True))
    c = s + eps
    with np.errstate(invalid="ignore"):
        y = np.where(c > 0, u / np.where(c > 0, c, 1.0), 0.0)
    return y, (u, s, c)


def _bwd_feature_norm(saved, vals, g):
    u, s, c = saved
    gm = g.mean(axis=1, keepdims=True)
    gu = (g * u).mean(axis=1, keepdims=True)
    safe = (c > 0) & (s > 0)
    term2 = np.where(safe, gu / np.where(safe, s * c * c, 1.0), 0.0)
    with np.errstate(invalid="ignore"):
        gx = np.where(c > 0, (g - gm) / np.where(c > 0, c, 1.0), 0.0) - u * term2
    return [gx]


def _fwd_softmax_xent(vals, static):
    (z,) = vals
    labels = static["labels"]
    if z.ndim != 2:
        raise ShapeMismatchError(f"softmax_xent: logits must be rank-2, got {z.shape}")
    if labels.shape != (z.shape[0],):
        raise ShapeMismatchError(
            f"softmax_xent: labels {labels.shape} do not fit logits {z.shape}"
        )
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError("softmax_xent: label out of range")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    p = ez / denom
    logp = (z - zmax) - np.log(denom)
    loss = -logp[np.arange(z.shape[0]), labels].mean()
    return np.asarray(loss), p


def _fwd_bce_logits(vals, static):
    (z,) = vals
    y = static["targets"]
    zf = z.ravel()
    if y.shape != zf.shape:
        raise ShapeMismatchError(f"bce_logits: targets {y.shape} do not fit logits {z.shape}")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("bce_logits: targets must be 0 or 1")
    # stable: max(z,0) - z*y + log(1 + exp(-|z|))
    loss = (np.maximum(zf, 0.0) - zf * y + np.log1p(np.exp(-np.abs(zf)))).mean()
    return np.asarray(loss), None


# ops whose backward needs the static args as well
def _bwd_softmax_xent_static(saved, vals, g, static):
    p = saved
    labels = static["labels"]
    dz = p.copy()
    dz[np.arange(dz.shape[0]), labels] -= 1.0
    return [dz * (float(g) / dz.shape[0])]


def _bwd_bce_logits_static(saved, vals, g, static):
    (z,) = vals
    y = static["targets"]
    zf = z.ravel()
    sig = 1.0 / (1.0 + np.exp(-zf))
    dz = (sig - y) * (float(g) / zf.size)
    return [dz.reshape(z.shape)]


_OP_TABLE = {
    "matmul": (_fwd_matmul, _bwd_matmul, False),
    "add": (_fwd_add, _bwd_add, False),
    "bias_add": (_fwd_bias_add, _bwd_bias_add, False),
    "mul": (_fwd_mul, _bwd_mul, False),
    "relu": (_fwd_relu, _bwd_relu, False),
    "mean_reduce": (_fwd_mean_reduce, _bwd_mean_reduce, False),
    "feature_norm": (_fwd_feature_norm, _bwd_feature_norm, False),
    "softmax_xent": (_fwd_softmax_xent, _bwd_softmax_xent_static, True),
    "bce_logits": (_fwd_bce_logits, _bwd_bce_logits_static, True),
}


class Node:
    __slots__ = ("kind", "inputs", "static", "value", "saved", "requires_grad", "name")

    def __init__(self, kind, inputs, static, value, saved, requires_grad, name=None):
        self.kind = kind
        self.inputs = inputs
        self.static = static
        self.value = value
        self.saved = saved
        self.requires_grad = requires_grad
        self.name = name


class Tape:
    """Topologically ordered record of one forward execution."""

    def __init__(self, policy: MixedPrecisionPolicy | None):
        self.policy = policy if policy is not None else MixedPrecisionPolicy()
        self.nodes: list[Node] = []
        self.output: Node | None = None
        self.params_checksum: int | None = None

    @property
    def compute_mode(self) -> NumericMode:
        return self.policy.compute_mode

    def finite(self) -> bool:
        return self.output is not None and bool(np.all(np.isfinite(self.output.value)))

    def backward(self, seed=None) -> dict[str, np.ndarray]:
        """Propagate a seed gradient from the output back to the leaves."""
        if self.output is None:
            raise RuntimeError("tape has no output")
        quant = self.policy.quantize_gradients and not self.policy.is_identity
        mode = self.policy.compute_mode
        grads: dict[int, np.ndarray] = {}
        out = self.output
        if seed is None:
            if out.value.ndim != 0:
                raise ValueError("default backward seed requires a scalar output")
            seed = np.asarray(1.0)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out.value.shape:
            raise ShapeMismatchError(
                f"backward seed {seed.shape} does not match output {out.value.shape}"
            )
        grads[id(out)] = seed
        leaf_grads: dict[str, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.kind == "leaf":
                leaf_grads[node.name] = leaf_grads.get(node.name, 0.0) + g
                continue
            if node.kind == "const":
                continue
            fwd, bwd, needs_static = _OP_TABLE[node.kind]
            vals = [n.value for n in node.inputs]
            if needs_static:
                in_grads = bwd(node.saved, vals, g, node.static)
            else:
                in_grads = bwd(node.saved, vals, g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if quant:
                    ig = quantize(ig, mode)
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
        return leaf_grads

    def replay(self, policy: MixedPrecisionPolicy | None = None) -> "Tape":
        """Re-execute the recorded graph, optionally under a different policy.

        With the original policy and untouched leaf values the replayed output
        is bit-identical to the recorded one.
        """
        new = Tape(policy if policy is not None else self.policy)
        new.params_checksum = self.params_checksum
        mapping: dict[int, Node] = {}
        quantize_out = not new.policy.is_identity
        mode = new.policy.compute_mode
        for node in self.nodes:
            if node.kind in ("leaf", "const"):
                value = node.value
                if node.kind == "leaf" and quantize_out:
                    value = quantize(value, mode)
                clone = Node(node.kind, [], node.static, value, None, node.requires_grad, node.name)
            else:
                fwd, _, _ = _OP_TABLE[node.kind]
                vals = [mapping[id(i)].value for i in node.inputs]
                with np.errstate(over="ignore", invalid="ignore"):
                    value, saved = fwd(vals, node.static)
                if quantize_out:
                    value = quantize(value, mode)
                clone = Node(
                    node.kind,
                    [mapping[id(i)] for i in node.inputs],
                    node.static,
                    value,
                    saved,
                    node.requires_grad,
                    node.name,
                )
            mapping[id(node)] = clone
            new.nodes.append(clone)
        new.output = mapping[id(self.output)]
        return new


class TapeBuilder:
    """Constructs a tape by applying primitive ops to nodes."""

    def __init__(self, policy: MixedPrecisionPolicy | None = None):
        self.tape = Tape(policy)

    def _append(self, node: Node) -> Node:
        self.tape.nodes.append(node)
        return node

    def leaf(self, name: str, value: np.ndarray) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not self.tape.policy.is_identity:
            value = quantize(value, self.tape.compute_mode)
        return self._append(Node("leaf", [], None, value, None, True, name))

    def const(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not self.tape.policy.is_identity:
            value = quantize(value, self.tape.compute_mode)
        return self._append(Node("const", [], None, value, None, False))

    def _op(self, kind: str, inputs, static=None) -> Node:
        fwd, _, _ = _OP_TABLE[kind]
        vals = [n.value for n in inputs]
        with np.errstate(over="ignore", invalid="ignore"):
            value, saved = fwd(vals, static)
        if not self.tape.policy.is_identity:
            value = quantize(value, self.tape.compute_mode)
        requires = any(n.requires_grad for n in inputs)
        return self._append(Node(kind, list(inputs), static, value, saved, requires))

    def matmul(self, a: Node, b: Node) -> Node:
        return self._op("matmul", [a, b])

    def add(self, a: Node, b: Node) -> Node:
        return self._op("add", [a, b])

    def bias_add(self, x: Node, b: Node) -> Node:
        return self._op("bias_add", [x, b])

    def mul(self, a: Node, b: Node) -> Node:
        return self._op("mul", [a, b])

    def relu(self, x: Node) -> Node:
        return self._op("relu", [x])

    def mean_reduce(self, x: Node) -> Node:
        return self._op("mean_reduce", [x])

    def feature_norm(self, x: Node, eps: float = 1e-5) -> Node:
        return self._op("feature_norm", [x], {"eps": float(eps)})

    def softmax_xent(self, logits: Node, labels) -> Node:
        labels = np.asarray(labels, dtype=np.int64)
        return self._op("softmax_xent", [logits], {"labels": labels})

    def bce_logits(self, logits: Node, targets) -> Node:
        targets = np.asarray(targets, dtype=np.float64).ravel()
        return self._op("bce_logits", [logits], {"targets": targets})

    def finish(self, output: Node) -> Tape:
        self.tape.output = output
        return self.tape


@dataclass
class ForwardResult:
    loss: float
    tape: Tape
    finite: bool


def _build_leaves(tb: TapeBuilder, params: ParamSet) -> dict[str, Node]:
    return {e.name: tb.leaf(e.name, e.tensor.data) for e in params.entries}


def forward(model, params: ParamSet, batch, policy: MixedPrecisionPolicy | None = None) -> ForwardResult:
    """Run the model's loss computation, recording a replayable tape.

    In full precision a non-finite loss raises; under an emulated-precision
    policy it is reported through the `finite` flag instead so the caller can
    treat it as a divergence event.
    """
    tb = TapeBuilder(policy)
    leaves = _build_leaves(tb, params)
    out = model.build_loss(tb, leaves, batch)
    if out.value.ndim != 0:
        raise ShapeMismatchError(f"loss must be scalar, got shape {out.value.shape}")
    tape = tb.finish(out)
    tape.params_checksum = params.checksum()
    finite = tape.finite()
    if not finite and tape.policy.is_identity:
        raise NonFiniteLossError(f"non-finite loss {out.value!r} in full-precision forward")
    return ForwardResult(float(out.value), tape, finite)


def forward_outputs(model, params: ParamSet, batch, policy: MixedPrecisionPolicy | None = None):
    """Like forward() but the tape's output is the per-example model outputs."""
    tb = TapeBuilder(policy)
    leaves = _build_leaves(tb, params)
    out = model.build_logits(tb, leaves, batch.inputs)
    tape = tb.finish(out)
    tape.params_checksum = params.checksum()
    return out.value.copy(), tape


def gradient(tape: Tape, params: ParamSet) -> np.ndarray:
    """Flat gradient of the tape's scalar output w.r.t. the parameter set."""
    if tape.params_checksum is not None and params.checksum() != tape.params_checksum:
        raise StaleTapeError("parameters changed since this tape was recorded")
    leaf_grads = tape.backward()
    parts = []
    for e in params.entries:
        g = leaf_grads.get(e.name)
        parts.append(np.zeros(e.tensor.size) if g is None else np.asarray(g).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def hvp_step_size(w_norm: float, v_norm: float) -> float:
    return float(np.sqrt(np.finfo(np.float64).eps) * (1.0 + w_norm) / max(v_norm, 1.0))


def hvp(model, params: ParamSet, batch, v: np.ndarray, policy: MixedPrecisionPolicy | None = None) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (params.total_dim,):
        raise ValueError(f"probe vector must have dim {params.total_dim}, got {v.shape}")
    v_norm = float(np.linalg.norm(v))
    if v_norm == 0.0:
        raise ValueError("probe vector must be nonzero")
    w = params.flatten()
    h = hvp_step_size(float(np.linalg.norm(w)), v_norm)
    plus = params.unflatten(w + h * v)
    minus = params.unflatten(w - h * v)
    g_plus = gradient(forward(model, plus, batch, policy).tape, plus)
    g_minus = gradient(forward(model, minus, batch, policy).tape, minus)
    return (g_plus - g_minus) / (2.0 * h)
