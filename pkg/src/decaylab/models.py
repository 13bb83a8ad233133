"""Small differentiable MLPs and their loss functions.

Models are built against the tape engine's primitive ops. A transform is
provided that makes an MLP's predictions 0-homogeneous in its trainable
parameters (fixed output layer, non-affine normalization after every
trainable linear layer, normalization on skip-block outputs).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .engine import ParamEntry, ParamSet, Tensor

__all__ = [
    "MLPSpec",
    "Mlp",
    "build_mlp",
    "make_scale_invariant",
    "loss_crossentropy",
    "loss_bce",
    "loss_sq",
]


@dataclass(frozen=True)
class MLPSpec:
    layer_widths: tuple
    normalization: str = "none"  # none | non_affine
    skip_connections: bool = False
    last_layer_fixed: bool = False
    init_std: float = 1.0  # multiplier on the He fan-in scale
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("need at least an input and an output width")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if self.normalization not in ("none", "non_affine"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @staticmethod
    def from_dict(d: dict) -> "MLPSpec":
        allowed = {
            "layer_widths",
            "normalization",
            "skip_connections",
            "last_layer_fixed",
            "init_std",
            "norm_eps",
        }
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        if "layer_widths" not in d:
            raise ValueError("model config requires layer_widths")
        return MLPSpec(
            layer_widths=tuple(d["layer_widths"]),
            normalization=d.get("normalization", "none"),
            skip_connections=bool(d.get("skip_connections", False)),
            last_layer_fixed=bool(d.get("last_layer_fixed", False)),
            init_std=float(d.get("init_std", 1.0)),
            norm_eps=float(d.get("norm_eps", 1e-5)),
        )

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "normalization": self.normalization,
            "skip_connections": self.skip_connections,
            "last_layer_fixed": self.last_layer_fixed,
            "init_std": self.init_std,
            "norm_eps": self.norm_eps,
        }


def make_scale_invariant(spec: MLPSpec) -> MLPSpec:
    """Rewrite a spec so predictions are invariant to positive scaling of all
    trainable parameters.

    The output layer is frozen, every trainable linear layer is followed by
    non-affine normalization (also on skip-block outputs), and the
    normalization epsilon is dropped so the invariance is exact rather than
    epsilon-limited: each pre-normalization activation is 1-homogeneous in the
    layer's weights, and dividing by the activation std cancels the scale.
    """
    if len(spec.layer_widths) < 3:
        raise ValueError("scale-invariant transform needs at least one hidden layer")
    return replace(
        spec,
        last_layer_fixed=True,
        normalization="non_affine",
        norm_eps=0.0,
    )


class Mlp:
    """Fully connected ReLU network over the tape engine.

    Layout per hidden layer: linear -> [feature_norm] -> relu, with an
    optional identity skip (block output normalized before the add). The
    output layer is linear; when frozen its weights live on the model as
    constants instead of in the trainable ParamSet.
    """

    def __init__(self, spec: MLPSpec, fixed_w=None, fixed_b=None):
        self.spec = spec
        self.fixed_w = fixed_w
        self.fixed_b = fixed_b
        if spec.last_layer_fixed and fixed_w is None:
            raise ValueError("last_layer_fixed spec requires fixed output weights")

    @property
    def in_dim(self) -> int:
        return self.spec.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.spec.layer_widths[-1]

    def build_logits(self, tb, leaves, inputs):
        spec = self.spec
        x = tb.const(np.asarray(inputs, dtype=np.float64))
        widths = spec.layer_widths
        n_hidden = len(widths) - 2
        for i in range(n_hidden):
            z = tb.bias_add(tb.matmul(x, leaves[f"w{i}"]), leaves[f"b{i}"])
            if spec.normalization == "non_affine":
                z = tb.feature_norm(z, spec.norm_eps)
            h = tb.relu(z)
            if spec.skip_connections and widths[i] == widths[i + 1]:
                x = tb.add(x, h)
            else:
                x = h
        k = n_hidden
        if spec.last_layer_fixed:
            w_out = tb.const(self.fixed_w)
            logits = tb.matmul(x, w_out)
            if self.fixed_b is not None:
                logits = tb.bias_add(logits, tb.const(self.fixed_b))
        else:
            logits = tb.bias_add(tb.matmul(x, leaves[f"w{k}"]), leaves[f"b{k}"])
        return logits

    def build_loss(self, tb, leaves, batch):
        logits = self.build_logits(tb, leaves, batch.inputs)
        labels = np.asarray(batch.labels)
        if np.issubdtype(labels.dtype, np.integer):
            if self.out_dim == 1:
                return tb.bce_logits(logits, labels.astype(np.float64))
            return tb.softmax_xent(logits, labels)
        # regression: 0.5 * mean over examples of squared-error sums; the
        # constant rescales the all-elements mean into a per-example mean
        targets = labels.reshape(logits.value.shape[0], -1).astype(np.float64)
        diff = tb.add(logits, tb.const(-targets))
        sq = tb.mul(diff, diff)
        scale = tb.const(np.full(sq.value.shape, 0.5 * targets.shape[1]))
        return tb.mean_reduce(tb.mul(sq, scale))

    def output_loss_hessians(self, logits, labels) -> np.ndarray:
        """Per-example Hessian of the per-example loss w.r.t. the outputs.

        Returns an array of shape (batch, out_dim, out_dim) matching the loss
        selected by build_loss for these labels.
        """
        labels = np.asarray(labels)
        z = np.asarray(logits, dtype=np.float64)
        b, c = z.shape[0], z.shape[1] if z.ndim == 2 else 1
        z = z.reshape(b, c)
        if np.issubdtype(labels.dtype, np.integer):
            if c == 1:
                sig = 1.0 / (1.0 + np.exp(-z[:, 0]))
                return (sig * (1.0 - sig)).reshape(b, 1, 1)
            zmax = z.max(axis=1, keepdims=True)
            ez = np.exp(z - zmax)
            p = ez / ez.sum(axis=1, keepdims=True)
            return np.einsum("bi,ij->bij", p, np.eye(c)) - np.einsum("bi,bj->bij", p, p)
        # 0.5 * ||z - y||^2 per example
        return np.broadcast_to(np.eye(c), (b, c, c)).copy()


def build_mlp(spec: MLPSpec, seed: int):
    """Deterministically construct an MLP and its trainable ParamSet.

    Weights use He initialization (normal with std init_std * sqrt(2/fan_in));
    biases start at zero. With last_layer_fixed the output weights are drawn
    from the same stream but held constant on the model.
    """
    rng = np.random.default_rng(seed)
    widths = spec.layer_widths
    entries = []
    fixed_w = fixed_b = None
    n_layers = len(widths) - 1
    for i in range(n_layers):
        fan_in, fan_out = widths[i], widths[i + 1]
        w = rng.standard_normal((fan_in, fan_out)) * (spec.init_std * np.sqrt(2.0 / fan_in))
        b = np.zeros(fan_out)
        if i == n_layers - 1 and spec.last_layer_fixed:
            fixed_w, fixed_b = w, b
        else:
            entries.append(ParamEntry(f"w{i}", Tensor(w), "weight"))
            entries.append(ParamEntry(f"b{i}", Tensor(b), "bias"))
    return Mlp(spec, fixed_w, fixed_b), ParamSet(entries)


# --------------------------------------------------------------------------
# standalone loss functions (plain arrays, mean over the batch)


def loss_crossentropy(logits, labels) -> float:
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError("label out of range")
    zmax = z.max(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(z.shape[0]), labels].mean())


def loss_bce(logits, labels) -> float:
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if np.any((y != 0) & (y != 1)):
        raise ValueError("binary labels must be 0 or 1")
    return float((np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean())


def loss_sq(pred, target) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    p2 = p.reshape(p.shape[0], -1)
    t2 = t.reshape(t.shape[0], -1)
    return float(0.5 * ((p2 - t2) ** 2).sum(axis=1).mean())
