"""Measurement machinery: curvature traces, gradient-noise geometry,
effective learning rate, iterate averaging, and loss-series detectors.

Probes are read-only on a parameter snapshot and never feed back into
training updates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .engine import ParamSet, forward, forward_outputs, gradient, hvp, hvp_step_size

logger = logging.getLogger(__name__)

__all__ = [
    "ProbeRecord",
    "AveragerState",
    "per_example_gradients",
    "hutchinson_trace",
    "noise_scale",
    "matrix_cosine_mc",
    "cov_hessian_cosine",
    "gauss_newton_vp",
    "effective_lr",
    "ema_update",
    "tail_average",
    "detect_stabilization",
    "detect_divergence",
    "evaluate_regularized_objective",
]


@dataclass
class ProbeRecord:
    step: int
    train_loss: float
    reg_loss: float
    test_metric: float
    param_norm: float
    grad_norm: float
    noise_scale: float
    eff_lr: float
    trace_estimate: float
    trace_stderr: float
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "train_loss": self.train_loss,
            "reg_loss": self.reg_loss,
            "test_metric": self.test_metric,
            "param_norm": self.param_norm,
            "grad_norm": self.grad_norm,
            "noise_scale": self.noise_scale,
            "eff_lr": self.eff_lr,
            "trace_estimate": self.trace_estimate,
            "trace_stderr": self.trace_stderr,
            "flags": sorted(self.flags),
        }

    @staticmethod
    def from_dict(d: dict) -> "ProbeRecord":
        return ProbeRecord(
            step=int(d["step"]),
            train_loss=float(d["train_loss"]),
            reg_loss=float(d["reg_loss"]),
            test_metric=float(d["test_metric"]),
            param_norm=float(d["param_norm"]),
            grad_norm=float(d["grad_norm"]),
            noise_scale=float(d["noise_scale"]),
            eff_lr=float(d["eff_lr"]),
            trace_estimate=float(d["trace_estimate"]),
            trace_stderr=float(d["trace_stderr"]),
            flags=list(d.get("flags", [])),
        )


def per_example_gradients(model, params: ParamSet, batch) -> np.ndarray:
    """Stack of per-example loss gradients, shape (n, total_dim)."""
    grads = np.empty((batch.n, params.total_dim))
    for i in range(batch.n):
        res = forward(model, params, batch.example(i))
        grads[i] = gradient(res.tape, params)
    return grads


def hutchinson_trace(model, params: ParamSet, batch, k: int, seed: int, policy=None):
    """Stochastic trace of the loss Hessian from k Rademacher probes.

    Returns (estimate, stderr); the estimate is unbiased for the exact trace
    up to the finite-difference error of the underlying Hessian-vector
    products.
    """
    if k < 1:
        raise ValueError("need at least one probe")
    rng = np.random.default_rng(seed)
    dim = params.total_dim
    samples = np.empty(k)
    for i in range(k):
        v = rng.integers(0, 2, size=dim) * 2.0 - 1.0
        samples[i] = float(v @ hvp(model, params, batch, v, policy))
    estimate = float(samples.mean())
    stderr = float(samples.std(ddof=1) / np.sqrt(k)) if k > 1 else 0.0
    return estimate, stderr


def noise_scale(model, params: ParamSet, dataset) -> float:
    """Exact single-sample gradient-noise scale E||g||^2 over the dataset.

    Computed as (1/n) sum_i ||grad_i - grad_mean||^2 by full enumeration.
    """
    if dataset.n < 2:
        raise ValueError("noise scale needs at least two examples")
    grads = per_example_gradients(model, params, dataset)
    mean = grads.mean(axis=0)
    diffs = grads - mean
    return float((diffs * diffs).sum(axis=1).mean())


def matrix_cosine_mc(apply_a, apply_b, dim: int, k: int, seed: int):
    """Monte-Carlo E_v[cos(A v, B v)] over Gaussian probes.

    Probes where either image has zero norm are skipped (and logged).
    Returns (mean, stderr).
    """
    if k < 1:
        raise ValueError("need at least one probe")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(k):
        v = rng.standard_normal(dim)
        av, bv = apply_a(v), apply_b(v)
        na, nb = np.linalg.norm(av), np.linalg.norm(bv)
        if na == 0.0 or nb == 0.0:
            logger.warning("matrix_cosine_mc: zero-norm image, probe skipped")
            continue
        vals.append(float(av @ bv / (na * nb)))
    if not vals:
        raise ValueError("all probes produced zero-norm images")
    arr = np.asarray(vals)
    stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return float(arr.mean()), stderr


def cov_hessian_cosine(model, params: ParamSet, dataset, k: int, seed: int) -> float:
    """Cosine similarity between the Hessian and the gradient-noise covariance.

    The covariance acts exactly through per-example gradients
    (Sigma v = (1/n) sum_i g_i (g_i . v) - g_bar (g_bar . v)); the Hessian
    acts through finite-difference Hessian-vector products.
    """
    grads = per_example_gradients(model, params, dataset)
    gbar = grads.mean(axis=0)

    def apply_sigma(v):
        return grads.T @ (grads @ v) / grads.shape[0] - gbar * (gbar @ v)

    def apply_h(v):
        return hvp(model, params, dataset, v)

    mean, _ = matrix_cosine_mc(apply_h, apply_sigma, params.total_dim, k, seed)
    return mean


def gauss_newton_vp(model, params: ParamSet, batch, v: np.ndarray) -> np.ndarray:
    """Product of the Gauss-Newton curvature block with v.

    G v = (1/n) sum_i J_i^T H_i (J_i v), with J_i the per-example output
    Jacobian (applied by central differences) and H_i the per-example loss
    Hessian w.r.t. the outputs. The residual block is hvp(v) - G v.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (params.total_dim,):
        raise ValueError(f"probe vector must have dim {params.total_dim}")
    w = params.flatten()
    h = hvp_step_size(float(np.linalg.norm(w)), float(np.linalg.norm(v)))
    out_plus, _ = forward_outputs(model, params.unflatten(w + h * v), batch)
    out_minus, _ = forward_outputs(model, params.unflatten(w - h * v), batch)
    jv = (out_plus - out_minus) / (2.0 * h)  # (n, c)
    jv = jv.reshape(jv.shape[0], -1)

    hess = model.output_loss_hessians(
        forward_outputs(model, params, batch)[0], batch.labels
    )  # (n, c, c)
    q = np.einsum("bij,bj->bi", hess, jv)

    # one VJP from the outputs with seed q/n accumulates (1/n) sum_i J_i^T q_i
    _, tape = forward_outputs(model, params, batch)
    seed = (q / batch.n).reshape(tape.output.value.shape)
    leaf_grads = tape.backward(seed)
    parts = []
    for e in params.entries:
        g = leaf_grads.get(e.name)
        parts.append(np.zeros(e.tensor.size) if g is None else np.asarray(g).ravel())
    return np.concatenate(parts)


def effective_lr(lr: float, lam: float, w_norm: float) -> float:
    """Direction-dynamics step size lr / ((1 - lr*lam) * ||w||)."""
    if lr * lam >= 1.0:
        raise ValueError("requires lr * lambda < 1")
    if w_norm <= 0.0:
        raise ValueError("requires a positive weight norm")
    return lr / ((1.0 - lr * lam) * w_norm)


@dataclass
class AveragerState:
    beta: float = 0.999
    ema: np.ndarray | None = None
    tail_sum: np.ndarray | None = None
    tail_count: int = 0

    def copy(self) -> "AveragerState":
        return AveragerState(
            self.beta,
            None if self.ema is None else self.ema.copy(),
            None if self.tail_sum is None else self.tail_sum.copy(),
            self.tail_count,
        )


def ema_update(state: AveragerState, w: np.ndarray) -> AveragerState:
    """Fold one iterate into the exponential moving average and the tail sum.

    The EMA initializes at the first iterate; beta = 1 therefore freezes it
    there and beta = 0 tracks the current iterate.
    """
    w = np.asarray(w, dtype=np.float64)
    if state.ema is None:
        ema = w.copy()
        tail = w.copy()
    else:
        if state.ema.shape != w.shape:
            raise ValueError("iterate dimension changed under the averager")
        ema = state.beta * state.ema + (1.0 - state.beta) * w
        tail = state.tail_sum + w
    return AveragerState(state.beta, ema, tail, state.tail_count + 1)


def tail_average(state: AveragerState) -> np.ndarray:
    if state.tail_count == 0:
        raise ValueError("tail average requested before any update")
    return state.tail_sum / state.tail_count


def detect_stabilization(loss_series, window: int, band: float) -> bool:
    """True when the last `window` losses span at most band * their median."""
    if window < 2:
        raise ValueError("window must be at least 2")
    series = np.asarray(loss_series, dtype=np.float64)
    if series.size < window:
        return False
    tail = series[-window:]
    return bool(tail.max() - tail.min() <= band * np.median(tail))


def detect_divergence(loss_series, factor: float, persist: int):
    """Find the first persistent loss spike.

    A divergence begins at the first index whose loss reaches factor times
    the running minimum and stays at or above that bar for `persist`
    consecutive evaluations. Transient spikes that recover do not flag.
    Returns (flag, onset_step); onset_step is -1 when nothing flags.
    """
    if factor <= 1.0:
        raise ValueError("factor must exceed 1")
    if persist < 1:
        raise ValueError("persist must be at least 1")
    series = np.asarray(loss_series, dtype=np.float64)
    run_min = np.inf
    i = 0
    n = series.size
    while i < n:
        run_min = min(run_min, series[i])
        bar = factor * run_min
        if series[i] >= bar:
            j = i
            while j < n and series[j] >= bar:
                j += 1
            if j - i >= persist:
                return True, i
            i = j  # spike recovered; resume after it
        else:
            i += 1
    return False, -1


def evaluate_regularized_objective(
    model,
    params: ParamSet,
    dataset,
    lr: float,
    sigma2: float,
    lam: float = 0.0,
    k: int = 8,
    seed: int = 0,
) -> float:
    """Diagnostic objective: L_lam(w) + lr * sigma2 * trace estimate.

    Never used to drive updates; the trace term comes from hutchinson_trace.
    """
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    loss = forward(model, params, dataset).loss
    reg = loss + 0.5 * lam * params.norm() ** 2
    if lr == 0.0 or sigma2 == 0.0:
        return reg
    trace, _ = hutchinson_trace(model, params, dataset, k, seed)
    return reg + lr * sigma2 * trace
