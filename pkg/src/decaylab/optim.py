"""Update rules and learning-rate schedules.

All steps are pure functions of (weights, gradient, state). Decay strength
may be a scalar or a per-coordinate array, which is how selective decay
masks (e.g. exempting normalization parameters) are applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Schedule",
    "lr_at",
    "OptimizerConfig",
    "OptState",
    "step_sgd",
    "step_sphere",
    "step_signgd",
    "step_adamw",
    "step_momentum",
    "apply_update",
]

_SCHEDULE_KINDS = ("constant", "step_decay", "cosine_warmup")
_OPT_KINDS = ("sgd", "sgd_l2", "sgd_decoupled_wd", "sgd_momentum", "signgd", "signgd_wd", "adamw", "sphere_sgd")


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"
    base_lr: float = 0.1
    warmup_steps: int = 0
    total_steps: int = 1
    floor_ratio: float = 1.0
    decay_step: int = 0
    post_decay_lr: float = 1e-4

    def __post_init__(self):
        if self.kind not in _SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not (0.0 < self.floor_ratio <= 1.0):
            raise ValueError("floor_ratio must be in (0, 1]")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")

    @staticmethod
    def from_dict(d: dict) -> "Schedule":
        allowed = {
            "kind",
            "base_lr",
            "warmup_steps",
            "total_steps",
            "floor_ratio",
            "decay_step",
            "post_decay_lr",
        }
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        return Schedule(
            kind=d.get("kind", "constant"),
            base_lr=float(d.get("base_lr", 0.1)),
            warmup_steps=int(d.get("warmup_steps", 0)),
            total_steps=int(d.get("total_steps", 1)),
            floor_ratio=float(d.get("floor_ratio", 1.0)),
            decay_step=int(d.get("decay_step", 0)),
            post_decay_lr=float(d.get("post_decay_lr", 1e-4)),
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "base_lr": self.base_lr,
            "warmup_steps": self.warmup_steps,
            "total_steps": self.total_steps,
            "floor_ratio": self.floor_ratio,
            "decay_step": self.decay_step,
            "post_decay_lr": self.post_decay_lr,
        }


def lr_at(schedule: Schedule, t: int) -> float:
    """Learning rate at step t.

    Warmup climbs linearly from base_lr/warmup_steps, reaching base_lr at
    t = warmup_steps; the cosine branch then decays to floor_ratio * base_lr
    at the final step. step_decay switches to post_decay_lr at decay_step.
    """
    if not (0 <= t < schedule.total_steps):
        raise ValueError(f"step {t} outside schedule horizon [0, {schedule.total_steps})")
    if schedule.kind == "constant":
        return schedule.base_lr
    if schedule.kind == "step_decay":
        return schedule.base_lr if t < schedule.decay_step else schedule.post_decay_lr
    w = schedule.warmup_steps
    if t < w:
        return schedule.base_lr * (t + 1) / w
    floor = schedule.floor_ratio * schedule.base_lr
    span = schedule.total_steps - 1 - w
    if span <= 0:
        return schedule.base_lr
    frac = (t - w) / span
    return floor + (schedule.base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr_schedule: Schedule | None = None
    lambda_wd: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    decay_layernorm_params: bool = True

    def __post_init__(self):
        if self.kind not in _OPT_KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lambda_wd < 0:
            raise ValueError("lambda_wd must be non-negative")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not (0.0 <= b < 1.0):
                raise ValueError(f"{name} must lie in [0, 1)")

    @staticmethod
    def from_dict(d: dict) -> "OptimizerConfig":
        allowed = {
            "kind",
            "lr_schedule",
            "lambda_wd",
            "momentum",
            "beta1",
            "beta2",
            "eps",
            "decay_layernorm_params",
        }
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown optimizer keys: {sorted(unknown)}")
        sched = d.get("lr_schedule")
        return OptimizerConfig(
            kind=d.get("kind", "sgd"),
            lr_schedule=Schedule.from_dict(sched) if sched is not None else None,
            lambda_wd=float(d.get("lambda_wd", 0.0)),
            momentum=float(d.get("momentum", 0.9)),
            beta1=float(d.get("beta1", 0.9)),
            beta2=float(d.get("beta2", 0.95)),
            eps=float(d.get("eps", 1e-8)),
            decay_layernorm_params=bool(d.get("decay_layernorm_params", True)),
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lr_schedule": self.lr_schedule.to_dict() if self.lr_schedule else None,
            "lambda_wd": self.lambda_wd,
            "momentum": self.momentum,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "decay_layernorm_params": self.decay_layernorm_params,
        }


@dataclass
class OptState:
    momentum_buf: np.ndarray | None = None
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    step_count: int = 0

    @staticmethod
    def init(kind: str, dim: int) -> "OptState":
        zeros = lambda: np.zeros(dim)
        if kind == "sgd_momentum":
            return OptState(momentum_buf=zeros())
        if kind == "adamw":
            return OptState(first_moment=zeros(), second_moment=zeros())
        return OptState()

    def copy(self) -> "OptState":
        cp = lambda a: None if a is None else a.copy()
        return OptState(cp(self.momentum_buf), cp(self.first_moment), cp(self.second_moment), self.step_count)


def _check_dims(w, g):
    if w.shape != g.shape:
        raise ValueError(f"weight/gradient dims disagree: {w.shape} vs {g.shape}")


def step_sgd(w: np.ndarray, g: np.ndarray, lr: float, lam=0.0, variant: str = "decoupled") -> np.ndarray:
    """Plain SGD with weight decay: w * (1 - lr*lam) - lr * g.

    The coupled-l2 and decoupled variants evaluate the identical expression,
    which is what makes their trajectories bit-identical for plain SGD.
    """
    _check_dims(w, g)
    if lr <= 0:
        raise ValueError("lr must be positive")
    if variant not in ("plain", "l2", "decoupled"):
        raise ValueError(f"unknown sgd variant {variant!r}")
    return w * (1.0 - lr * lam) - lr * g


def step_sphere(w: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
    """Gradient step followed by projection back onto the unit sphere."""
    _check_dims(w, g)
    nw = math.sqrt(float(w @ w))
    if abs(nw - 1.0) > 1e-12:
        raise ValueError(f"sphere step requires a unit-norm input, got {nw}")
    v = w - lr * g
    nv = math.sqrt(float(v @ v))
    if nv == 0.0:
        raise ValueError("pre-projection vector is zero")
    return v / nv


def step_signgd(w: np.ndarray, g: np.ndarray, lr: float, lam=0.0) -> np.ndarray:
    """Sign-gradient step with multiplicative decay: (1 - lr*lam) w - lr sign(g)."""
    _check_dims(w, g)
    if lr * float(np.max(np.atleast_1d(lam))) >= 1.0:
        raise ValueError("lr * lambda must be < 1 (norm collapse)")
    return (1.0 - lr * lam) * w - lr * np.sign(g)


def step_adamw(w, g, state: OptState, lr: float, lam=0.0, beta1=0.9, beta2=0.95, eps=1e-8):
    """AdamW step: decoupled decay applied before the bias-corrected adaptive move."""
    _check_dims(w, g)
    if state.first_moment is None or state.second_moment is None:
        raise ValueError("adamw requires an OptState with both moments")
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * g
    v = beta2 * state.second_moment + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    w_new = w * (1.0 - lr * lam) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return w_new, OptState(first_moment=m, second_moment=v, step_count=t)


def step_momentum(w, g, state: OptState, lr: float, lam=0.0, mu: float = 0.9):
    """Heavy-ball momentum with coupled l2: buf <- mu*buf + g + lam*w."""
    _check_dims(w, g)
    if state.momentum_buf is None:
        raise ValueError("momentum requires an OptState with a buffer")
    buf = mu * state.momentum_buf + g + lam * w
    w_new = w - lr * buf
    return w_new, OptState(momentum_buf=buf, step_count=state.step_count + 1)


def apply_update(config: OptimizerConfig, w, g, state: OptState, lr: float, lam):
    """Dispatch one optimizer step for the configured kind.

    `lam` is the (possibly per-coordinate masked) decay strength. Returns
    (new_weights, new_state).
    """
    kind = config.kind
    if kind in ("sgd", "sgd_l2", "sgd_decoupled_wd"):
        variant = {"sgd": "plain", "sgd_l2": "l2", "sgd_decoupled_wd": "decoupled"}[kind]
        w_new = step_sgd(w, g, lr, lam, variant)
        return w_new, OptState(step_count=state.step_count + 1)
    if kind == "sgd_momentum":
        return step_momentum(w, g, state, lr, lam, config.momentum)
    if kind in ("signgd", "signgd_wd"):
        eff_lam = lam if kind == "signgd_wd" else 0.0
        w_new = step_signgd(w, g, lr, eff_lam)
        return w_new, OptState(step_count=state.step_count + 1)
    if kind == "adamw":
        return step_adamw(w, g, state, lr, lam, config.beta1, config.beta2, config.eps)
    if kind == "sphere_sgd":
        w_new = step_sphere(w, g, lr)
        return w_new, OptState(step_count=state.step_count + 1)
    raise ValueError(f"unknown optimizer kind {kind!r}")
