"""Seeded synthetic datasets: Gaussian blobs, spirals, and linear regression.

Every dataset is a pure function of its TaskSpec, so identical specs produce
bit-identical arrays. Classification tasks are class-balanced by
construction; a held-out test split of 25% of the training count (20% of the
total) is generated alongside.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

__all__ = ["DataBatch", "TaskSpec", "generate", "batch_to_csv", "batch_from_csv"]


@dataclass
class DataBatch:
    inputs: np.ndarray  # (n, features)
    labels: np.ndarray  # (n,) int classes or (n, k) float targets

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be rank-2 (batch x features)")
        self.labels = np.asarray(self.labels)
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ValueError("inputs and labels disagree on batch size")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "DataBatch":
        return DataBatch(self.inputs[idx], self.labels[idx])

    def example(self, i: int) -> "DataBatch":
        return DataBatch(self.inputs[i : i + 1], self.labels[i : i + 1])


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # gauss_blobs | spiral | linreg
    n_train: int = 200
    dim: int = 2
    classes: int = 2
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gauss_blobs", "spiral", "linreg"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @staticmethod
    def from_dict(d: dict) -> "TaskSpec":
        allowed = {"kind", "n_train", "dim", "classes", "noise_std", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown task keys: {sorted(unknown)}")
        if "kind" not in d:
            raise ValueError("task config requires kind")
        return TaskSpec(
            kind=d["kind"],
            n_train=int(d.get("n_train", 200)),
            dim=int(d.get("dim", 2)),
            classes=int(d.get("classes", 2)),
            noise_std=float(d.get("noise_std", 0.1)),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_train": self.n_train,
            "dim": self.dim,
            "classes": self.classes,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }


def _balanced_counts(n: int, classes: int) -> list[int]:
    base, extra = divmod(n, classes)
    return [base + (1 if c < extra else 0) for c in range(classes)]


def _blobs(rng, n, dim, classes, noise_std):
    centers = rng.uniform(-3.0, 3.0, size=(classes, dim))
    xs, ys = [], []
    for c, count in enumerate(_balanced_counts(n, classes)):
        xs.append(centers[c] + noise_std * rng.standard_normal((count, dim)))
        ys.append(np.full(count, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def _spiral(rng, n, dim, classes, noise_std):
    if dim < 2:
        raise ValueError("spiral task needs dim >= 2")
    xs, ys = [], []
    for c, count in enumerate(_balanced_counts(n, classes)):
        t = np.linspace(0.25, 1.0, count)
        angle = 2.0 * np.pi * (t * 2.0 + c / classes) + noise_std * rng.standard_normal(count)
        r = t * 2.0
        pts = np.zeros((count, dim))
        pts[:, 0] = r * np.cos(angle)
        pts[:, 1] = r * np.sin(angle)
        if dim > 2:
            pts[:, 2:] = noise_std * rng.standard_normal((count, dim - 2))
        xs.append(pts)
        ys.append(np.full(count, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def _linreg(rng, n, dim, noise_std):
    x = rng.standard_normal((n, dim))
    w_star = rng.standard_normal((dim, 1))
    y = x @ w_star + noise_std * rng.standard_normal((n, 1))
    return x, y


def generate(task: TaskSpec):
    """Build (train, test) batches for the task. Deterministic in the spec."""
    if task.kind != "linreg" and task.n_train < task.classes:
        raise ValueError("n_train must be at least the number of classes")
    n_test = max(task.n_train // 4, 1)
    rng = np.random.default_rng(task.seed)
    if task.kind == "gauss_blobs":
        xtr, ytr = _blobs(rng, task.n_train, task.dim, task.classes, task.noise_std)
        xte, yte = _blobs(rng, n_test, task.dim, task.classes, task.noise_std)
    elif task.kind == "spiral":
        xtr, ytr = _spiral(rng, task.n_train, task.dim, task.classes, task.noise_std)
        xte, yte = _spiral(rng, n_test, task.dim, task.classes, task.noise_std)
    else:
        x, y = _linreg(rng, task.n_train + n_test, task.dim, task.noise_std)
        xtr, ytr = x[: task.n_train], y[: task.n_train]
        xte, yte = x[task.n_train :], y[task.n_train :]
    order = np.random.default_rng(task.seed + 1).permutation(len(xtr))
    return DataBatch(xtr[order], ytr[order]), DataBatch(xte, yte)


def batch_to_csv(batch: DataBatch) -> str:
    """Serialize a batch as CSV with a one-line header (features then label).

    Floats are written with full round-trip precision.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    d = batch.inputs.shape[1]
    labels = batch.labels.reshape(batch.n, -1)
    label_cols = labels.shape[1]
    header = [f"feature_{j}" for j in range(d)]
    header += ["label"] if label_cols == 1 else [f"label_{j}" for j in range(label_cols)]
    writer.writerow(header)
    int_labels = np.issubdtype(batch.labels.dtype, np.integer)
    for i in range(batch.n):
        row = [repr(float(v)) for v in batch.inputs[i]]
        if int_labels:
            row += [str(int(v)) for v in labels[i]]
        else:
            row += [repr(float(v)) for v in labels[i]]
        writer.writerow(row)
    return buf.getvalue()


def batch_from_csv(text: str) -> DataBatch:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    n_features = sum(1 for h in header if h.startswith("feature_"))
    n_labels = len(header) - n_features
    if n_features == 0 or n_labels == 0:
        raise ValueError("CSV header must contain feature_* and label columns")
    rows = [r for r in reader if r]
    inputs = np.array([[float(v) for v in r[:n_features]] for r in rows])
    raw_labels = [r[n_features:] for r in rows]
    int_like = all(all(_is_int(v) for v in r) for r in raw_labels)
    if n_labels == 1 and int_like:
        labels = np.array([int(r[0]) for r in raw_labels], dtype=np.int64)
    else:
        labels = np.array([[float(v) for v in r] for r in raw_labels])
    return DataBatch(inputs, labels)


def _is_int(s: str) -> bool:
    try:
        int(s)
        return True
    except ValueError:
        return False
