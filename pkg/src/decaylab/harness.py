"""Config-driven experiment runner: two-phase training, snapshotting,
fine-tuning along a trajectory, and grid sweeps.

A run is fully determined by its config document; in full precision repeated
runs are byte-identical, including resume-from-snapshot. Batch sampling is
uniform with replacement, derived statelessly from (seed, step) so a resumed
trajectory draws exactly the original indices.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from . import probes as pb
from .datasets import TaskSpec, generate
from .engine import ParamSet, forward, gradient
from .models import MLPSpec, build_mlp
from .optim import OptimizerConfig, OptState, Schedule, apply_update, lr_at
from .precision import MixedPrecisionPolicy, quantize

__all__ = [
    "Phase",
    "RunConfig",
    "Snapshot",
    "RunRecord",
    "run",
    "finetune_along_trajectory",
    "sweep",
    "sweep_table_to_csv",
    "estimate_sigma2",
    "load_config",
    "save_run",
    "load_snapshot",
]

STABILIZATION_WINDOW = 10
STABILIZATION_BAND = 0.2
DIVERGENCE_FACTOR = 3.0
DIVERGENCE_PERSIST = 3
NOISE_SUBSET_CAP = 128


@dataclass(frozen=True)
class Phase:
    steps: int
    schedule: Schedule

    @staticmethod
    def from_dict(d: dict) -> "Phase":
        unknown = set(d) - {"steps", "schedule"}
        if unknown:
            raise ValueError(f"unknown phase keys: {sorted(unknown)}")
        if "steps" not in d or "schedule" not in d:
            raise ValueError("each phase requires steps and schedule")
        return Phase(int(d["steps"]), Schedule.from_dict(d["schedule"]))

    def to_dict(self) -> dict:
        return {"steps": self.steps, "schedule": self.schedule.to_dict()}


@dataclass(frozen=True)
class FinetuneSpec:
    steps: int
    lr: float

    @staticmethod
    def from_dict(d: dict) -> "FinetuneSpec":
        unknown = set(d) - {"steps", "lr"}
        if unknown:
            raise ValueError(f"unknown finetune keys: {sorted(unknown)}")
        if float(d.get("lr", 0.0)) <= 0:
            raise ValueError("finetune lr must be positive")
        return FinetuneSpec(int(d.get("steps", 0)), float(d["lr"]))

    def to_dict(self) -> dict:
        return {"steps": self.steps, "lr": self.lr}


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec
    model: MLPSpec
    optimizer: OptimizerConfig
    precision: MixedPrecisionPolicy
    phases: tuple
    probes_every: int = 10
    snapshot_every: int = 0
    finetune: FinetuneSpec | None = None
    seed: int = 0
    batch_size: int = 1
    probe_subset: int = 512
    trace_probes: int = 8

    def __post_init__(self):
        if not self.phases:
            raise ValueError("at least one phase is required")
        if self.probes_every < 1:
            raise ValueError("probes_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def total_steps(self) -> int:
        return sum(p.steps for p in self.phases)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        allowed = {
            "task",
            "model",
            "optimizer",
            "precision",
            "phases",
            "probes_every",
            "snapshot_every",
            "finetune",
            "seed",
            "batch_size",
            "probe_subset",
            "trace_probes",
        }
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for req in ("task", "model", "optimizer", "phases"):
            if req not in d:
                raise ValueError(f"config requires {req!r}")
        opt_dict = dict(d["optimizer"])
        if opt_dict.get("lr_schedule") is not None:
            raise ValueError("optimizer.lr_schedule is not used by runs; schedules live in phases")
        opt_dict.pop("lr_schedule", None)
        return RunConfig(
            task=TaskSpec.from_dict(d["task"]),
            model=MLPSpec.from_dict(d["model"]),
            optimizer=OptimizerConfig.from_dict(opt_dict),
            precision=MixedPrecisionPolicy.from_dict(d.get("precision", {})),
            phases=tuple(Phase.from_dict(p) for p in d["phases"]),
            probes_every=int(d.get("probes_every", 10)),
            snapshot_every=int(d.get("snapshot_every", 0)),
            finetune=FinetuneSpec.from_dict(d["finetune"]) if d.get("finetune") else None,
            seed=int(d.get("seed", 0)),
            batch_size=int(d.get("batch_size", 1)),
            probe_subset=int(d.get("probe_subset", 512)),
            trace_probes=int(d.get("trace_probes", 8)),
        )

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "model": self.model.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "precision": self.precision.to_dict(),
            "phases": [p.to_dict() for p in self.phases],
            "probes_every": self.probes_every,
            "snapshot_every": self.snapshot_every,
            "finetune": self.finetune.to_dict() if self.finetune else None,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "probe_subset": self.probe_subset,
            "trace_probes": self.trace_probes,
        }


def load_config(text_or_path) -> RunConfig:
    """Parse a config JSON document (path or raw text). Unknown keys error."""
    p = Path(text_or_path)
    try:
        is_file = p.is_file()
    except OSError:
        is_file = False
    text = p.read_text() if is_file else str(text_or_path)
    return RunConfig.from_dict(json.loads(text))


@dataclass
class Snapshot:
    step: int
    params: ParamSet
    opt_state: OptState
    averager: pb.AveragerState
    probe_losses: list = field(default_factory=list)

    def copy(self) -> "Snapshot":
        return Snapshot(
            self.step,
            self.params.copy(),
            self.opt_state.copy(),
            self.averager.copy(),
            list(self.probe_losses),
        )


@dataclass
class RunRecord:
    config: dict
    records: list
    snapshots: list
    flags: list
    divergence_onset: int
    final_step: int
    terminal: dict
    sigma2_estimate: float | None = None

    def records_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)

    def summary_dict(self) -> dict:
        return {
            "flags": sorted(self.flags),
            "divergence_onset": self.divergence_onset,
            "final_step": self.final_step,
            "terminal": self.terminal,
            "sigma2_estimate": self.sigma2_estimate,
        }


class _RunContext:
    """Everything rebuildable from the config: data, model, probe subsets."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.train, self.test = generate(config.task)
        self.model, init_params = build_mlp(config.model, config.seed)
        self.init_params = init_params
        self._validate_shapes()
        sub_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 815915283)))
        n = self.train.n
        take = min(config.probe_subset, n)
        idx = np.sort(sub_rng.choice(n, size=take, replace=False))
        self.probe_batch = self.train.subset(idx)
        self.noise_batch = self.probe_batch.subset(np.arange(min(NOISE_SUBSET_CAP, take)))

    def _validate_shapes(self):
        task, model = self.config.task, self.config.model
        out = model.layer_widths[-1]
        if model.layer_widths[0] != task.dim:
            raise ValueError(f"model input width {model.layer_widths[0]} != task dim {task.dim}")
        if task.kind == "linreg":
            if out != 1:
                raise ValueError("linreg task requires output width 1")
        elif out != task.classes and not (out == 1 and task.classes == 2):
            raise ValueError(
                f"output width {out} incompatible with {task.classes}-class task"
            )

    def batch_at(self, step: int) -> DataBatch:
        rng = np.random.default_rng(np.random.SeedSequence((self.config.seed, 104729, step)))
        idx = rng.integers(0, self.train.n, size=self.config.batch_size)
        return self.train.subset(idx)

    def test_metric(self, params: ParamSet) -> float:
        from .engine import forward_outputs

        out, _ = forward_outputs(self.model, params, self.test)
        labels = np.asarray(self.test.labels)
        if np.issubdtype(labels.dtype, np.integer):
            if out.shape[1] == 1:
                pred = (out[:, 0] > 0).astype(np.int64)
            else:
                pred = out.argmax(axis=1)
            return float(np.mean(pred != labels))
        return float(0.5 * ((out - labels.reshape(out.shape)) ** 2).sum(axis=1).mean())


def _probe(ctx: _RunContext, params, step, lr) -> pb.ProbeRecord:
    cfg = ctx.config
    res = forward(ctx.model, params, ctx.train)
    train_loss = res.loss
    lam = cfg.optimizer.lambda_wd
    w_norm = params.norm()
    g = gradient(res.tape, params)
    trace, trace_se = pb.hutchinson_trace(
        ctx.model, params, ctx.probe_batch, cfg.trace_probes,
        seed=int(np.random.SeedSequence((cfg.seed, 15485863, step)).generate_state(1)[0]),
    )
    noise = pb.noise_scale(ctx.model, params, ctx.noise_batch) if ctx.noise_batch.n >= 2 else 0.0
    eff = pb.effective_lr(lr, lam, w_norm) if (lr * lam < 1.0 and w_norm > 0) else float("nan")
    return pb.ProbeRecord(
        step=step,
        train_loss=train_loss,
        reg_loss=train_loss + 0.5 * lam * w_norm**2,
        test_metric=ctx.test_metric(params),
        param_norm=w_norm,
        grad_norm=float(np.linalg.norm(g)),
        noise_scale=noise,
        eff_lr=eff,
        trace_estimate=trace,
        trace_stderr=trace_se,
        flags=[],
    )


def _phase_at(config: RunConfig, step: int):
    """Map a global step to (phase, local_step)."""
    off = 0
    for phase in config.phases:
        if step < off + phase.steps:
            return phase, step - off
        off += phase.steps
    raise ValueError(f"step {step} beyond configured horizon {config.total_steps}")


def run(config: RunConfig, start: Snapshot | None = None) -> RunRecord:
    """Execute all phases, probing and snapshotting on the configured grid.

    A divergence (persistent loss spike, or any non-finite loss under an
    emulated-precision policy) ends the run gracefully with the record
    intact and the `diverged` flag set.
    """
    ctx = _RunContext(config)
    policy = config.precision
    if start is None:
        params = ctx.init_params.copy()
        if config.optimizer.kind == "sphere_sgd":
            params.set_flat(params.flatten() / params.norm())
        opt_state = OptState.init(config.optimizer.kind, params.total_dim)
        averager = pb.AveragerState(beta=0.999)
        step = 0
        probe_losses: list = []
    else:
        params = start.params.copy()
        opt_state = start.opt_state.copy()
        averager = start.averager.copy()
        step = start.step
        probe_losses = list(start.probe_losses)

    mask = params.decay_mask(config.optimizer.decay_layernorm_params)
    lam = config.optimizer.lambda_wd
    lam_arg = lam if mask.all() else lam * mask

    records: list = []
    snapshots: list = []
    flags: set = set()
    divergence_onset = -1
    total = config.total_steps

    def lr_of(global_step: int) -> float:
        phase, local = _phase_at(config, global_step)
        return lr_at(phase.schedule, local)

    def maybe_probe_and_snapshot(completed: int):
        nonlocal divergence_onset
        if completed % config.probes_every == 0:
            lr_now = lr_of(completed) if completed < total else lr_of(total - 1)
            rec = _probe(ctx, params, completed, lr_now)
            probe_losses.append(rec.train_loss)
            rec_flags = set()
            if pb.detect_stabilization(probe_losses, STABILIZATION_WINDOW, STABILIZATION_BAND):
                rec_flags.add("stabilized")
                flags.add("stabilized")
            div, onset = pb.detect_divergence(probe_losses, DIVERGENCE_FACTOR, DIVERGENCE_PERSIST)
            if div:
                rec_flags.add("diverged")
                flags.add("diverged")
                # probe i sits at step i * probes_every, also across resumes
                divergence_onset = onset * config.probes_every
            rec.flags = sorted(rec_flags)
            records.append(rec)
        if config.snapshot_every > 0 and completed % config.snapshot_every == 0:
            snapshots.append(
                Snapshot(completed, params.copy(), opt_state.copy(), averager.copy(), list(probe_losses))
            )

    if start is None:
        maybe_probe_and_snapshot(0)

    while step < total and "diverged" not in flags:
        phase, local = _phase_at(config, step)
        lr = lr_at(phase.schedule, local)
        batch = ctx.batch_at(step)
        res = forward(ctx.model, params, batch, policy if not policy.is_identity else None)
        if not res.finite:
            flags.add("diverged")
            divergence_onset = step
            break
        g = gradient(res.tape, params)
        if not np.all(np.isfinite(g)):
            flags.add("diverged")
            divergence_onset = step
            break
        w = params.flatten()
        w_new, opt_state = apply_update(config.optimizer, w, g, opt_state, lr, lam_arg)
        if not policy.is_identity and not policy.master_weights_full:
            w_new = quantize(w_new, policy.compute_mode)
        params.set_flat(w_new)
        averager = pb.ema_update(averager, w_new)
        step += 1
        maybe_probe_and_snapshot(step)

    terminal_params = params
    terminal = {
        "train_loss": records[-1].train_loss if records else float("nan"),
        "test_metric": records[-1].test_metric if records else float("nan"),
        "param_norm": terminal_params.norm(),
        "step": step,
    }
    record = RunRecord(
        config=config.to_dict(),
        records=records,
        snapshots=snapshots,
        flags=sorted(flags),
        divergence_onset=divergence_onset,
        final_step=step,
        terminal=terminal,
    )
    record.sigma2_estimate = estimate_sigma2(record)
    return record


def estimate_sigma2(record: RunRecord, window: int = 20) -> float | None:
    """Gradient-noise strength: mean noise_scale over the last `window`
    probes of the first phase (the large-LR phase in two-phase recipes)."""
    phases = record.config["phases"]
    phase1_end = phases[0]["steps"] if phases else None
    if phase1_end is None:
        return None
    eligible = [r.noise_scale for r in record.records if r.step <= phase1_end]
    if not eligible:
        return None
    return float(np.mean(eligible[-window:]))


def save_run(record: RunRecord, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(record.config, indent=2, sort_keys=True) + "\n")
    (out / "record.jsonl").write_text(record.records_jsonl())
    (out / "summary.json").write_text(json.dumps(record.summary_dict(), indent=2, sort_keys=True) + "\n")
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    for snap in record.snapshots:
        _save_snapshot(snap, snap_dir / f"step_{snap.step:08d}.npz")


def _save_snapshot(snap: Snapshot, path: Path) -> None:
    st = snap.opt_state
    av = snap.averager
    arrays = {
        "flat": snap.params.flatten(),
        "step": np.array(snap.step),
        "step_count": np.array(st.step_count),
        "probe_losses": np.asarray(snap.probe_losses, dtype=np.float64),
        "avg_beta": np.array(av.beta),
        "avg_count": np.array(av.tail_count),
    }
    for name, arr in (
        ("momentum_buf", st.momentum_buf),
        ("first_moment", st.first_moment),
        ("second_moment", st.second_moment),
        ("avg_ema", av.ema),
        ("avg_tail", av.tail_sum),
    ):
        if arr is not None:
            arrays[name] = arr
    np.savez(path, **arrays)


def load_snapshot(path, config: RunConfig) -> Snapshot:
    """Rebuild a Snapshot saved by save_run, using the config for structure."""
    data = np.load(Path(path))
    _, params = build_mlp(config.model, config.seed)
    params.set_flat(data["flat"])
    st = OptState(
        momentum_buf=data["momentum_buf"] if "momentum_buf" in data else None,
        first_moment=data["first_moment"] if "first_moment" in data else None,
        second_moment=data["second_moment"] if "second_moment" in data else None,
        step_count=int(data["step_count"]),
    )
    av = pb.AveragerState(
        beta=float(data["avg_beta"]),
        ema=data["avg_ema"] if "avg_ema" in data else None,
        tail_sum=data["avg_tail"] if "avg_tail" in data else None,
        tail_count=int(data["avg_count"]),
    )
    return Snapshot(int(data["step"]), params, st, av, [float(x) for x in data["probe_losses"]])


def finetune_along_trajectory(config: RunConfig, snapshots, ft_steps: int, ft_lr: float) -> list[dict]:
    """Project each snapshot to a nearby low-loss point and measure it there.

    Each snapshot's parameters are cloned and advanced by ft_steps of plain
    full-batch gradient descent (no decay) at ft_lr; the report rows carry
    the step of origin plus loss, test metric, and Hessian trace at the
    fine-tuned point.
    """
    if len(snapshots) < 2:
        raise ValueError("need at least two snapshots to report a trend")
    ctx = _RunContext(config)
    rows = []
    for snap in snapshots:
        params = snap.params.copy()
        for _ in range(ft_steps):
            res = forward(ctx.model, params, ctx.train)
            g = gradient(res.tape, params)
            params.set_flat(params.flatten() - ft_lr * g)
        loss = forward(ctx.model, params, ctx.train).loss
        trace, trace_se = pb.hutchinson_trace(
            ctx.model,
            params,
            ctx.probe_batch,
            ctx.config.trace_probes,
            seed=int(np.random.SeedSequence((config.seed, 32452843, snap.step)).generate_state(1)[0]),
        )
        rows.append(
            {
                "step": snap.step,
                "train_loss": loss,
                "test_metric": ctx.test_metric(params),
                "trace_estimate": trace,
                "trace_stderr": trace_se,
            }
        )
    return rows


_GRID_KEYS = ("lr", "lambda_wd", "precision", "seed")


def _apply_cell(base: dict, cell: dict) -> RunConfig:
    doc = json.loads(json.dumps(base))  # deep copy
    if "lr" in cell:
        for phase in doc["phases"]:
            phase["schedule"]["base_lr"] = cell["lr"]
    if "lambda_wd" in cell:
        doc["optimizer"]["lambda_wd"] = cell["lambda_wd"]
    if "precision" in cell:
        doc.setdefault("precision", {})
        doc["precision"]["compute_mode"] = cell["precision"]
    if "seed" in cell:
        doc["seed"] = cell["seed"]
        doc["task"] = dict(doc["task"])
        doc["task"]["seed"] = cell["seed"]
    return RunConfig.from_dict(doc)


def sweep(base_config: RunConfig, grid: dict, workers: int = 1) -> list[dict]:
    """Run every grid cell and aggregate terminal metrics into one table.

    Grid keys: lr (sets every phase's base_lr), lambda_wd, precision
    (compute mode name), seed (also reseeds the task). Cell failures are
    recorded in the row and the sweep continues.
    """
    unknown = set(grid) - set(_GRID_KEYS)
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}; allowed {_GRID_KEYS}")
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must be non-empty")
    keys = [k for k in _GRID_KEYS if k in grid]
    cells = [dict(zip(keys, combo)) for combo in product(*(list(grid[k]) for k in keys))]
    base_doc = base_config.to_dict()

    def run_cell(cell):
        row = dict(cell)
        try:
            rec = run(_apply_cell(base_doc, cell))
            row.update(
                {
                    "final_step": rec.final_step,
                    "train_loss": rec.terminal["train_loss"],
                    "test_metric": rec.terminal["test_metric"],
                    "param_norm": rec.terminal["param_norm"],
                    "diverged": "diverged" in rec.flags,
                    "stabilized": "stabilized" in rec.flags,
                    "divergence_onset": rec.divergence_onset,
                    "error": "",
                }
            )
        except Exception as exc:  # cell failures recorded, sweep continues
            row.update(
                {
                    "final_step": -1,
                    "train_loss": float("nan"),
                    "test_metric": float("nan"),
                    "param_norm": float("nan"),
                    "diverged": False,
                    "stabilized": False,
                    "divergence_onset": -1,
                    "error": f"{type(exc).__name__}: {exc}",
                }
            )
        return row

    if workers <= 1:
        return [run_cell(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, cells))


def sweep_table_to_csv(rows: list[dict]) -> str:
    import csv as _csv
    import io as _io

    if not rows:
        return ""
    buf = _io.StringIO()
    writer = _csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()
