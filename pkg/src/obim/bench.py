"""Synthetic multi-task zoo, fine-tuning oracles, and interference analysis.

Each task perturbs the base model on a controlled subset of input features,
so "correct" merging has a measurable optimum: with disjoint supports the
planted deltas combine losslessly, with overlapping supports the contested
coordinates force a choice. Target noise turns the fine-tuned deltas dense,
which is what gives the trimming methods something to remove.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .calib import ActivationStats, LayerSpec, ModelSpec, forward_collect
from .errors import ConfigError, DivergenceError, RankDeficientError
from .merge import MergeOrder, MergePlan, run_merge
from .taskvec import TaskVector, compute_task_vector
from .tensorstore import TensorMap, read_checkpoint, write_checkpoint
from .util import stream_key

TASK_ID_KEY = "task_id"

REPORT_COLUMNS = (
    "method", "task_id", "loss_base", "loss_finetuned", "loss_merged",
    "sign_conflict_fraction", "deviation_fraction",
)


@dataclass(frozen=True)
class TaskDataset:
    inputs: np.ndarray
    targets: np.ndarray
    task_id: str

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.targets, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ConfigError(f"dataset shapes {x.shape} / {y.shape} are inconsistent")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise ConfigError("dataset contains non-finite entries")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)


@dataclass(frozen=True)
class TaskSuite:
    """A base model, per-task datasets, and the planted per-task optima."""

    spec: ModelSpec
    base: TensorMap
    tasks: tuple[TaskDataset, ...]
    truth: tuple[TensorMap, ...]
    supports: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class InterferenceStats:
    sign_conflict_fraction: float
    deviation_fraction: float
    coordinates: int


def _as_per_task(value, k: int, name: str) -> list[float]:
    if np.isscalar(value):
        return [float(value)] * k
    vals = [float(v) for v in value]
    if len(vals) != k:
        raise ConfigError(f"{name} must be a scalar or length-{k} sequence")
    return vals


def make_task_suite(seed: int, k_tasks: int, d_in: int, d_out: int,
                    n_samples: int, overlap: float = 0.0, noise: float = 0.0,
                    depth: int = 1, delta_scale=0.5,
                    input_gain=1.0) -> TaskSuite:
    """Build a base model and K planted tasks.

    Each task's ground truth is the base plus a delta supported on a subset
    of input features; ``overlap`` in [0, 1] moves the supports from fully
    disjoint to fully shared. ``input_gain`` scales each task's inputs on
    its own support, and targets get i.i.d. Gaussian noise of scale
    ``noise``. depth=2 builds two stacked identity layers (requires
    d_out == d_in) and also plants deltas in the second layer.
    """
    if k_tasks < 1:
        raise ConfigError(f"need at least one task, got {k_tasks}", path="tasks")
    if d_in < 1 or d_out < 1:
        raise ConfigError(f"dims must be positive, got d_in={d_in} d_out={d_out}")
    if n_samples < d_in:
        raise ConfigError(f"need n_samples >= d_in for closed-form fits "
                          f"({n_samples} < {d_in})", path="samples")
    if not 0.0 <= overlap <= 1.0:
        raise ConfigError(f"overlap must lie in [0, 1], got {overlap}", path="overlap")
    if depth not in (1, 2):
        raise ConfigError(f"depth must be 1 or 2, got {depth}", path="depth")
    if depth == 2 and d_out != d_in:
        raise ConfigError("depth=2 uses square layers; set d_out == d_in", path="d_out")
    support_size = d_in // k_tasks
    if support_size < 1:
        raise ConfigError(f"d_in={d_in} too small for {k_tasks} disjoint supports")
    scales = _as_per_task(delta_scale, k_tasks, "delta_scale")
    gains = _as_per_task(input_gain, k_tasks, "input_gain")

    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    if depth == 1:
        spec = ModelSpec(input_dim=d_in, layers=(LayerSpec("layer0.weight"),))
        base_arrays = {"layer0.weight": rng.normal(size=(d_out, d_in))}
    else:
        spec = ModelSpec(input_dim=d_in, layers=(
            LayerSpec("layer0.weight"), LayerSpec("layer1.weight")))
        eye = np.eye(d_in)
        base_arrays = {
            "layer0.weight": eye + 0.05 * rng.normal(size=(d_in, d_in)),
            "layer1.weight": eye + 0.05 * rng.normal(size=(d_in, d_in)),
        }
    base = TensorMap(base_arrays)

    supports = _plant_supports(rng, d_in, k_tasks, support_size, overlap)
    hidden_supports = None
    if depth == 2:
        hidden_supports = _plant_supports(rng, d_in, k_tasks, support_size, overlap)

    tasks: list[TaskDataset] = []
    truths: list[TensorMap] = []
    for k in range(k_tasks):
        arrays = {name: base[name].astype(np.float64).copy() for name in base.names()}
        delta0 = np.zeros((arrays["layer0.weight"].shape[0], d_in))
        delta0[:, supports[k]] = scales[k] * rng.normal(
            size=(delta0.shape[0], supports[k].size))
        arrays["layer0.weight"] = arrays["layer0.weight"] + delta0
        if depth == 2:
            delta1 = np.zeros((d_in, d_in))
            delta1[:, hidden_supports[k]] = scales[k] * rng.normal(
                size=(d_in, hidden_supports[k].size))
            arrays["layer1.weight"] = arrays["layer1.weight"] + delta1
        truth = TensorMap(arrays)

        x = rng.normal(size=(n_samples, d_in))
        x[:, supports[k]] *= gains[k]
        y, _ = forward_collect(spec, truth, x)
        if noise > 0:
            y = y + noise * rng.normal(size=y.shape)
        tasks.append(TaskDataset(inputs=x, targets=y, task_id=f"task{k}"))
        truths.append(truth)
    return TaskSuite(spec=spec, base=base, tasks=tuple(tasks),
                     truth=tuple(truths), supports=tuple(supports))


def _plant_supports(rng, d_in, k_tasks, support_size, overlap):
    """Per-task feature index sets with a controlled shared fraction."""
    n_shared = int(round(overlap * support_size))
    n_private = support_size - n_shared
    features = rng.permutation(d_in)
    shared = features[:n_shared]
    supports = []
    cursor = n_shared
    for _ in range(k_tasks):
        private = features[cursor:cursor + n_private]
        cursor += n_private
        supports.append(np.sort(np.concatenate([shared, private])).astype(np.intp))
    return supports


def closed_form_finetune(spec: ModelSpec, base: TensorMap, data: TaskDataset,
                         ridge: float = 0.0) -> TensorMap:
    """Ridge least squares on a single identity layer via normal equations.

    Minimizes ||X W^T - Y||^2 + ridge * ||W - W_base||^2; at ridge=0 with
    full-rank data this is the exact task optimum. A bias, when present, is
    fitted jointly through an appended constant feature.
    """
    if len(spec.layers) != 1 or spec.layers[0].activation != "identity":
        raise ConfigError("closed-form fitting needs a single identity layer")
    if ridge < 0:
        raise ConfigError(f"ridge must be non-negative, got {ridge}", path="ridge")
    spec.validate_weights(base)
    ls = spec.layers[0]
    x = data.inputs
    y = data.targets
    w_base = base[ls.weight].astype(np.float64)
    if y.shape[1] != w_base.shape[0]:
        raise ConfigError(f"targets have {y.shape[1]} outputs, model has "
                          f"{w_base.shape[0]}")
    if ls.bias is not None:
        x = np.hstack([x, np.ones((x.shape[0], 1))])
        w_base = np.hstack([w_base, base[ls.bias].astype(np.float64)[:, None]])
    gram = x.T @ x
    if ridge == 0.0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise RankDeficientError(
            "normal matrix is rank-deficient; add samples or a positive ridge")
    lhs = gram + ridge * np.eye(gram.shape[0])
    rhs = x.T @ y + ridge * w_base.T
    solution = np.linalg.solve(lhs, rhs).T
    out = {name: arr for name, arr in base.items()}
    if ls.bias is not None:
        out[ls.weight] = solution[:, :-1]
        out[ls.bias] = solution[:, -1]
    else:
        out[ls.weight] = solution
    return TensorMap(out)


def _forward_trace(spec: ModelSpec, weights: dict[str, np.ndarray], x: np.ndarray):
    """Forward pass keeping per-layer inputs and pre-activations for backprop."""
    acts = [x]
    pre = []
    for ls in spec.layers:
        z = acts[-1] @ weights[ls.weight].T
        if ls.bias is not None:
            z = z + weights[ls.bias]
        pre.append(z)
        if ls.activation == "identity":
            a = z
        elif ls.activation == "relu":
            a = np.maximum(z, 0.0)
        else:
            a = np.tanh(z)
        acts.append(a)
    return acts, pre


def loss_and_grad(spec: ModelSpec, weights: dict[str, np.ndarray],
                  data: TaskDataset) -> tuple[float, dict[str, np.ndarray]]:
    """Mean-squared-error loss and its gradients via a reverse pass."""
    acts, pre = _forward_trace(spec, weights, data.inputs)
    pred = acts[-1]
    resid = pred - data.targets
    loss = float(np.mean(resid * resid))
    grads: dict[str, np.ndarray] = {}
    d_act = 2.0 * resid / resid.size
    for idx in range(len(spec.layers) - 1, -1, -1):
        ls = spec.layers[idx]
        z = pre[idx]
        if ls.activation == "identity":
            dz = d_act
        elif ls.activation == "relu":
            dz = d_act * (z > 0)
        else:
            t = np.tanh(z)
            dz = d_act * (1.0 - t * t)
        grads[ls.weight] = dz.T @ acts[idx]
        if ls.bias is not None:
            grads[ls.bias] = dz.sum(axis=0)
        d_act = dz @ weights[ls.weight]
    return loss, grads


def sgd_finetune(spec: ModelSpec, base: TensorMap, data: TaskDataset,
                 epochs: int, lr: float, seed: int = 0) -> TensorMap:
    """Full-batch gradient descent on the layerwise MSE objective.

    Deterministic: updates start from the base weights and use the whole
    batch, so the seed does not enter (it is accepted for interface
    stability). Five consecutive loss increases abort with DivergenceError.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}", path="lr")
    if data.inputs.shape[1] != spec.input_dim:
        raise ConfigError(f"dataset has {data.inputs.shape[1]} features, spec "
                          f"expects {spec.input_dim}")
    spec.validate_weights(base)
    weights = {name: arr.astype(np.float64) for name, arr in base.items()}
    prev = None
    rising = 0
    for epoch in range(epochs):
        loss, grads = loss_and_grad(spec, weights, data)
        if prev is not None and loss > prev:
            rising += 1
            if rising >= 5:
                raise DivergenceError(
                    f"loss increased for 5 consecutive epochs (epoch {epoch}, "
                    f"loss {loss:.6g}); lower the learning rate")
        else:
            rising = 0
        prev = loss
        for name, g in grads.items():
            weights[name] = weights[name] - lr * g
    return TensorMap(weights)


def evaluate(spec: ModelSpec, weights: TensorMap, data: TaskDataset) -> float:
    """Mean squared error of the model on the dataset."""
    spec.validate_weights(weights)
    w64 = {name: arr.astype(np.float64) for name, arr in weights.items()}
    acts, _ = _forward_trace(spec, w64, data.inputs)
    resid = acts[-1] - data.targets
    return float(np.mean(resid * resid))


def interference_report(deltas: list[TaskVector], merged: TaskVector,
                        atol: float = 1e-7) -> InterferenceStats:
    """Sign-conflict and deviation fractions pooled over all coordinates.

    A coordinate conflicts when nonzero deltas carry both signs. It deviates
    when the merged delta is nonzero yet matches no input delta within
    ``atol``; iterative merges score exactly zero here because every merged
    coordinate is copied from a single model.
    """
    if not deltas:
        raise ValueError("need at least one delta")
    conflicts = 0
    deviations = 0
    total = 0
    for name in merged.names():
        stack = np.stack([d[name] for d in deltas])
        m = merged[name]
        has_pos = (stack > 0).any(axis=0)
        has_neg = (stack < 0).any(axis=0)
        conflicts += int((has_pos & has_neg).sum())
        matches_some = (np.abs(stack - m[None]) <= atol).any(axis=0)
        deviations += int(((m != 0) & ~matches_some).sum())
        total += m.size
    return InterferenceStats(
        sign_conflict_fraction=conflicts / total,
        deviation_fraction=deviations / total,
        coordinates=total,
    )


def save_dataset(data: TaskDataset, path) -> None:
    tmap = TensorMap(
        {"inputs": data.inputs.astype(np.float32),
         "targets": data.targets.astype(np.float32)},
        metadata={TASK_ID_KEY: data.task_id})
    write_checkpoint(tmap, path)


def load_dataset(path) -> TaskDataset:
    tmap = read_checkpoint(path)
    return TaskDataset(inputs=tmap["inputs"].astype(np.float64),
                       targets=tmap["targets"].astype(np.float64),
                       task_id=tmap.metadata.get(TASK_ID_KEY, "task"))


@dataclass(frozen=True)
class BenchConfig:
    """Knobs for one benchmark run; mirrors the CLI bench config file."""

    seed: int = 0
    tasks: int = 2
    d_in: int = 8
    d_out: int = 4
    samples: int = 64
    overlap: float = 0.0
    noise: float = 0.05
    depth: int = 1
    delta_scale: object = 0.5
    input_gain: object = 1.0
    ridge: float = 0.0
    finetune: str = "closed_form"  # closed_form | sgd | truth
    epochs: int = 400
    lr: float = 0.05
    methods: tuple[str, ...] = ("TA", "TIES", "OBIM")
    ratios: tuple[float, ...] | None = None
    lam: float = 1.0
    drop_p: float = 0.5
    order: MergeOrder | None = None
    trim_basis: str = "total"
    calib_samples: int = 100


def run_benchmark(cfg: BenchConfig, threads: int = 1):
    """Generate a suite, fine-tune, merge with each method, score everything.

    Returns (rows, suite, merges) where rows are report dicts in the fixed
    column order and merges maps method name to (merged map, audit).
    """
    suite = make_task_suite(cfg.seed, cfg.tasks, cfg.d_in, cfg.d_out, cfg.samples,
                            overlap=cfg.overlap, noise=cfg.noise, depth=cfg.depth,
                            delta_scale=cfg.delta_scale, input_gain=cfg.input_gain)
    k = cfg.tasks
    if cfg.finetune == "truth":
        finetuned = list(suite.truth)
    elif cfg.finetune == "sgd":
        finetuned = [sgd_finetune(suite.spec, suite.base, task, cfg.epochs, cfg.lr)
                     for task in suite.tasks]
    elif cfg.finetune == "closed_form":
        finetuned = [closed_form_finetune(suite.spec, suite.base, task, cfg.ridge)
                     for task in suite.tasks]
    else:
        raise ConfigError(f"unknown finetune mode {cfg.finetune!r}", path="finetune")

    # Per-model calibration inputs come from the model's own task
    # distribution; the trained model itself is run forward.
    rng = np.random.Generator(np.random.Philox(key=stream_key(cfg.seed, "calib")))
    stats: list[ActivationStats] = []
    for idx in range(k):
        x = rng.normal(size=(cfg.calib_samples, cfg.d_in))
        x[:, suite.supports[idx]] *= _as_per_task(cfg.input_gain, k, "input_gain")[idx]
        _, st = forward_collect(suite.spec, finetuned[idx], x)
        stats.append(st)

    ratios = cfg.ratios if cfg.ratios is not None else tuple([1.0 / k] * k)
    loss_base = [evaluate(suite.spec, suite.base, task) for task in suite.tasks]
    loss_ft = [evaluate(suite.spec, finetuned[i], suite.tasks[i]) for i in range(k)]
    deltas = [compute_task_vector(m, suite.base) for m in finetuned]

    rows: list[dict] = []
    merges: dict[str, tuple] = {}
    for method in cfg.methods:
        plan = MergePlan(method=method, ratios=tuple(ratios), lam=cfg.lam,
                         drop_p=cfg.drop_p, order=cfg.order, seed=cfg.seed,
                         trim_basis=cfg.trim_basis)
        merged, audit = run_merge(plan, suite.base, finetuned,
                                  calib_stats=stats, spec=suite.spec,
                                  threads=threads)
        stats_row = interference_report(deltas, audit.merged_delta)
        merges[method] = (merged, audit)
        for i in range(k):
            row = {
                "method": method,
                "task_id": suite.tasks[i].task_id,
                "loss_base": loss_base[i],
                "loss_finetuned": loss_ft[i],
                "loss_merged": evaluate(suite.spec, merged, suite.tasks[i]),
                "sign_conflict_fraction": stats_row.sign_conflict_fraction,
                "deviation_fraction": stats_row.deviation_fraction,
            }
            for j, kept in enumerate(audit.kept):
                row[f"kept_{j}"] = kept
            rows.append(row)
    return rows, suite, merges


def report_columns(k_models: int) -> list[str]:
    return list(REPORT_COLUMNS) + [f"kept_{j}" for j in range(k_models)]


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    """Render report rows with a fixed column order; floats use repr."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_csv_cell(row.get(col, "")) for col in columns])
    return buf.getvalue()


def _csv_cell(value):
    if isinstance(value, float):
        return repr(value)
    return value
