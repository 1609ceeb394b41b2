"""Merging engines.

Two families live here. The disjoint-mean family (TIES, DARE and their
variants) trims or drops each task vector independently, then resolves each
coordinate by electing a sign from the summed deltas and averaging the
sign-agreeing values. The iterative family grows a merged mask per tensor:
models are visited in order, each claims the top-scoring fraction of the
still-unclaimed coordinates, and the union of claims is carried forward, so
no coordinate is ever averaged. A left-rotation of the visiting order
between tensors keeps any one model from always going first.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calib import ActivationStats, ModelSpec, hessian_diag
from .errors import (
    ConfigError,
    MissingStatsError,
    NonFiniteError,
    RatioSumError,
    UnavailableMethodError,
)
from .saliency import SaliencyMap, magnitude_scores, obm_scores, select_top, trim_topk
from .taskvec import (
    MergeMask,
    TaskVector,
    apply_delta,
    compute_task_vector,
    sum_masked,
)
from .tensorstore import TensorMap, validate_compat
from .util import map_ordered, rng_for, stream_key

METHODS = ("TA", "TIES", "DARE", "TIES+OBM", "TIES+IM", "OBIM")
IM_METHODS = ("TIES+IM", "OBIM")
OBM_METHODS = ("TIES+OBM", "OBIM")

# Named but deliberately not implemented; their defining selection rules are
# not specified by this toolkit. run_merge refuses them up front.
UNAVAILABLE_METHODS = {
    "DELLA": "its stochastic magnitude-to-dropout-probability rule is not specified here",
    "TALL-MASK": "its consensus threshold rule is not specified here",
    "PCB": "its parameter-competition objective is not specified here",
}

RATIO_SUM_TOL = 1e-9


@dataclass(frozen=True)
class MergeOrder:
    """Model visiting order plus the policy for advancing it across tensors."""

    order: tuple[int, ...]
    policy: str = "rotation"

    def __post_init__(self):
        if self.policy not in ("rotation", "fixed"):
            raise ValueError(f"unknown order policy {self.policy!r}")
        order = tuple(int(i) for i in self.order)
        if sorted(order) != list(range(len(order))):
            raise ValueError(f"order {order} is not a permutation of 0..{len(order) - 1}")
        object.__setattr__(self, "order", order)


def rotate_order(order: MergeOrder) -> MergeOrder:
    """One left rotation: [o1, o2, ..., oK] -> [o2, ..., oK, o1]."""
    if order.policy != "rotation":
        raise ValueError("rotate_order requires the rotation policy")
    o = order.order
    return MergeOrder(o[1:] + o[:1], policy="rotation")


def order_model_first(k_models: int, idx: int) -> MergeOrder:
    """Fixed order putting one model first, the rest in ascending index."""
    rest = [i for i in range(k_models) if i != idx]
    return MergeOrder((idx, *rest), policy="fixed")


def order_model_last(k_models: int, idx: int) -> MergeOrder:
    rest = [i for i in range(k_models) if i != idx]
    return MergeOrder((*rest, idx), policy="fixed")


@dataclass(frozen=True)
class MergePlan:
    """Declarative merge configuration."""

    method: str
    ratios: tuple[float, ...]
    lam: float = 1.0
    drop_p: float = 0.5
    order: MergeOrder | None = None
    seed: int = 0
    trim_basis: str = "total"

    def validate(self, k_models: int) -> None:
        method = self.method
        if method in UNAVAILABLE_METHODS:
            raise UnavailableMethodError(
                f"{method} is recognized but unavailable: {UNAVAILABLE_METHODS[method]}",
                path="method")
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}",
                              path="method")
        if len(self.ratios) != k_models:
            raise ConfigError(
                f"{len(self.ratios)} ratios for {k_models} models", path="models")
        for i, r in enumerate(self.ratios):
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"ratio {r} outside [0, 1]", path=f"models[{i}].ratio")
        if method in IM_METHODS and sum(self.ratios) > 1.0 + RATIO_SUM_TOL:
            raise RatioSumError(
                f"iterative merging requires the ratios to sum to at most 1, "
                f"got {sum(self.ratios)}", path="models[*].ratio")
        if not 0.0 <= self.drop_p < 1.0:
            raise ConfigError(f"drop_p must lie in [0, 1), got {self.drop_p}",
                              path="drop_p")
        if not np.isfinite(self.lam):
            raise ConfigError(f"lambda must be finite, got {self.lam}", path="lambda")
        if self.order is not None and len(self.order.order) != k_models:
            raise ConfigError(
                f"order lists {len(self.order.order)} models, expected {k_models}",
                path="order.sequence")


@dataclass(frozen=True)
class MergeAudit:
    """Bookkeeping returned next to a merged checkpoint."""

    method: str
    kept: tuple[int, ...]
    total_coords: int
    overlap_coords: int
    merged_delta: TaskVector
    masks: tuple[MergeMask, ...]


def _order_schedule(initial: MergeOrder, n_tensors: int) -> list[tuple[int, ...]]:
    """Visiting order per tensor index; a pure function, safe to precompute."""
    if initial.policy == "fixed":
        return [initial.order] * n_tensors
    k = len(initial.order)
    out = []
    for t in range(n_tensors):
        shift = t % k
        out.append(initial.order[shift:] + initial.order[:shift])
    return out


def iterative_merge(base: TensorMap, deltas: list[TaskVector],
                    saliencies: list[SaliencyMap], plan: MergePlan,
                    threads: int = 1) -> tuple[TensorMap, list[MergeMask]]:
    """Merge by growing a per-tensor merged mask, one model at a time.

    For every tensor (in lexicographic name order) the models are visited in
    the current order; each claims the top-ratio fraction of its scores
    among coordinates no earlier model claimed. Rotation advances the order
    once per tensor. The masks are disjoint by construction and the merged
    model is base plus the masked sum of the deltas.
    """
    k = len(deltas)
    if len(saliencies) != k:
        raise ConfigError(f"{k} deltas but {len(saliencies)} saliency maps")
    plan.validate(k)
    if sum(plan.ratios) > 1.0 + RATIO_SUM_TOL:
        raise RatioSumError(f"ratios sum to {sum(plan.ratios)} > 1")
    names = base.names()
    for i, (delta, sal) in enumerate(zip(deltas, saliencies)):
        if delta.names() != names:
            raise ConfigError(f"delta {i} does not cover the base tensor set")
        if sal.names() != names:
            raise ConfigError(f"saliency map {i} does not cover the base tensor set")
    initial = plan.order if plan.order is not None else MergeOrder(tuple(range(k)))
    if len(initial.order) != k:
        raise ConfigError("order length does not match the number of models")
    schedule = _order_schedule(initial, len(names))

    def masks_for(tensor_idx: int) -> list[np.ndarray]:
        name = names[tensor_idx]
        shape = base[name].shape
        claimed = np.zeros(int(np.prod(shape)), dtype=bool)
        local = [np.zeros(shape, dtype=bool) for _ in range(k)]
        for model_idx in schedule[tensor_idx]:
            flat_scores = saliencies[model_idx][name].reshape(-1)
            picked = select_top(flat_scores, plan.ratios[model_idx],
                                exclude_flat=claimed, basis=plan.trim_basis)
            local[model_idx] = picked.reshape(shape)
            claimed |= picked
        return local

    per_tensor = map_ordered(masks_for, range(len(names)), threads=threads)
    masks = [
        MergeMask({name: per_tensor[t][m] for t, name in enumerate(names)})
        for m in range(k)
    ]
    merged_delta = sum_masked(deltas, masks)
    return apply_delta(base, merged_delta), masks


def disjoint_mean(deltas: list[TaskVector]) -> TaskVector:
    """Sign-elect then average: per coordinate, keep only the values whose
    sign matches the sign of the summed deltas, and average those.

    Exact zeros carry no sign information, so they are excluded from both
    the electorate and the mean; an all-zero coordinate stays zero. A sum of
    exactly zero with nonzero entries elects the positive side.
    """
    if not deltas:
        raise ValueError("need at least one delta")
    fp = deltas[0].base_fingerprint
    for d in deltas[1:]:
        if d.base_fingerprint != fp:
            raise ConfigError("deltas do not share a base fingerprint")
    if len(deltas) > 1:
        validate_compat([d.deltas for d in deltas])
    out: dict[str, np.ndarray] = {}
    for name in deltas[0].names():
        stack = np.stack([d[name] for d in deltas])
        total = stack.sum(axis=0)
        gamma = np.where(total < 0, np.float32(-1.0), np.float32(1.0))
        agree = (stack != 0) & (np.sign(stack) == gamma)
        count = agree.sum(axis=0).astype(np.float32)
        summed = (stack * agree).sum(axis=0)
        out[name] = np.where(count > 0, summed / np.maximum(count, np.float32(1.0)),
                             np.float32(0.0))
    return TaskVector(fp, TensorMap(out))


def _dare_keep_masks(delta: TaskVector, drop_p: float, seed: int) -> dict[str, np.ndarray]:
    return {
        name: rng_for(seed, name).random(delta[name].shape) >= drop_p
        for name in delta.names()
    }


def dare_drop_rescale(delta: TaskVector, drop_p: float, seed: int) -> TaskVector:
    """Zero each element independently with probability drop_p and scale
    survivors by 1/(1 - drop_p), preserving the delta in expectation.

    The decision for a given element depends only on (seed, tensor name,
    flat index) thanks to the counter-based per-tensor streams.
    """
    if not 0.0 <= drop_p < 1.0:
        raise ConfigError(f"drop_p must lie in [0, 1), got {drop_p}", path="drop_p")
    scale = np.float32(1.0 / (1.0 - drop_p))
    keep = _dare_keep_masks(delta, drop_p, seed)
    out = {
        name: np.where(keep[name], delta[name] * scale, np.float32(0.0))
        for name in delta.names()
    }
    return TaskVector(delta.base_fingerprint, TensorMap(out))


def task_arithmetic(base: TensorMap, deltas: list[TaskVector],
                    lam: float) -> TensorMap:
    """theta_base + lam * sum of deltas."""
    if not deltas:
        raise ValueError("need at least one delta")
    if not np.isfinite(lam):
        raise NonFiniteError(f"lambda must be finite, got {lam}")
    fp = deltas[0].base_fingerprint
    for d in deltas[1:]:
        if d.base_fingerprint != fp:
            raise ConfigError("deltas do not share a base fingerprint")
    lam32 = np.float32(lam)
    combined: dict[str, np.ndarray] = {}
    for name in deltas[0].names():
        acc = deltas[0][name].copy()
        for d in deltas[1:]:
            acc = acc + d[name]
        combined[name] = acc * lam32
    return apply_delta(base, TaskVector(fp, TensorMap(combined)))


def _full_masks(delta: TaskVector) -> MergeMask:
    return MergeMask({name: np.ones(delta[name].shape, dtype=bool)
                      for name in delta.names()})


def _mask_delta(delta: TaskVector, mask: MergeMask) -> TaskVector:
    out = {name: np.where(mask[name], delta[name], np.float32(0.0))
           for name in delta.names()}
    return TaskVector(delta.base_fingerprint, TensorMap(out))


def _overlap_count(masks: list[MergeMask]) -> int:
    if not masks:
        return 0
    total = 0
    for name in masks[0].names():
        stacked = np.stack([m[name] for m in masks]).sum(axis=0)
        total += int((stacked > 1).sum())
    return total


def run_merge(plan: MergePlan, base: TensorMap, models: list[TensorMap],
              calib_stats: list[ActivationStats | None] | None = None,
              spec: ModelSpec | None = None,
              threads: int = 1) -> tuple[TensorMap, MergeAudit]:
    """Dispatch a merge plan over checkpoints and return (merged, audit).

    TA sums scaled deltas. TIES trims each delta by magnitude before the
    disjoint mean; TIES+OBM swaps the trim criterion for curvature scores;
    DARE replaces trimming with random drop-and-rescale. TIES+IM feeds
    magnitude scores to the iterative engine, OBIM feeds curvature scores.
    """
    if not models:
        raise ConfigError("need at least one model to merge", path="models")
    plan.validate(len(models))
    validate_compat([base, *models])
    deltas = [compute_task_vector(m, base) for m in models]
    method = plan.method

    def saliency_for(k_idx: int) -> SaliencyMap:
        if method in OBM_METHODS:
            if spec is None:
                raise MissingStatsError(
                    f"method {method} needs a model spec to locate linear weights",
                    path="spec")
            stats = None if calib_stats is None else calib_stats[k_idx]
            if stats is None:
                raise MissingStatsError(
                    f"method {method} needs calibration stats for model {k_idx}",
                    path=f"models[{k_idx}].stats_path")
            return obm_scores(deltas[k_idx], spec, hessian_diag(stats),
                              seed=stream_key(plan.seed, f"saliency/{k_idx}"))
        return magnitude_scores(deltas[k_idx])

    if method == "TA":
        merged = task_arithmetic(base, deltas, plan.lam)
        masks = [_full_masks(d) for d in deltas]
        merged_delta = compute_task_vector(merged, base)
    elif method in IM_METHODS:
        saliencies = map_ordered(saliency_for, range(len(models)), threads=threads)
        merged, masks = iterative_merge(base, deltas, saliencies, plan,
                                        threads=threads)
        merged_delta = sum_masked(deltas, masks)
    else:  # TIES, TIES+OBM, DARE: per-model sparsify, then disjoint mean
        if method == "DARE":
            def sparsify(k_idx: int) -> tuple[TaskVector, MergeMask]:
                seed_k = stream_key(plan.seed, f"dare/{k_idx}")
                keep = _dare_keep_masks(deltas[k_idx], plan.drop_p, seed_k)
                return (dare_drop_rescale(deltas[k_idx], plan.drop_p, seed_k),
                        MergeMask(keep))
        else:
            def sparsify(k_idx: int) -> tuple[TaskVector, MergeMask]:
                mask = trim_topk(saliency_for(k_idx), plan.ratios[k_idx],
                                 basis=plan.trim_basis)
                return _mask_delta(deltas[k_idx], mask), mask
        pairs = map_ordered(sparsify, range(len(models)), threads=threads)
        trimmed = [p[0] for p in pairs]
        masks = [p[1] for p in pairs]
        merged_delta = disjoint_mean(trimmed)
        merged = apply_delta(base, merged_delta)

    audit = MergeAudit(
        method=method,
        kept=tuple(m.kept() for m in masks),
        total_coords=base.total_elements(),
        overlap_coords=_overlap_count(masks),
        merged_delta=merged_delta,
        masks=tuple(masks),
    )
    return merged, audit
