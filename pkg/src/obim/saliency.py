"""Per-parameter scoring of task vectors and top-fraction trimming.

Scores estimate how much the layer output moves when a single delta entry
is zeroed: for an entry in column j of a linear weight that is half the
curvature diagonal h_j times the squared delta. Tensors outside the linear
stack (biases and friends) carry no layer curvature, so they get seeded
uniform random scores, which turns downstream trimming into random pruning.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calib import ModelSpec
from .errors import MissingStatsError, NonFiniteError, ShapeMismatchError
from .taskvec import MergeMask, TaskVector
from .util import rng_for

SCORER_TAGS = ("obm", "magnitude", "random")

# Retention count basis: "total" reads the keep fraction against the full
# element count of the tensor, "remaining" against the not-yet-excluded pool.
TRIM_BASES = ("total", "remaining")


@dataclass(frozen=True)
class SaliencyMap:
    """Non-negative scores aligned elementwise with a task vector."""

    scores: dict[str, np.ndarray]
    scorer_tag: str

    def __post_init__(self):
        if self.scorer_tag not in SCORER_TAGS:
            raise ValueError(f"unknown scorer tag {self.scorer_tag!r}")
        clean: dict[str, np.ndarray] = {}
        for name in sorted(self.scores):
            arr = np.ascontiguousarray(self.scores[name], dtype=np.float64)
            if not np.isfinite(arr).all():
                raise NonFiniteError(f"scores for '{name}' contain non-finite values")
            if (arr < 0).any():
                raise ValueError(f"scores for '{name}' contain negative values")
            arr.flags.writeable = False
            clean[name] = arr
        object.__setattr__(self, "scores", clean)

    def names(self) -> list[str]:
        return list(self.scores)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.scores[name]


def obm_scores(delta: TaskVector, spec: ModelSpec,
               hess: dict[str, np.ndarray], seed: int) -> SaliencyMap:
    """Curvature-weighted scores for linear weights, random for the rest.

    Entry (i, j) of a linear weight scores 0.5 * h_j * delta_ij**2. Random
    scores are drawn from a per-tensor stream keyed by (seed, tensor name),
    so results do not depend on tensor visiting order or thread count.
    """
    linear = set(spec.weight_names())
    scores: dict[str, np.ndarray] = {}
    for name in delta.names():
        d = delta[name].astype(np.float64)
        if name in linear:
            if name not in hess:
                raise MissingStatsError(f"no curvature vector for linear weight '{name}'")
            h = np.asarray(hess[name], dtype=np.float64)
            if d.ndim != 2 or h.shape != (d.shape[1],):
                raise ShapeMismatchError(
                    f"curvature for '{name}' has length {h.shape}, weight expects "
                    f"{d.shape[1] if d.ndim == 2 else d.shape} input features")
            scores[name] = 0.5 * h[None, :] * d * d
        else:
            scores[name] = rng_for(seed, name).random(d.shape)
    return SaliencyMap(scores=scores, scorer_tag="obm")


def magnitude_scores(delta: TaskVector, normalize: str = "none") -> SaliencyMap:
    """Absolute delta values, applied uniformly to every tensor.

    normalize="rank" replaces each score with its quantile rank in the
    pooled |delta| distribution across all tensors. The map is monotone
    within each tensor, so per-tensor selections are unchanged; it only
    makes scores comparable across tensors.
    """
    if normalize not in ("none", "rank"):
        raise ValueError(f"unknown normalize mode {normalize!r}")
    scores = {name: np.abs(delta[name]).astype(np.float64) for name in delta.names()}
    if normalize == "rank":
        pooled = np.sort(np.concatenate([s.reshape(-1) for s in scores.values()]))
        total = pooled.size
        scores = {
            name: np.searchsorted(pooled, s, side="left").astype(np.float64) / total
            for name, s in scores.items()
        }
    return SaliencyMap(scores=scores, scorer_tag="magnitude")


def random_scores(delta: TaskVector, seed: int) -> SaliencyMap:
    """Seeded uniform scores; trimming on these is random pruning."""
    scores = {name: rng_for(seed, name).random(delta[name].shape)
              for name in delta.names()}
    return SaliencyMap(scores=scores, scorer_tag="random")


def select_top(scores_flat: np.ndarray, ratio: float,
               exclude_flat: np.ndarray | None = None,
               basis: str = "total") -> np.ndarray:
    """Flat boolean mask over the r highest-scoring non-excluded indices.

    r is floor(ratio * pool) where pool is the tensor's total element count
    (basis "total") or the non-excluded count (basis "remaining"), capped at
    the number of available indices. Ties break by ascending flat index.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    if basis not in TRIM_BASES:
        raise ValueError(f"unknown trim basis {basis!r}")
    d = scores_flat.size
    if exclude_flat is None:
        available = np.arange(d)
    else:
        if exclude_flat.size != d:
            raise ShapeMismatchError("exclusion mask size does not match scores")
        available = np.nonzero(~exclude_flat)[0]
    pool = d if basis == "total" else available.size
    # the tiny bump guards against decimal ratios that land just below an
    # exact multiple in binary floating point (e.g. 0.29 * 100)
    r = min(int(math.floor(ratio * pool + 1e-9)), available.size)
    mask = np.zeros(d, dtype=bool)
    if r > 0:
        order = np.argsort(-scores_flat[available], kind="stable")
        mask[available[order[:r]]] = True
    return mask


def trim_topk(scores: SaliencyMap, ratio: float,
              exclude: MergeMask | None = None,
              basis: str = "total") -> MergeMask:
    """Per tensor, keep the top-scoring fraction outside the excluded set."""
    masks: dict[str, np.ndarray] = {}
    for name, s in scores.scores.items():
        flat = s.reshape(-1)
        excl = None
        if exclude is not None:
            if name not in exclude.masks:
                raise ShapeMismatchError(f"exclusion mask missing tensor '{name}'")
            excl = exclude[name].reshape(-1)
        masks[name] = select_top(flat, ratio, excl, basis).reshape(s.shape)
    return MergeMask(masks)
