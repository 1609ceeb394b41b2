"""Task-vector algebra: delta construction, application, scaling, masked sums."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    FingerprintMismatchError,
    MaskOverlapError,
    MissingTensorError,
    NonFiniteError,
    ShapeMismatchError,
)
from .tensorstore import TensorMap, read_checkpoint, validate_compat, write_checkpoint

BASE_FINGERPRINT_KEY = "base_fingerprint"


@dataclass(frozen=True)
class TaskVector:
    """Per-tensor weight deltas bound to the base checkpoint they came from."""

    base_fingerprint: int
    deltas: TensorMap

    def names(self) -> list[str]:
        return self.deltas.names()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.deltas[name]


@dataclass(frozen=True)
class MergeMask:
    """Per-tensor binary keep masks, shape-aligned with a task vector."""

    masks: dict[str, np.ndarray]

    def __post_init__(self):
        clean: dict[str, np.ndarray] = {}
        for name in sorted(self.masks):
            arr = np.asarray(self.masks[name])
            if arr.dtype != np.bool_:
                vals = np.asarray(arr, dtype=np.float64)
                if not np.isin(vals, (0.0, 1.0)).all():
                    raise ValueError(f"mask '{name}' has elements other than 0 and 1")
                arr = vals.astype(bool)
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            clean[name] = arr
        object.__setattr__(self, "masks", clean)

    def names(self) -> list[str]:
        return list(self.masks)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.masks[name]

    def kept(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))


def compute_task_vector(model: TensorMap, base: TensorMap) -> TaskVector:
    """Elementwise model minus base, stamped with the base fingerprint."""
    validate_compat([model, base])
    deltas = {name: model[name] - base[name] for name in base.names()}
    return TaskVector(base_fingerprint=base.fingerprint, deltas=TensorMap(deltas))


def apply_delta(base: TensorMap, delta: TaskVector) -> TensorMap:
    """Elementwise base plus delta; refuses deltas built from another base."""
    if delta.base_fingerprint != base.fingerprint:
        raise FingerprintMismatchError(
            f"delta was built against base {delta.base_fingerprint:016x}, "
            f"got base {base.fingerprint:016x}")
    merged = {name: base[name] + delta.deltas[name] for name in base.names()}
    return TensorMap(merged)


def scale_delta(delta: TaskVector, lam: float) -> TaskVector:
    """Multiply every delta element by a finite scalar."""
    if not np.isfinite(lam):
        raise NonFiniteError(f"scaling coefficient must be finite, got {lam}")
    lam32 = np.float32(lam)
    scaled = {name: delta[name] * lam32 for name in delta.names()}
    return TaskVector(delta.base_fingerprint, TensorMap(scaled))


def check_disjoint(masks: list[MergeMask]) -> None:
    """Raise MaskOverlapError unless per coordinate at most one mask holds 1."""
    if not masks:
        return
    names = masks[0].names()
    for mask in masks[1:]:
        if mask.names() != names:
            raise MissingTensorError("masks cover different tensor names")
    for name in names:
        total = np.zeros(masks[0][name].shape, dtype=np.int64)
        for mask in masks:
            if mask[name].shape != total.shape:
                raise ShapeMismatchError(f"mask '{name}' shapes disagree")
            total += mask[name]
        if (total > 1).any():
            count = int((total > 1).sum())
            raise MaskOverlapError(
                f"tensor '{name}': {count} coordinates claimed by more than one mask")


def sum_masked(deltas: list[TaskVector], masks: list[MergeMask]) -> TaskVector:
    """Combine deltas under disjoint binary masks.

    Because at most one mask holds 1 per coordinate, every output coordinate
    is either 0 or exactly one input delta's value; no averaging happens.
    Disjointness is checked eagerly rather than trusted.
    """
    if len(deltas) != len(masks):
        raise ValueError(f"{len(deltas)} deltas but {len(masks)} masks")
    if not deltas:
        raise ValueError("need at least one delta")
    fp = deltas[0].base_fingerprint
    for d in deltas[1:]:
        if d.base_fingerprint != fp:
            raise FingerprintMismatchError("deltas do not share a base fingerprint")
    if len(deltas) > 1:
        validate_compat([d.deltas for d in deltas])
    names = deltas[0].names()
    for mask in masks:
        if mask.names() != names:
            raise MissingTensorError("mask tensor names do not match the deltas")
        for name in names:
            if mask[name].shape != deltas[0][name].shape:
                raise ShapeMismatchError(
                    f"mask '{name}' shape {mask[name].shape} does not match delta "
                    f"shape {deltas[0][name].shape}")
    check_disjoint(masks)
    out: dict[str, np.ndarray] = {}
    for name in names:
        acc = np.zeros(deltas[0][name].shape, dtype=np.float32)
        for delta, mask in zip(deltas, masks):
            acc = acc + delta[name] * mask[name]
        out[name] = acc
    return TaskVector(fp, TensorMap(out))


def save_task_vector(delta: TaskVector, path) -> None:
    """Persist in checkpoint format with the base fingerprint in metadata."""
    tmap = TensorMap(dict(delta.deltas.items()),
                     metadata={BASE_FINGERPRINT_KEY: f"{delta.base_fingerprint:016x}"})
    write_checkpoint(tmap, path)


def load_task_vector(path) -> TaskVector:
    tmap = read_checkpoint(path)
    fp_hex = tmap.metadata.get(BASE_FINGERPRINT_KEY)
    if fp_hex is None:
        raise MissingTensorError(
            f"'{path}' is not a task vector: no {BASE_FINGERPRINT_KEY} metadata")
    deltas = TensorMap(dict(tmap.items()))
    return TaskVector(int(fp_hex, 16), deltas)


def save_mask(mask: MergeMask, path) -> None:
    """Persist a mask as 0/1 float32 tensors for audit."""
    tmap = TensorMap({name: arr.astype(np.float32) for name, arr in mask.masks.items()})
    write_checkpoint(tmap, path)


def load_mask(path) -> MergeMask:
    tmap = read_checkpoint(path)
    return MergeMask({name: arr for name, arr in tmap.items()})
