"""Forward engine for toy layer stacks and per-layer input statistics.

For each linear layer the engine records the mean squared value of every
input feature over the calibration samples. Twice that vector is the
diagonal of the layer's Gram-based curvature, which is all the saliency
scorer needs. Only inputs are consumed; no labels or backward passes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    MissingTensorError,
    NonFiniteError,
    ShapeMismatchError,
)
from .tensorstore import TensorMap, read_checkpoint, write_checkpoint

ACTIVATIONS = ("identity", "relu", "tanh")

# Mean of squared activations is the default because it equals the true
# Gram diagonal divided by the sample count; squaring the mean activation
# is kept as an alternative policy.
POLICIES = ("mean_of_squares", "square_of_mean")

SAMPLE_COUNT_KEY = "sample_count"
SQMEAN_SUFFIX = ".sqmean"


@dataclass(frozen=True)
class LayerSpec:
    weight: str
    bias: str | None = None
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; "
                             f"expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered stack of linear layers with optional biases and activations."""

    input_dim: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a model needs at least one layer")
        names = [ls.weight for ls in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer weight names must be unique")
        object.__setattr__(self, "layers", layers)

    def weight_names(self) -> list[str]:
        return [ls.weight for ls in self.layers]

    def validate_weights(self, weights: TensorMap) -> None:
        """Check shapes chain: layer l's in_dim equals layer l-1's out_dim."""
        prev_out = self.input_dim
        for ls in self.layers:
            if ls.weight not in weights:
                raise MissingTensorError(f"weights missing tensor '{ls.weight}'")
            w = weights[ls.weight]
            if w.ndim != 2:
                raise ShapeMismatchError(
                    f"layer weight '{ls.weight}' must be 2-D, got shape {w.shape}")
            if w.shape[1] != prev_out:
                raise ShapeMismatchError(
                    f"layer '{ls.weight}' expects {w.shape[1]} input features, "
                    f"previous layer provides {prev_out}")
            if ls.bias is not None:
                if ls.bias not in weights:
                    raise MissingTensorError(f"weights missing bias '{ls.bias}'")
                b = weights[ls.bias]
                if b.shape != (w.shape[0],):
                    raise ShapeMismatchError(
                        f"bias '{ls.bias}' shape {b.shape} does not match "
                        f"out_dim {w.shape[0]} of '{ls.weight}'")
            prev_out = w.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layers": [
                {"weight": ls.weight, "bias": ls.bias, "activation": ls.activation}
                for ls in self.layers
            ],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ModelSpec":
        layers = tuple(
            LayerSpec(weight=d["weight"], bias=d.get("bias"),
                      activation=d.get("activation", "identity"))
            for d in obj["layers"]
        )
        return cls(input_dim=int(obj["input_dim"]), layers=layers)


@dataclass(frozen=True)
class ActivationStats:
    """Per-layer second moments of the layer inputs.

    sqmean maps each linear weight name to a vector over its input features;
    sample_count is shared because one forward pass feeds every layer.
    """

    sqmean: dict[str, np.ndarray]
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")
        clean: dict[str, np.ndarray] = {}
        for name in sorted(self.sqmean):
            vec = np.ascontiguousarray(self.sqmean[name], dtype=np.float64)
            if vec.ndim != 1:
                raise ShapeMismatchError(f"stats for '{name}' must be a vector")
            if not np.isfinite(vec).all():
                raise NonFiniteError(f"stats for '{name}' contain non-finite values")
            if (vec < 0).any():
                raise ValueError(f"stats for '{name}' contain negative second moments")
            vec.flags.writeable = False
            clean[name] = vec
        object.__setattr__(self, "sqmean", clean)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def forward_collect(spec: ModelSpec, weights: TensorMap, inputs,
                    policy: str = "mean_of_squares"):
    """Run the network forward and collect per-layer input statistics.

    The input to layer l is the post-activation output of layer l-1 (the raw
    samples for layer 0). Returns (outputs, ActivationStats). All arithmetic
    happens in float64 so batch splits recombine to the same statistics up
    to tiny reorder noise.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown stats policy {policy!r}; expected one of {POLICIES}")
    spec.validate_weights(weights)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeMismatchError(
            f"inputs must have shape [N, {spec.input_dim}], got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeMismatchError("need at least one calibration sample")
    if not np.isfinite(x).all():
        raise NonFiniteError("calibration inputs contain non-finite values")

    sqmean: dict[str, np.ndarray] = {}
    for ls in spec.layers:
        if policy == "mean_of_squares":
            sqmean[ls.weight] = np.mean(x * x, axis=0)
        else:
            sqmean[ls.weight] = np.mean(x, axis=0) ** 2
        z = x @ weights[ls.weight].astype(np.float64).T
        if ls.bias is not None:
            z = z + weights[ls.bias].astype(np.float64)
        x = _act(ls.activation, z)
        if not np.isfinite(x).all():
            raise NonFiniteError(f"layer '{ls.weight}' produced non-finite activations")
    return x, ActivationStats(sqmean=sqmean, sample_count=int(np.asarray(inputs).shape[0]))


def hessian_diag(stats: ActivationStats) -> dict[str, np.ndarray]:
    """Curvature diagonal per layer: twice the mean squared input features."""
    return {name: 2.0 * vec for name, vec in stats.sqmean.items()}


def merge_stats(a: ActivationStats, b: ActivationStats) -> ActivationStats:
    """Sample-count-weighted combination; order of arguments does not matter."""
    if set(a.sqmean) != set(b.sqmean):
        raise MissingTensorError("stats cover different layers")
    merged: dict[str, np.ndarray] = {}
    n_a, n_b = a.sample_count, b.sample_count
    for name, va in a.sqmean.items():
        vb = b.sqmean[name]
        if va.shape != vb.shape:
            raise ShapeMismatchError(f"stats for '{name}' have mismatched lengths")
        merged[name] = (n_a * va + n_b * vb) / (n_a + n_b)
    return ActivationStats(sqmean=merged, sample_count=n_a + n_b)


def save_stats(stats: ActivationStats, path) -> None:
    """Persist as a checkpoint with one '<weight>.sqmean' tensor per layer."""
    tensors = {name + SQMEAN_SUFFIX: vec.astype(np.float32)
               for name, vec in stats.sqmean.items()}
    tmap = TensorMap(tensors, metadata={SAMPLE_COUNT_KEY: str(stats.sample_count)})
    write_checkpoint(tmap, path)


def load_stats(path) -> ActivationStats:
    tmap = read_checkpoint(path)
    if SAMPLE_COUNT_KEY not in tmap.metadata:
        raise MissingTensorError(f"'{path}' is not a stats file: no {SAMPLE_COUNT_KEY}")
    sqmean: dict[str, np.ndarray] = {}
    for name, vec in tmap.items():
        if not name.endswith(SQMEAN_SUFFIX):
            raise MissingTensorError(
                f"unexpected tensor '{name}' in stats file (want *{SQMEAN_SUFFIX})")
        sqmean[name[:-len(SQMEAN_SUFFIX)]] = vec.astype(np.float64)
    return ActivationStats(sqmean=sqmean,
                           sample_count=int(tmap.metadata[SAMPLE_COUNT_KEY]))
