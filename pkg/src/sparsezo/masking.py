"""Per-layer magnitude thresholds and the binary masks built from them.

The magnitude policies keep the entries whose absolute value is at or below
a per-layer threshold h (ties included), so the selected set is the
small-magnitude fraction of each layer. Thresholds are calibrated once from
the starting weights; the dynamic policy then re-evaluates the predicate
against current weights every step while the constant policy freezes the
mask itself.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import noise
from .errors import StructuralError
from .tensors import LayerTensor

KINDS = ("dense", "random", "magnitude-dynamic", "magnitude-constant")
SIDES = ("small", "large")

# Bias and normalization vectors are never thresholded; they stay dense.
_DEFAULT_EXCLUDE = re.compile(r"bias|norm|gain")


@dataclass(frozen=True)
class MaskPolicy:
    """What to select: which kind of mask, how sparse, and on which layers."""

    kind: str = "dense"
    sparsity: float = 0.0
    maskable: str | None = None  # regex on layer names; None = default filter
    side: str = "small"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.side not in SIDES:
            raise ValueError(f"unknown side {self.side!r}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"sparsity must be in [0, 1), got {self.sparsity}")
        if self.kind == "dense" and self.sparsity != 0.0:
            raise ValueError("dense policy forces sparsity 0")

    def is_maskable(self, name):
        if self.kind == "dense":
            return False
        if self.maskable is not None:
            return re.search(self.maskable, name) is not None
        return _DEFAULT_EXCLUDE.search(name) is None


@dataclass
class ThresholdVector:
    """Per-layer scalar thresholds; +inf marks an always-selected layer."""

    per_layer: dict = field(default_factory=dict)  # layer_id -> h
    sparsity: float = 0.0

    def threshold(self, layer_id):
        return self.per_layer[layer_id]


def calibrate_thresholds(p, sparsity, policy):
    """Per-layer magnitude quantiles so ~(1 - sparsity) of entries pass.

    For the small side the threshold is the (1 - r)-quantile of |values|
    with lower interpolation; for the large side it is the r-quantile, with
    selection flipped to >=. Non-maskable layers get an infinite sentinel
    (always selected).
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
    per_layer = {}
    for tensor in p.layers:
        if tensor.size == 0:
            raise StructuralError(f"layer {tensor.name!r} is empty")
        if policy.kind.startswith("magnitude") and policy.is_maskable(tensor.name):
            magnitudes = np.abs(tensor.flat.astype(np.float64))
            q = sparsity if policy.side == "large" else 1.0 - sparsity
            per_layer[tensor.layer_id] = float(
                np.quantile(magnitudes, q, method="lower")
            )
        else:
            per_layer[tensor.layer_id] = np.inf
    return ThresholdVector(per_layer=per_layer, sparsity=sparsity)


def get_mask(values, threshold, side="small"):
    """Binary mask over values: 1 where |v| <= h (or >= on the large side).

    Ties are included. An infinite threshold selects everything regardless
    of side (the always-dense sentinel). The input is never modified.
    """
    if isinstance(values, LayerTensor):
        values = values.values
    values = np.asarray(values)
    if np.isinf(threshold):
        return np.ones(values.shape, dtype=np.uint8)
    if side == "large":
        return (np.abs(values) >= threshold).astype(np.uint8)
    return (np.abs(values) <= threshold).astype(np.uint8)


def random_mask(shape, sparsity, stream):
    """Each entry independently 1 with probability 1 - sparsity."""
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
    n = int(np.prod(shape, dtype=np.int64))
    if sparsity == 0.0:
        stream.uniform(n)  # keep cursor semantics identical
        return np.ones(shape, dtype=np.uint8)
    u = stream.uniform(n)
    return (u < 1.0 - sparsity).astype(np.uint8).reshape(shape)


def count_selected(mask):
    """Population count of a mask array or a list of per-layer masks."""
    if isinstance(mask, (list, tuple)):
        return sum(count_selected(m) for m in mask)
    return int(np.asarray(mask).sum(dtype=np.int64))


class Masker:
    """A policy bound to calibrated thresholds (and stored constant masks).

    `layer_mask` returns None for layers that need no mask buffer (dense
    selection), otherwise a uint8 array aligned to the layer shape.
    """

    def __init__(self, policy, thresholds=None, constant_masks=None):
        self.policy = policy
        self.thresholds = thresholds
        self.constant_masks = constant_masks

    @classmethod
    def for_params(cls, p, policy):
        """Calibrate on p's current values; materialize constant masks if asked."""
        if policy.kind == "dense":
            return cls(policy)
        if policy.kind == "random":
            return cls(policy)
        thresholds = calibrate_thresholds(p, policy.sparsity, policy)
        constant = None
        if policy.kind == "magnitude-constant":
            constant = [
                get_mask(t.values, thresholds.threshold(t.layer_id), policy.side)
                for t in p.layers
            ]
        return cls(policy, thresholds=thresholds, constant_masks=constant)

    @property
    def dynamic(self):
        """True when the mask depends on the current parameter values."""
        return self.policy.kind == "magnitude-dynamic"

    def layer_mask(self, layer, step_seed=None, base_values=None):
        kind = self.policy.kind
        if kind == "dense":
            return None
        if kind == "random":
            if step_seed is None:
                raise ValueError("random masks need the step seed")
            stream = noise.derive_substream(
                noise.hash_pair(step_seed, noise.MASK_SALT), layer.layer_id
            )
            return random_mask(layer.shape, self.policy.sparsity, stream)
        if kind == "magnitude-constant":
            return self.constant_masks[layer.layer_id]
        h = self.thresholds.threshold(layer.layer_id)
        if np.isinf(h):
            return None  # always-selected layer: no buffer needed
        values = layer.values if base_values is None else base_values
        return get_mask(values, h, self.policy.side)


def save_thresholds(thresholds, p, path):
    """Write the audit file: one `layer_name = h` line per layer."""
    lines = [f"# per-layer magnitude thresholds (sparsity = {thresholds.sparsity!r})"]
    for tensor in p.layers:
        h = thresholds.threshold(tensor.layer_id)
        lines.append(f"{tensor.name} = {h!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
