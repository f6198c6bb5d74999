"""Sparse and dense zeroth-order optimization with seed-replay perturbations.

The package provides gradient-free steppers (two-point estimates along
replayable Gaussian directions, optionally restricted by magnitude or
random masks), desk-scale synthetic workloads to run them on, independent
oracles that cross-check every estimator, and an experiment harness with a
command-line interface.
"""

from .errors import (
    CheckpointError,
    CostGuardError,
    DivergenceError,
    NumericError,
    StateError,
    StepAborted,
    StructuralError,
)
from .masking import (
    MaskPolicy,
    Masker,
    ThresholdVector,
    calibrate_thresholds,
    count_selected,
    get_mask,
    random_mask,
)
from .noise import NoiseStream, derive_substream, gaussian_fill, hash_pair, schedule_seed
from .tensors import (
    LayerTensor,
    ParameterSet,
    axpy_into,
    flat_view,
    load_checkpoint,
    save_checkpoint,
    values_provider,
)
from .zo import (
    PerturbCycle,
    ZoConfig,
    ZoStepRecord,
    apply_update,
    fused_forward_perturbed,
    perturb_parameters,
    spsa_estimate,
    step,
    theory_lr,
    theory_step_bound,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "CostGuardError",
    "DivergenceError",
    "LayerTensor",
    "MaskPolicy",
    "Masker",
    "NoiseStream",
    "NumericError",
    "ParameterSet",
    "PerturbCycle",
    "StateError",
    "StepAborted",
    "StructuralError",
    "ThresholdVector",
    "ZoConfig",
    "ZoStepRecord",
    "apply_update",
    "axpy_into",
    "calibrate_thresholds",
    "count_selected",
    "derive_substream",
    "flat_view",
    "fused_forward_perturbed",
    "gaussian_fill",
    "get_mask",
    "hash_pair",
    "load_checkpoint",
    "perturb_parameters",
    "random_mask",
    "save_checkpoint",
    "schedule_seed",
    "spsa_estimate",
    "step",
    "theory_lr",
    "theory_step_bound",
    "values_provider",
]
