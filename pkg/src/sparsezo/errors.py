"""Exception types shared across the package."""


class StructuralError(ValueError):
    """Shapes, lengths, manifests, or layer bookkeeping do not line up."""


class CheckpointError(StructuralError):
    """A checkpoint file is corrupt, truncated, or inconsistent."""


class NumericError(ArithmeticError):
    """A committed value became non-finite.

    Carries the layer name and flat element index when known.
    """

    def __init__(self, message, layer_name=None, index=None):
        super().__init__(message)
        self.layer_name = layer_name
        self.index = index


class StateError(RuntimeError):
    """An operation was called outside its legal state-machine sequence."""


class StepAborted(RuntimeError):
    """A step saw a non-finite loss and was rolled back via seed replay."""

    def __init__(self, message, step_seed=None):
        super().__init__(message)
        self.step_seed = step_seed


class DivergenceError(RuntimeError):
    """An optimizer run blew up (loss grew past the divergence guard)."""


class CostGuardError(RuntimeError):
    """A brute-force oracle was asked to do more work than its guard allows."""
