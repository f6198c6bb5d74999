"""Dense and sparse seed-replay zeroth-order steppers.

One optimization step estimates a directional derivative from two loss
values at theta +/- eps * (m . z), with z replayed from the step seed
instead of stored, then commits theta <- theta - lr * proj_grad * (m . z).

Two loss-evaluation paths exist and produce bit-identical step records:

* the in-place cycle mutates the parameters through +eps, -2eps, +eps and
  restores them up to roundoff (never holding a second copy);
* the fused path never mutates the parameters at all: each layer's
  perturbed values are built in a per-layer scratch buffer during the
  forward pass. Its minus side mirrors the cycle arithmetic,
  (base + d) - 2d with d = eps * (m . z), so both paths round identically.

Within one step every phase and the final update must use the same mask.
Masks that replay from seed (random) or storage (constant) need no state;
the magnitude-dynamic mask is evaluated against the parameter values as
they stand at the +eps phase -- the step's starting point -- and the cycle
carries those per-layer masks to the later phases, because once the values
are perturbed the original predicate can no longer be reconstructed from
them.

One stepper owns one parameter set and steps are strictly sequential;
independent runs on disjoint sets may execute concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import alloc
from .errors import NumericError, StateError, StepAborted
from .masking import MaskPolicy
from .noise import derive_substream, schedule_seed
from .tensors import values_provider

_UNSET = object()  # cache sentinel; None is a valid mask (always-dense layer)


@dataclass
class ZoConfig:
    """Stepper hyperparameters."""

    epsilon: float = 1e-3
    lr: float = 1e-6
    policy: MaskPolicy = MaskPolicy("dense")
    base_seed: int = 0
    steps: int = 1
    lr_schedule: str = "constant"  # constant | theory
    smoothness: float | None = None  # required by the theory schedule

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be > 0")
        if self.lr_schedule not in ("constant", "theory"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.lr_schedule == "constant" and self.lr <= 0.0:
            raise ValueError("lr must be > 0")
        if self.lr_schedule == "theory" and (
            self.smoothness is None or self.smoothness <= 0.0
        ):
            raise ValueError("theory lr schedule needs a positive smoothness bound")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class ZoStepRecord:
    """Everything one step committed; proj_grad == (l+ - l-) / (2 eps)."""

    t: int
    step_seed: int
    loss_plus: float
    loss_minus: float
    proj_grad: float
    d_hat: int
    lr: float
    wallclock_us: int = 0


def theory_lr(d_hat, smoothness):
    """Convergence-theory step size 1 / (4 (d_hat + 4) L)."""
    if smoothness <= 0.0:
        raise ValueError("smoothness bound must be > 0")
    if d_hat < 0:
        raise ValueError("d_hat must be >= 0")
    return 1.0 / (4.0 * (d_hat + 4.0) * smoothness)


def theory_step_bound(d_hat, smoothness, sigma_sq):
    """Order-of-magnitude step count d_hat * L / sigma^2 (constant fixed at 1)."""
    if d_hat < 0:
        raise ValueError("d_hat must be >= 0")
    if smoothness <= 0.0:
        raise ValueError("smoothness bound must be > 0")
    if sigma_sq <= 0.0:
        raise ValueError("sigma_sq must be > 0")
    return d_hat * smoothness / sigma_sq


def projected_gradient(loss_plus, loss_minus, eps):
    return (loss_plus - loss_minus) / (2.0 * eps)


def _apply_masked_noise(layer, scale, step_seed, mask, check=True, meter_mask=False):
    """values += scale * (mask . z) with z replayed for this layer.

    The layer commits atomically: with checking on, the sum lands in a
    scratch buffer and is validated before being copied over the values.
    The mask buffer overlaps only the noise buffer, never the scratch one.
    """
    dtype = layer.values.dtype
    stream = derive_substream(step_seed, layer.layer_id)
    z = stream.gaussian(layer.size, dtype=dtype)
    with alloc.tracked(z):
        if mask is not None:
            flat_mask = mask.reshape(-1)
            if meter_mask:
                with alloc.tracked(mask):
                    np.multiply(z, flat_mask, out=z, casting="unsafe")
            else:
                np.multiply(z, flat_mask, out=z, casting="unsafe")
        np.multiply(z, dtype.type(scale), out=z)
        flat = layer.flat
        if not check:
            np.add(flat, z, out=flat)
            return
        with alloc.scratch(layer.size, dtype) as tmp:
            np.add(flat, z, out=tmp)
            finite = np.isfinite(tmp)
            if not finite.all():
                idx = int(np.argmin(finite))
                raise NumericError(
                    f"non-finite parameter in layer {layer.name!r} at flat "
                    f"index {idx} after perturbation",
                    layer_name=layer.name,
                    index=idx,
                )
            flat[:] = tmp


class PerturbCycle:
    """State machine for one step's +eps, -2eps, +eps perturbation cycle.

    Enforces the legal scale sequence, tallies d_hat at the first phase, and
    owns the step's frozen masks for the magnitude-dynamic policy. Call
    `close()` when the step is done (or `unwind()` to abort mid-cycle).
    """

    def __init__(self, p, eps, step_seed, masker):
        if eps <= 0.0:
            raise ValueError("eps must be > 0")
        self.p = p
        self.eps = float(eps)
        self.step_seed = step_seed
        self.masker = masker
        self.d_hat = None
        self._applied = 0
        self._masks = None  # per-layer cache, magnitude-dynamic only

    # -- mask handling -------------------------------------------------------

    def _mask_for(self, layer):
        """The step's mask for one layer, frozen on the starting values."""
        if not self.masker.dynamic:
            return self.masker.layer_mask(layer, step_seed=self.step_seed)
        if self._masks is None:
            self._masks = [_UNSET] * len(self.p.layers)
        cached = self._masks[layer.layer_id]
        if cached is _UNSET:
            if self._applied > 0:
                raise StateError(
                    "magnitude-dynamic mask missing: the +eps phase must run first"
                )
            # Values here are still the step's starting point.
            cached = self.masker.layer_mask(layer, base_values=layer.values)
            if cached is not None:
                alloc.register(cached)
            self._masks[layer.layer_id] = cached
        return cached

    @property
    def frozen_masks(self):
        """Per-layer masks for the update (None entries mean always-dense)."""
        if self._masks is None:
            return None
        return [m if m is not _UNSET else None for m in self._masks]

    # -- phases ----------------------------------------------------------------

    def scale_for_phase(self, phase_index):
        return (self.eps, -2.0 * self.eps, self.eps)[phase_index]

    def perturb(self, scale):
        """Apply one phase; `scale` must follow the +eps, -2eps, +eps sequence."""
        if self._applied >= 3:
            raise StateError("perturbation cycle already complete")
        expected = self.scale_for_phase(self._applied)
        if scale != expected:
            raise StateError(
                f"illegal cycle scale {scale!r} at phase {self._applied} "
                f"(expected {expected!r})"
            )
        tally = self._applied == 0
        d_hat = 0
        done = 0
        try:
            for layer in self.p.layers:
                mask = self._mask_for(layer)
                if tally:
                    d_hat += (
                        layer.size if mask is None else int(mask.sum(dtype=np.int64))
                    )
                _apply_masked_noise(layer, scale, self.step_seed, mask)
                done += 1
        except Exception:
            # Failing layer never committed; undo the ones that did.
            for layer in self.p.layers[:done]:
                mask = self._mask_for(layer)
                _apply_masked_noise(layer, -scale, self.step_seed, mask, check=False)
            raise
        if tally:
            self.d_hat = d_hat
        self._applied += 1
        return self.d_hat

    @property
    def restored(self):
        return self._applied in (0, 3)

    def unwind(self):
        """Undo whatever phases were applied, via seed replay (abort path)."""
        while self._applied > 0:
            self._applied -= 1
            scale = self.scale_for_phase(self._applied)
            for layer in self.p.layers:
                mask = self._mask_for(layer)
                _apply_masked_noise(layer, -scale, self.step_seed, mask, check=False)
        self.close()

    def close(self):
        if self._masks is not None:
            for mask in self._masks:
                if mask is not None and mask is not _UNSET:
                    alloc.unregister(mask)
        self._masks = None


def perturb_parameters(p, scale, step_seed, masker, cycle=None):
    """One phase of the perturbation cycle; returns the (possibly new) cycle.

    The first call (scale = +eps) creates the cycle; later phases must pass
    the same cycle back in, and out-of-sequence scales raise StateError.
    The running d_hat is available as cycle.d_hat.
    """
    if cycle is None:
        if scale <= 0.0:
            raise StateError("a cycle must open with the +eps phase")
        cycle = PerturbCycle(p, scale, step_seed, masker)
    cycle.perturb(scale)
    return cycle


class FusedPerturbedProvider:
    """Serves perturbed layer values on the fly; the backing set is untouched.

    Layers must be consumed strictly in ascending order, each exactly once.
    Peak auxiliary allocation is one value-sized noise buffer plus one
    value-sized output buffer per layer; the mask buffer overlaps only the
    noise buffer.
    """

    def __init__(self, p, side, eps, step_seed, masker):
        if side not in (-1, 0, 1):
            raise ValueError("side must be -1, 0, or +1")
        self.p = p
        self.side = side
        self.eps = float(eps)
        self.step_seed = step_seed
        self.masker = masker
        self.d_hat = 0
        self._next = 0
        self._live = None

    def __call__(self, layer_id):
        if layer_id != self._next:
            raise StateError(
                f"fused forward requested layer {layer_id} but expected "
                f"{self._next}; models must consume layers in order"
            )
        self._release_live()
        layer = self.p.layers[layer_id]
        self._next += 1
        if self.side == 0:
            self.d_hat += layer.size
            return layer.values

        dtype = layer.values.dtype
        stream = derive_substream(self.step_seed, layer.layer_id)
        delta = stream.gaussian(layer.size, dtype=dtype)
        alloc.register(delta)
        try:
            mask = self.masker.layer_mask(
                layer, step_seed=self.step_seed, base_values=layer.values
            )
            if mask is None:
                self.d_hat += layer.size
            else:
                self.d_hat += int(mask.sum(dtype=np.int64))
                with alloc.tracked(mask):
                    np.multiply(delta, mask.reshape(-1), out=delta, casting="unsafe")
            np.multiply(delta, dtype.type(self.eps), out=delta)
            out = np.empty(layer.size, dtype=dtype)
            alloc.register(out)
            np.add(layer.flat, delta, out=out)
            if self.side < 0:
                # Mirror the in-place cycle: (base + d) - 2d, exact doubling.
                np.multiply(delta, dtype.type(-2.0), out=delta)
                np.add(out, delta, out=out)
        finally:
            alloc.unregister(delta)
        self._live = out
        return out.reshape(layer.shape)

    def _release_live(self):
        if self._live is not None:
            alloc.unregister(self._live)
            self._live = None

    def close(self):
        self._release_live()
        if self._next != len(self.p.layers):
            raise StateError(
                f"fused forward consumed {self._next} of {len(self.p.layers)} layers"
            )


def fused_forward_perturbed(loss_fn, p, scale, step_seed, masker):
    """Loss at theta + scale * (m . z) without materializing the perturbation.

    `scale` is +eps, -eps, or 0. Returns (loss, d_hat). Bit-identical to
    evaluating the loss after the corresponding in-place cycle phase.
    """
    if scale == 0.0:
        side, eps = 0, 1.0
    else:
        side = 1 if scale > 0 else -1
        eps = abs(scale)
    provider = FusedPerturbedProvider(p, side, eps, step_seed, masker)
    try:
        loss = float(loss_fn(provider))
    finally:
        provider.close()
    return loss, provider.d_hat


def spsa_estimate(loss_fn, p, eps, step_seed, masker, fused=False, cycle_cls=None):
    """Two-sided directional-derivative estimate along the masked noise.

    Returns (proj_grad, loss_plus, loss_minus, d_hat, cycle). The in-place
    path leaves p restored (up to roundoff) and hands back the finished
    cycle so the update can reuse its frozen masks; the fused path leaves p
    untouched and returns cycle=None. Non-finite losses roll back any
    applied perturbation and raise StepAborted.
    """
    if fused:
        loss_plus, d_hat = fused_forward_perturbed(loss_fn, p, eps, step_seed, masker)
        if not math.isfinite(loss_plus):
            raise StepAborted(
                f"non-finite loss {loss_plus!r} on +eps side", step_seed=step_seed
            )
        loss_minus, _ = fused_forward_perturbed(loss_fn, p, -eps, step_seed, masker)
        if not math.isfinite(loss_minus):
            raise StepAborted(
                f"non-finite loss {loss_minus!r} on -eps side", step_seed=step_seed
            )
        proj = projected_gradient(loss_plus, loss_minus, eps)
        return proj, loss_plus, loss_minus, d_hat, None

    cls = cycle_cls or PerturbCycle
    cycle = cls(p, eps, step_seed, masker)
    provider = values_provider(p)
    try:
        cycle.perturb(eps)
        loss_plus = float(loss_fn(provider))
        if not math.isfinite(loss_plus):
            raise StepAborted(
                f"non-finite loss {loss_plus!r} on +eps side", step_seed=step_seed
            )
        cycle.perturb(-2.0 * eps)
        loss_minus = float(loss_fn(provider))
        if not math.isfinite(loss_minus):
            raise StepAborted(
                f"non-finite loss {loss_minus!r} on -eps side", step_seed=step_seed
            )
        cycle.perturb(eps)  # restore
    except Exception:
        cycle.unwind()
        raise
    proj = projected_gradient(loss_plus, loss_minus, eps)
    return proj, loss_plus, loss_minus, cycle.d_hat, cycle


def apply_update(p, proj_grad, lr, step_seed, masker, masks=None):
    """Commit theta_i <- theta_i - lr * proj_grad * m_i * z_i (z replayed).

    `masks` should be the estimating cycle's frozen masks so the update uses
    bit-identical selections; stateless policies replay theirs from seed.
    """
    coef = -(lr * proj_grad)
    for layer in p.layers:
        cached = masks[layer.layer_id] if masks is not None else None
        if cached is not None:
            _apply_masked_noise(layer, coef, step_seed, cached)
        else:
            mask = masker.layer_mask(
                layer, step_seed=step_seed, base_values=layer.values
            )
            _apply_masked_noise(layer, coef, step_seed, mask, meter_mask=True)


def step(loss_fn, p, cfg, t, masker, fused=False, cycle_cls=None):
    """One full optimization step; returns its record.

    `loss_fn(provider) -> float` must already be bound to the step's
    minibatch (both loss evaluations use the same batch). On a non-finite
    loss the step rolls the parameters back and raises StepAborted.
    """
    if t >= cfg.steps:
        raise ValueError(f"step index {t} out of range for {cfg.steps} steps")
    step_seed = schedule_seed(cfg.base_seed, t)
    proj, loss_plus, loss_minus, d_hat, cycle = spsa_estimate(
        loss_fn, p, cfg.epsilon, step_seed, masker, fused=fused, cycle_cls=cycle_cls
    )
    try:
        if cfg.lr_schedule == "theory":
            lr = theory_lr(d_hat, cfg.smoothness)
        else:
            lr = cfg.lr
        apply_update(
            p,
            proj,
            lr,
            step_seed,
            masker,
            masks=cycle.frozen_masks if cycle is not None else None,
        )
    finally:
        if cycle is not None:
            cycle.close()
    return ZoStepRecord(
        t=t,
        step_seed=step_seed,
        loss_plus=loss_plus,
        loss_minus=loss_minus,
        proj_grad=proj,
        d_hat=d_hat,
        lr=lr,
    )
