"""Independent ground-truth machinery.

Everything here is allowed to copy freely and is kept structurally
independent of the in-place steppers: the reference step materializes real
parameter copies and full masks from the pristine starting values, so a bug
in the seed-replay cycle or its mask freezing shows up as a record mismatch.
The reference's elementwise arithmetic intentionally mirrors the cycle's
operation order (delta = eps * (m . z); minus side = plus side - 2 * delta)
so that correct implementations agree bitwise, not just approximately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import alloc
from .errors import CostGuardError, DivergenceError
from .noise import derive_substream
from .tensors import ParameterSet, values_provider
from .zo import ZoStepRecord, projected_gradient

FD_COST_GUARD = 10**5
REFERENCE_MEMORY_GUARD = 10**6


@dataclass
class FdSpec:
    """Central-difference step; f64 is forced for the oracle arithmetic."""

    delta: float = 1e-5

    def __post_init__(self):
        if self.delta <= 0.0:
            raise ValueError("delta must be > 0")


def fd_gradient(loss_fn, p, spec=None):
    """Coordinate-wise central differences (L(x+d e_i) - L(x-d e_i)) / 2d.

    Works on an f64 copy; `loss_fn(provider) -> float`. Guarded to 1e5
    parameters because the cost is two loss evaluations per coordinate.
    """
    spec = spec or FdSpec()
    if p.total_params > FD_COST_GUARD:
        raise CostGuardError(
            f"{p.total_params} parameters exceed the {FD_COST_GUARD} guard"
        )
    work = p.astype(np.float64)
    provider = values_provider(work)
    grad = np.empty(work.total_params, dtype=np.float64)
    pos = 0
    for tensor in work.layers:
        flat = tensor.flat
        for i in range(tensor.size):
            orig = flat[i]
            flat[i] = orig + spec.delta
            loss_plus = float(loss_fn(provider))
            flat[i] = orig - spec.delta
            loss_minus = float(loss_fn(provider))
            flat[i] = orig
            if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
                raise ArithmeticError(
                    f"non-finite loss while probing layer {tensor.name!r} "
                    f"element {i}"
                )
            grad[pos] = (loss_plus - loss_minus) / (2.0 * spec.delta)
            pos += 1
    return grad


def mc_zo_mean(loss_fn, p, eps, masker, n_samples, seed, step_seed=0,
               chunk=2048):
    """Monte-Carlo mean of the two-point estimate over fresh noise draws.

    The mask is frozen at the given parameters (and step seed, for the
    random policy) across all samples. Noise comes from numpy's own
    generator, independent of the package's replay streams. Returns
    (mean, standard_error, n_discarded) with per-coordinate values in flat
    order. Non-finite samples are discarded and counted; more than 1%
    discards aborts, since silent censoring would bias the mean.
    """
    if n_samples < 10**3:
        raise ValueError("need at least 1e3 samples for a meaningful mean")
    work = p.astype(np.float64)
    total = work.total_params
    mask_flat = np.ones(total, dtype=np.float64)
    offset = 0
    for tensor in work.layers:
        m = masker.layer_mask(tensor, step_seed=step_seed,
                              base_values=tensor.values)
        if m is not None:
            mask_flat[offset : offset + tensor.size] = m.reshape(-1)
        offset += tensor.size

    theta = work.flat_values()
    provider = values_provider(work)

    def write(values):
        pos = 0
        for tensor in work.layers:
            tensor.flat[:] = values[pos : pos + tensor.size]
            pos += tensor.size

    rng = np.random.default_rng(seed)
    total_sum = np.zeros(total)
    total_sq = np.zeros(total)
    kept = 0
    discarded = 0
    remaining = n_samples
    while remaining > 0:
        block = min(chunk, remaining)
        remaining -= block
        Z = rng.standard_normal((block, total))
        for row in range(block):
            z_hat = mask_flat * Z[row]
            write(theta + eps * z_hat)
            loss_plus = float(loss_fn(provider))
            write(theta - eps * z_hat)
            loss_minus = float(loss_fn(provider))
            if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
                discarded += 1
                continue
            g = projected_gradient(loss_plus, loss_minus, eps) * z_hat
            total_sum += g
            total_sq += g * g
            kept += 1
    write(theta)
    if discarded > 0.01 * n_samples:
        raise ArithmeticError(
            f"{discarded} of {n_samples} samples discarded (> 1%); "
            "the averaged estimate would be censored"
        )
    mean = total_sum / kept
    var = np.maximum(total_sq / kept - mean * mean, 0.0)
    se = np.sqrt(var / kept)
    return mean, se, discarded


def reference_spsa_step(loss_fn, p, eps, lr, step_seed, masker):
    """Naive two-copy step: materialize both perturbed parameter sets.

    Masks and noise are materialized up front from the pristine input, so
    nothing here depends on cycle phases or replay bookkeeping. Returns
    (updated copy, record); the input set is never modified.
    """
    from .tensors import LayerTensor

    if p.total_params > REFERENCE_MEMORY_GUARD:
        raise CostGuardError(
            f"{p.total_params} parameters exceed the two-copy memory guard"
        )
    dtype = p.dtype
    masked_noise = []
    deltas = []
    copies = []
    deltas_released = False
    try:
        d_hat = 0
        for tensor in p.layers:
            z = derive_substream(step_seed, tensor.layer_id).gaussian(
                tensor.size, dtype=dtype
            )
            mask = masker.layer_mask(
                tensor, step_seed=step_seed, base_values=tensor.values
            )
            if mask is None:
                d_hat += tensor.size
            else:
                d_hat += int(mask.sum(dtype=np.int64))
                z = z * mask.reshape(-1).astype(dtype)
            alloc.register(z)
            masked_noise.append(z)

        for z in masked_noise:
            d = dtype.type(eps) * z
            alloc.register(d)
            deltas.append(d)
        for t, d in zip(p.layers, deltas):
            c = t.flat + d
            alloc.register(c)
            copies.append(c)
        perturbed = ParameterSet(
            LayerTensor(t.layer_id, t.name, c.reshape(t.shape))
            for t, c in zip(p.layers, copies)
        )
        loss_plus = float(loss_fn(values_provider(perturbed)))
        # Overwrite the copy in place: (base + d) - 2d, doubling is exact.
        for c, d in zip(copies, deltas):
            np.multiply(d, dtype.type(-2.0), out=d)
            np.add(c, d, out=c)
        loss_minus = float(loss_fn(values_provider(perturbed)))
        for d in deltas:
            alloc.unregister(d)
        deltas_released = True
        proj = projected_gradient(loss_plus, loss_minus, eps)

        # Reuse the copy buffers for the committed result.
        coef = dtype.type(-(lr * proj))
        for t, c, z in zip(p.layers, copies, masked_noise):
            np.multiply(z, coef, out=z)
            np.add(t.flat, z, out=c)
        updated = ParameterSet(
            LayerTensor(t.layer_id, t.name, c.reshape(t.shape))
            for t, c in zip(p.layers, copies)
        )
    finally:
        for z in masked_noise:
            alloc.unregister(z)
        if not deltas_released:
            for d in deltas:
                alloc.unregister(d)
        for c in copies:
            alloc.unregister(c)

    record = ZoStepRecord(
        t=-1,
        step_seed=step_seed,
        loss_plus=loss_plus,
        loss_minus=loss_minus,
        proj_grad=proj,
        d_hat=d_hat,
        lr=lr,
    )
    return updated, record


def first_order_baseline(task, p, lr, steps, divergence_factor=10.0):
    """Plain full-batch gradient descent on the task's analytic gradient.

    Returns (trained copy, loss curve including the initial loss). Raises
    DivergenceError when the loss grows past divergence_factor times the
    initial loss.
    """
    work = p.copy()
    losses = [task.loss_at(work)]
    guard = divergence_factor * abs(losses[0]) if losses[0] != 0.0 else np.inf
    for t in range(steps):
        grad = task.analytic_grad(work)
        pos = 0
        for tensor in work.layers:
            chunk = grad[pos : pos + tensor.size].astype(tensor.values.dtype)
            tensor.flat[:] = tensor.flat - tensor.values.dtype.type(lr) * chunk
            pos += tensor.size
        loss = task.loss_at(work)
        losses.append(loss)
        if not np.isfinite(loss) or (loss > guard and loss > losses[0]):
            raise DivergenceError(
                f"first-order baseline diverged at step {t}: loss {loss!r} "
                f"vs initial {losses[0]!r} (lr={lr!r})"
            )
    return work, losses
