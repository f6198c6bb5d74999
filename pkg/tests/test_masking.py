import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsezo import (
    MaskPolicy,
    Masker,
    ParameterSet,
    calibrate_thresholds,
    count_selected,
    derive_substream,
    get_mask,
    random_mask,
)
from sparsezo.masking import save_thresholds


def params_with(values, name="w"):
    return ParameterSet.from_arrays([(name, np.asarray(values, dtype=np.float64))])


def test_quantile_example_half_sparsity():
    p = params_with([0.1, 0.2, 0.4, 0.9])
    tv = calibrate_thresholds(p, 0.5, MaskPolicy("magnitude-dynamic", 0.5))
    assert tv.threshold(0) == 0.2
    mask = get_mask(p.layers[0].values, tv.threshold(0))
    assert count_selected(mask) == 2


def test_quantile_example_signed_values():
    p = params_with([0.5, -0.2, 1.3, -0.8])
    tv = calibrate_thresholds(p, 0.5, MaskPolicy("magnitude-dynamic", 0.5))
    assert tv.threshold(0) == 0.5
    assert get_mask(p.layers[0].values, tv.threshold(0)).tolist() == [1, 1, 0, 0]


def test_zero_sparsity_selects_everything():
    values = [0.3, -1.5, 0.7]
    p = params_with(values)
    tv = calibrate_thresholds(p, 0.0, MaskPolicy("magnitude-dynamic", 0.0))
    assert tv.threshold(0) == 1.5
    assert get_mask(p.layers[0].values, tv.threshold(0)).tolist() == [1, 1, 1]


def test_get_mask_magnitude_rule():
    assert get_mask(np.array([0.5, -0.2, 1.3]), 0.6).tolist() == [1, 1, 0]


def test_get_mask_zero_threshold_selects_zeros():
    assert get_mask(np.array([0.0, 0.1, -0.0, 0.3]), 0.0).tolist() == [1, 0, 1, 0]


def test_get_mask_tie_included():
    assert get_mask(np.array([0.6]), 0.6).tolist() == [1]


def test_get_mask_large_side():
    values = np.array([0.5, -0.2, 1.3, -0.8])
    assert get_mask(values, 0.8, side="large").tolist() == [0, 0, 1, 1]


def test_get_mask_does_not_modify_input():
    values = np.array([0.5, -0.2])
    get_mask(values, 0.3)
    assert values.tolist() == [0.5, -0.2]


def test_infinite_threshold_selects_all_on_both_sides():
    values = np.array([0.5, -2.0])
    assert get_mask(values, np.inf).tolist() == [1, 1]
    assert get_mask(values, np.inf, side="large").tolist() == [1, 1]


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=32),
    st.floats(0, 50),
    st.floats(0, 50),
)
def test_mask_monotone_in_threshold(values, h1, h2):
    lo, hi = min(h1, h2), max(h1, h2)
    values = np.asarray(values)
    narrow = get_mask(values, lo)
    wide = get_mask(values, hi)
    assert np.all(narrow <= wide)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=16))
def test_get_mask_pure(values):
    values = np.asarray(values)
    assert np.array_equal(get_mask(values, 1.0), get_mask(values, 1.0))


def test_random_mask_zero_sparsity_all_ones():
    stream = derive_substream(1, 0)
    assert random_mask((10,), 0.0, stream).tolist() == [1] * 10


def test_random_mask_binomial_count():
    n = 10**6
    stream = derive_substream(3, 0)
    mask = random_mask((n,), 0.75, stream)
    ones = count_selected(mask)
    expect = 0.25 * n
    bound = 3 * np.sqrt(n * 0.25 * 0.75)
    assert abs(ones - expect) <= bound


def test_random_mask_replays():
    a = random_mask((1000,), 0.5, derive_substream(8, 1))
    b = random_mask((1000,), 0.5, derive_substream(8, 1))
    assert np.array_equal(a, b)


def test_count_selected_examples():
    assert count_selected(np.array([1, 1, 0, 0], dtype=np.uint8)) == 2
    assert count_selected(np.zeros(5, dtype=np.uint8)) == 0
    assert count_selected(np.ones(7, dtype=np.uint8)) == 7
    assert count_selected([np.ones(3, dtype=np.uint8),
                           np.zeros(2, dtype=np.uint8)]) == 3


def test_calibration_fraction_near_target():
    rng = np.random.default_rng(0)
    n = 4001
    p = params_with(rng.standard_normal(n))
    r = 0.75
    tv = calibrate_thresholds(p, r, MaskPolicy("magnitude-dynamic", r))
    frac = count_selected(get_mask(p.layers[0].values, tv.threshold(0))) / n
    assert (1 - r) - 2 / n <= frac <= (1 - r) + 2 / n


def test_default_filter_excludes_bias_and_norm():
    p = ParameterSet.from_arrays([
        ("fc0.weight", np.linspace(-1, 1, 12).reshape(3, 4)),
        ("fc0.bias", np.linspace(-1, 1, 3)),
        ("norm.gain", np.ones(4)),
    ])
    policy = MaskPolicy("magnitude-dynamic", 0.5)
    tv = calibrate_thresholds(p, 0.5, policy)
    assert np.isfinite(tv.threshold(0))
    assert np.isinf(tv.threshold(1))
    assert np.isinf(tv.threshold(2))


def test_maskable_override_pattern():
    p = ParameterSet.from_arrays([
        ("special", np.linspace(-1, 1, 8)),
        ("other", np.linspace(-1, 1, 8)),
    ])
    policy = MaskPolicy("magnitude-dynamic", 0.5, maskable="special")
    tv = calibrate_thresholds(p, 0.5, policy)
    assert np.isfinite(tv.threshold(0))
    assert np.isinf(tv.threshold(1))


def test_dense_policy_forces_zero_sparsity():
    with pytest.raises(ValueError):
        MaskPolicy("dense", 0.5)
    with pytest.raises(ValueError):
        MaskPolicy("magnitude-dynamic", 1.0)
    with pytest.raises(ValueError):
        MaskPolicy("nonsense")


def test_dense_masker_returns_none():
    p = params_with([1.0, 2.0])
    masker = Masker.for_params(p, MaskPolicy("dense"))
    assert masker.layer_mask(p.layers[0], step_seed=0) is None


def test_constant_masks_frozen_against_value_drift():
    p = params_with([0.1, 0.9, 0.2, 0.8])
    masker = Masker.for_params(p, MaskPolicy("magnitude-constant", 0.5))
    before = masker.layer_mask(p.layers[0]).copy()
    p.layers[0].values[:] = [0.9, 0.1, 0.8, 0.2]  # drift past the threshold
    after = masker.layer_mask(p.layers[0])
    assert np.array_equal(before, after)


def test_dynamic_masks_follow_value_drift():
    p = params_with([0.1, 0.9, 0.2, 0.8])
    masker = Masker.for_params(p, MaskPolicy("magnitude-dynamic", 0.5))
    assert masker.layer_mask(p.layers[0],
                             base_values=p.layers[0].values).tolist() == [1, 0, 1, 0]
    p.layers[0].values[:] = [0.9, 0.1, 0.8, 0.2]
    assert masker.layer_mask(p.layers[0],
                             base_values=p.layers[0].values).tolist() == [0, 1, 0, 1]


def test_threshold_audit_file(tmp_path):
    p = ParameterSet.from_arrays([
        ("fc0.weight", np.linspace(-1, 1, 6)),
        ("fc0.bias", np.ones(2)),
    ])
    masker = Masker.for_params(p, MaskPolicy("magnitude-dynamic", 0.5))
    out = tmp_path / "thresholds.txt"
    save_thresholds(masker.thresholds, p, out)
    lines = out.read_text().splitlines()
    assert any(line.startswith("fc0.weight = ") for line in lines)
    assert "fc0.bias = inf" in lines
