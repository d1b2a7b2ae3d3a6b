import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embracenet.errors import ConfigurationError, InputError
from embracenet.fusion import (
    SENSORS,
    check_partition,
    early_fuse,
    embrace_backward,
    embrace_forward,
    expected_fusion,
    intermediate_fuse,
    late_fuse,
    sample_masks,
)


def test_degenerate_probabilities_select_first_modality():
    masks = sample_masks([1.0, 0.0], (5, 256), np.random.default_rng(0))
    assert (masks[0] == 1).all() and (masks[1] == 0).all()


def test_uniform_seven_modalities_partition():
    masks = sample_masks(np.full(7, 1 / 7), (5, 256), np.random.default_rng(1))
    assert masks.shape == (7, 5, 256)
    assert check_partition(masks)


def test_selection_frequencies_match_probabilities():
    p = np.array([0.5, 0.3, 0.2])
    masks = sample_masks(p, (100_000,), np.random.default_rng(2))
    freq = masks.mean(axis=1)
    assert np.abs(freq - p).max() < 0.01


def test_zero_probability_modality_never_selected():
    masks = sample_masks([0.5, 0.0, 0.5], (10_000,), np.random.default_rng(3))
    assert masks[1].sum() == 0 and check_partition(masks)


@pytest.mark.parametrize("p", [[0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0], []])
def test_invalid_probabilities_rejected(p):
    with pytest.raises(ConfigurationError):
        sample_masks(p, (2, 2), np.random.default_rng(0))


def test_identical_features_pass_through():
    rng = np.random.default_rng(4)
    d = np.repeat(rng.standard_normal((1, 5, 8)), 3, axis=0)
    masks = sample_masks(np.full(3, 1 / 3), (5, 8), rng)
    np.testing.assert_array_equal(embrace_forward(d, masks), d[0])


def test_one_hot_probabilities_copy_the_modality_bit_exactly():
    rng = np.random.default_rng(5)
    d = rng.standard_normal((2, 5, 8))
    masks = sample_masks([1.0, 0.0], (5, 8), rng)
    out = embrace_forward(d, masks)
    assert np.array_equal(out, d[0])


def test_mean_over_draws_converges_to_expectation():
    d = np.stack([np.ones((5, 16)), np.zeros((5, 16))])
    rng = np.random.default_rng(6)
    acc = np.zeros((5, 16))
    for _ in range(10_000):
        acc += embrace_forward(d, sample_masks([0.5, 0.5], (5, 16), rng))
    assert abs((acc / 10_000).mean() - 0.5) < 0.02


def test_standard_error_shrinks_like_inverse_sqrt_n():
    rng = np.random.default_rng(7)
    d = rng.standard_normal((4, 5, 32))
    target = d.mean(axis=0)
    errs = {}
    for n in (100, 10_000):
        acc = np.zeros((5, 32))
        for _ in range(n):
            acc += embrace_forward(d, sample_masks(np.full(4, 0.25), (5, 32), rng))
        errs[n] = np.sqrt(((acc / n - target) ** 2).mean())
    # 100x more draws -> ~10x smaller error
    assert 5 < errs[100] / errs[10_000] < 20


def test_backward_examples():
    rng = np.random.default_rng(8)
    masks = sample_masks(np.full(3, 1 / 3), (5, 4), rng)
    assert not embrace_backward(np.zeros((5, 4)), masks).any()
    g = rng.standard_normal((5, 4))
    onehot = sample_masks([1.0, 0.0, 0.0], (5, 4), rng)
    gd = embrace_backward(g, onehot)
    np.testing.assert_array_equal(gd[0], g)
    assert not gd[1:].any()
    np.testing.assert_array_equal(embrace_backward(g, masks).sum(axis=0), g)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_frozen_mask_fusion_is_linear_jvp(seed):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((2, 3, 5, 4))
    v = rng.standard_normal(d.shape)
    masks = np.stack([sample_masks(np.full(3, 1 / 3), (5, 4), rng) for _ in range(2)])
    probe = rng.standard_normal((2, 5, 4))
    h = 1e-6
    fd = ((embrace_forward(d + h * v, masks) - embrace_forward(d - h * v, masks)) * probe).sum() / (2 * h)
    analytic = (embrace_backward(probe, masks) * v).sum()
    assert abs(fd - analytic) < 1e-8 * max(1.0, abs(analytic))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 7))
def test_partition_holds_for_random_probabilities(seed, m):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(m))
    p = p / p.sum()
    if abs(p.sum() - 1) > 1e-12:
        return
    assert check_partition(sample_masks(p, (5, 64), rng))


def test_expected_fusion_is_weighted_sum():
    d = np.stack([np.ones((5, 2)), 3 * np.ones((5, 2))])
    np.testing.assert_allclose(expected_fusion(d, [0.25, 0.75]), 2.5 * np.ones((5, 2)))


# -- baselines ------------------------------------------------------------


def _standard_sample(rng):
    from embracenet.fusion import CHANNELS

    return {name: rng.standard_normal((500, CHANNELS[name])) for name in SENSORS}


def test_early_fusion_concatenates_twenty_channels_in_sensor_order():
    sample = _standard_sample(np.random.default_rng(9))
    fused = early_fuse(sample)
    assert fused.shape == (500, 20)
    np.testing.assert_array_equal(fused[:, 15:19], sample["orientation"])
    np.testing.assert_array_equal(fused[:, 19:], sample["pressure"])


def test_early_fusion_single_modality_and_constants():
    x = np.random.default_rng(10).standard_normal((500, 1))
    np.testing.assert_array_equal(early_fuse({"pressure": x}, order=["pressure"]), x)
    fused = early_fuse({"a": np.ones((500, 3)), "b": 2 * np.ones((500, 3))}, order=["a", "b"])
    assert (fused[:, :3] == 1).all() and (fused[:, 3:] == 2).all()


def test_early_fusion_missing_modality():
    sample = _standard_sample(np.random.default_rng(11))
    del sample["gyroscope"]
    with pytest.raises(InputError):
        early_fuse(sample)


def test_intermediate_fusion():
    rng = np.random.default_rng(12)
    feats = [rng.standard_normal((5, 256)) for _ in range(7)]
    assert intermediate_fuse(feats).shape == (5, 1792)
    np.testing.assert_array_equal(intermediate_fuse(feats[:1]), feats[0])
    a, b = rng.standard_normal((2, 5, 2))
    np.testing.assert_array_equal(intermediate_fuse([a, b]), np.hstack([a, b]))


def test_late_fusion():
    rng = np.random.default_rng(13)
    p = rng.dirichlet(np.ones(8), size=5)
    np.testing.assert_allclose(late_fuse([p, p, p]), p, atol=1e-16)
    a, b = np.eye(8)[[0]], np.eye(8)[[1]]
    np.testing.assert_array_equal(late_fuse([a, b])[0, :3], [0.5, 0.5, 0.0])
    many = [rng.dirichlet(np.ones(8), size=5) for _ in range(7)]
    assert np.abs(late_fuse(many).sum(axis=-1) - 1).max() <= 1e-12
    with pytest.raises(InputError):
        late_fuse([])
