import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fincast import tensor_core as tc
from fincast.input_block import (EPS_SIGMA, Series, apply_training_mask, embed_tokens,
                                 freq_to_index, instance_normalize, normalize_patches, patchify,
                                 patchify_batch, sample_prefix_lengths)
from fincast.model import FinCastModel, ModelConfig


def test_patchify_left_pads_first_patch():
    raw, mask = patchify(np.arange(1, 41, dtype=float), 16)
    assert raw.shape == (3, 16)             # ceil(40 / 16)
    assert mask[0, :8].all() and not mask[0, 8:].any() and not mask[1:].any()
    assert raw[0, 8] == 1.0 and raw[-1, -1] == 40.0
    np.testing.assert_array_equal(raw[0, :8], 0.0)


def test_patchify_rejects_bad_input():
    with pytest.raises(ValueError):
        patchify(np.array([]), 4)
    with pytest.raises(ValueError):
        patchify(np.ones(5), 0)


def test_patchify_batch_matches_single():
    x = np.random.default_rng(0).normal(size=(3, 37))
    raw, mask = patchify_batch(x, 8)
    for i in range(3):
        r, m = patchify(x[i], 8)
        np.testing.assert_array_equal(raw[i], r)
        np.testing.assert_array_equal(mask[i], m)


def test_instance_normalize_oracle():
    out, mu, sigma, deg = instance_normalize(np.array([1.0, 2.0, 3.0, 4.0]))
    # [DERIVED] population std of 1..4 = sqrt(1.25)
    assert mu == 2.5
    assert sigma == pytest.approx(1.118033988749895, abs=1e-15)
    np.testing.assert_allclose(out, [-1.3416407864998738, -0.4472135954999579,
                                     0.4472135954999579, 1.3416407864998738], atol=1e-14)
    assert not deg


def test_masked_entries_ignored_and_zeroed():
    out, mu, sigma, _ = instance_normalize(np.array([100.0, 1.0, 3.0]), np.array([1.0, 0.0, 0.0]))
    assert mu == 2.0 and sigma == 1.0
    np.testing.assert_array_equal(out, [0.0, -1.0, 1.0])


def test_constant_and_all_masked_patches():
    out, mu, sigma, deg = instance_normalize(np.full(4, 7.0))
    assert (mu, sigma, deg) == (7.0, EPS_SIGMA, False)
    np.testing.assert_array_equal(out, 0.0)
    out, mu, sigma, deg = instance_normalize(np.ones(4), np.ones(4))
    assert (mu, sigma, deg) == (0.0, 1.0, True)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 24), st.floats(-1e4, 1e4), st.floats(1e-4, 1e3), st.integers(0, 2**31))
def test_round_trip_property(p, level, scale, seed):
    rng = np.random.default_rng(seed)
    raw = level + scale * rng.normal(size=(2, 3, p))
    mask = (rng.random((2, 3, p)) < 0.3).astype(float)
    b = normalize_patches(raw, mask, 0)
    back = b.patches * b.sigma[..., None] + b.mu[..., None]
    obs = mask == 0
    assert np.max(np.abs(back[obs] - raw[obs]), initial=0.0) <= 1e-12 * max(1.0, abs(level) + scale)


def test_prefix_length_mean_and_cap():
    rng = np.random.default_rng(0)
    lengths = sample_prefix_lengths(200_000, 100, 0.15, rng)
    assert lengths.max() <= 99 and lengths.min() >= 0
    assert abs(lengths.mean() - 15.0) < 0.1
    assert np.all(sample_prefix_lengths(10, 1, 0.15, rng) == 0)
    with pytest.raises(ValueError):
        sample_prefix_lengths(1, 10, 1.0, rng)


def test_training_mask_extends_padding_prefix():
    rng = np.random.default_rng(1)
    _, pad = patchify_batch(np.ones((500, 40)), 16)
    m = apply_training_mask(pad, 0.15, rng)
    flat = m.reshape(500, -1)
    assert np.all(flat[:, :8] == 1)                  # padding stays masked
    assert np.all(flat[:, -1] == 0)                  # last point always observed
    # prefix shape: once observed, never masked again
    assert np.all(np.diff(flat, axis=1) <= 0)
    assert abs((flat[:, 8:].sum(1)).mean() - 0.15 * 40) < 0.5


def test_freq_aliases_and_errors():
    assert freq_to_index("daily") == freq_to_index("D") == 3
    assert freq_to_index(5) == 5
    with pytest.raises(ValueError):
        freq_to_index("fortnightly")


def test_series_validation():
    with pytest.raises(ValueError):
        Series(np.ones((2, 2)))
    s = Series(np.arange(5.0), freq_index=2)
    assert len(s) == 5


def test_embedding_rejects_out_of_range_freq():
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, expert_hidden=8, patch_len=4, horizon_len=4)
    m = FinCastModel(cfg)
    raw, mask = patchify_batch(np.ones((1, 8)), 4)
    with pytest.raises(ValueError, match="freq_index 8"):
        embed_tokens(normalize_patches(raw, mask, 8), m.params)


def test_frequency_embedding_added_to_every_token():
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, expert_hidden=8, patch_len=4, horizon_len=4)
    m = FinCastModel(cfg)
    raw, mask = patchify_batch(np.random.default_rng(0).normal(size=(1, 12)), 4)
    a = embed_tokens(normalize_patches(raw, mask, 1), m.params).data
    b = embed_tokens(normalize_patches(raw, mask, 4), m.params).data
    c = embed_tokens(normalize_patches(raw, mask, 4), m.params, use_freq=False).data
    table = m.params["input.freq_table"].data
    np.testing.assert_allclose(a - b, np.broadcast_to(table[1] - table[4], a.shape), atol=1e-14)
    np.testing.assert_allclose(b - c, np.broadcast_to(table[4], b.shape), atol=1e-14)


def test_mask_is_visible_to_embedding():
    # a true zero and a masked slot must embed differently
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, expert_hidden=8, patch_len=4, horizon_len=4)
    m = FinCastModel(cfg)
    raw = np.array([[[0.0, 1.0, -1.0, 0.0]]])
    masked = normalize_patches(raw, np.array([[[1.0, 0, 0, 0]]]), 0)
    open_ = normalize_patches(raw, np.zeros((1, 1, 4)), 0)
    with tc.no_grad():
        assert not np.allclose(embed_tokens(masked, m.params).data, embed_tokens(open_, m.params).data)


def test_patch_count_formula():
    for length in (1, 15, 16, 17, 512):
        raw, _ = patchify(np.ones(length), 16)
        assert raw.shape[0] == math.ceil(length / 16)
