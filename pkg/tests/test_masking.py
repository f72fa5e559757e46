import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from mage.masking import (MASK_ID, MaskPlan, MaskRatioDist, PlanBatch, apply_mask, build_mask_plan,
                          sample_ratio, zero_plan)
from mage.numerics import RngStream


class TestSampleRatio:
    def test_degenerate(self):
        d = MaskRatioDist(mode=0.55, std=0.0)
        assert all(sample_ratio(d, RngStream(i)) == 0.55 for i in range(20))

    def test_closed_form_mean(self):
        assert MaskRatioDist().mean() == pytest.approx(0.6936, abs=5e-5)

    def test_bounds(self):
        r = sample_ratio(MaskRatioDist(), RngStream(0), 10 ** 6)
        assert r.min() >= 0.5 and r.max() <= 1.0

    def test_matches_truncnorm(self):
        r = sample_ratio(MaskRatioDist(), RngStream(1), 20000)
        ref = stats.truncnorm(-0.2, 1.8, loc=0.55, scale=0.25)
        assert stats.kstest(r, ref.cdf).pvalue > 1e-3

    def test_invalid(self):
        with pytest.raises(ValueError):
            MaskRatioDist(mode=0.4, min=0.5)
        with pytest.raises(ValueError):
            MaskRatioDist(std=-1)


class TestBuildPlan:
    @pytest.mark.parametrize("l, r, masked, dropped", [
        (256, 0.75, 192, 128), (256, 0.5, 128, 128), (64, 1.0, 64, 32), (5, 0.5, 3, 2), (7, 0.9, 7, 3),
    ])
    def test_counts(self, l, r, masked, dropped):
        p = build_mask_plan(l, r, RngStream(0))
        assert (p.num_masked, p.num_dropped) == (masked, dropped)
        assert p.kept_order.size == l - dropped

    def test_half_ratio_has_no_mask_tokens(self):
        p = build_mask_plan(256, 0.5, RngStream(3))
        enc = apply_mask(torch.arange(256), p)
        assert not enc.is_mask.any() and enc.positions.shape[1] == 128

    def test_full_mask_encoder_sees_only_mask_tokens(self):
        p = build_mask_plan(64, 1.0, RngStream(3))
        enc = apply_mask(torch.arange(64), p)
        assert enc.is_mask.all() and enc.positions.shape[1] == 32

    def test_rejects_low_ratio(self):
        with pytest.raises(ValueError):
            build_mask_plan(16, 0.49, RngStream(0))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 300), st.floats(0.5, 1.0), st.integers(0, 2 ** 32))
    def test_invariants(self, l, r, seed):
        p = build_mask_plan(l, r, RngStream(seed))
        assert not (p.dropped & ~p.masked).any()
        assert p.num_masked == min(l, math.ceil(r * l - 1e-9))
        assert p.num_dropped == l // 2 <= p.num_masked
        assert np.array_equal(p.kept_order, np.flatnonzero(~p.dropped))

    def test_masked_marginals_uniform(self):
        l, r = 32, 0.75
        counts = np.zeros(l)
        for i in range(10_000):
            counts += build_mask_plan(l, r, RngStream(i)).masked
        assert stats.chisquare(counts).pvalue > 1e-3
        expected = 10_000 * 24 / 32
        sd = math.sqrt(10_000 * 0.75 * 0.25)
        assert np.all(np.abs(counts - expected) < 4 * sd)

    def test_fixed_ratio_fixed_count(self):
        d = MaskRatioDist(0.6, 0.0)
        sizes = {build_mask_plan(50, sample_ratio(d, RngStream(i)), RngStream(i)).num_masked for i in range(50)}
        assert sizes == {30}

    def test_deterministic(self):
        a = build_mask_plan(64, 0.8, RngStream(5))
        b = build_mask_plan(64, 0.8, RngStream(5))
        assert np.array_equal(a.masked, b.masked) and np.array_equal(a.dropped, b.dropped)


class TestApplyMask:
    def test_zero_plan_is_identity(self):
        toks = torch.tensor([5, 3, 9, 1])
        enc = apply_mask(toks, zero_plan(4))
        assert enc.tokens[0].tolist() == [5, 3, 9, 1]
        assert enc.positions[0].tolist() == [0, 1, 2, 3]

    def test_enumerated(self):
        plan = MaskPlan.from_indices(4, masked=[1, 2], dropped=[2])
        enc = apply_mask(torch.tensor([7, 8, 9, 10]), plan)
        assert enc.positions[0].tolist() == [0, 1, 3]
        assert enc.tokens[0].tolist() == [7, MASK_ID, 10]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 64), st.floats(0.5, 1.0), st.integers(0, 2 ** 32))
    def test_partition(self, l, r, seed):
        toks = torch.from_numpy(RngStream(seed).numpy().integers(0, 10, l))
        p = build_mask_plan(l, r, RngStream(seed + 1))
        enc = apply_mask(toks, p)
        visible = toks[enc.positions[0]]
        dropped = toks[torch.from_numpy(p.dropped)]
        assert Counter(visible.tolist()) + Counter(dropped.tolist()) == Counter(toks.tolist())
        assert enc.positions[0].tolist() == sorted(enc.positions[0].tolist())

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            apply_mask(torch.arange(5), zero_plan(4))

    def test_batch_requires_equal_lengths(self):
        with pytest.raises(ValueError):
            PlanBatch.stack([zero_plan(4), zero_plan(5)])

    def test_features_gathered(self):
        feats = torch.randn(1, 4, 3)
        plan = MaskPlan.from_indices(4, masked=[0, 3], dropped=[3])
        enc = apply_mask(feats, PlanBatch.stack([plan]))
        assert torch.equal(enc.features[0], feats[0, :3])
        assert enc.is_mask[0].tolist() == [True, False, False]
