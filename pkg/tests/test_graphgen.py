"""Graph construction: spatial kernel, attention scores, gate fusion, and
case-amplification thresholding."""

import math

import numpy as np
import pytest

from bysgnn import autodiff as ad
from bysgnn.autodiff import ParamStore, Parameter, Tensor
from bysgnn.errors import ConfigurationError, SchemaError
from bysgnn.graphgen import (SpatialContext, TemporalAttention,
                             amplification_mask, amplify_threshold, fuse_gate,
                             pairwise_distances, read_labeled_matrix_csv,
                             spatial_similarity, write_labeled_matrix_csv)

from helpers import check_gradients


class TestSpatialKernel:
    def _ctx(self):
        # hand-placed distances with sigma and tau known exactly
        d = np.array([[0.0, 100.0, 3000.0],
                      [100.0, 0.0, 2000.0],
                      [3000.0, 2000.0, 0.0]])
        return SpatialContext.build(d)

    def test_zero_distance_gives_one(self):
        ctx = SpatialContext.build(np.zeros((1, 1)))
        sim = spatial_similarity(ctx, n_meta=0)
        assert sim[0, 0] == 1.0

    def test_cutoff_beyond_tau(self):
        ctx = self._ctx()
        sim = spatial_similarity(ctx, n_meta=0)
        d = ctx.distances
        for i in range(3):
            for j in range(3):
                if d[i, j] >= ctx.tau:
                    assert sim[i, j] == 0.0
                else:
                    assert sim[i, j] == pytest.approx(
                        math.exp(-(d[i, j] / ctx.sigma) ** 2), abs=1e-15)

    def test_kernel_at_sigma_is_exp_minus_one(self):
        sigma = 1000.0
        d = np.array([[0.0, sigma], [sigma, 0.0]])
        ctx = SpatialContext(distances=d, sigma=sigma, tau=2.0 * sigma)
        sim = spatial_similarity(ctx, n_meta=0)
        assert abs(sim[0, 1] - math.exp(-1.0)) <= 1e-12

    def test_entries_in_unit_interval(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 5000, size=(12, 2))
        d = np.hypot(pts[:, None, 0] - pts[None, :, 0],
                     pts[:, None, 1] - pts[None, :, 1])
        sim = spatial_similarity(SpatialContext.build(d), n_meta=0)
        assert np.all(sim >= 0.0) and np.all(sim <= 1.0)

    def test_meta_rows_and_columns_are_one(self):
        ctx = self._ctx()
        sim = spatial_similarity(ctx, n_meta=2)
        assert sim.shape == (5, 5)
        np.testing.assert_array_equal(sim[3:], np.ones((2, 5)))
        np.testing.assert_array_equal(sim[:, 3:], np.ones((5, 2)))

    def test_colocated_pois_flagged_and_all_ones(self):
        ctx = SpatialContext.build(np.zeros((4, 4)))
        assert ctx.degenerate and ctx.tau == 1.0
        sim = spatial_similarity(ctx, n_meta=1)
        np.testing.assert_array_equal(sim, np.ones((5, 5)))

    def test_tau_defaults_to_two_sigma(self):
        ctx = self._ctx()
        assert ctx.tau == pytest.approx(2.0 * ctx.sigma)

    def test_asymmetric_matrix_rejected(self):
        with pytest.raises(SchemaError):
            SpatialContext.build(np.array([[0.0, 1.0], [2.0, 0.0]]))

    def test_equirectangular_scale(self):
        # 0.01 degrees of latitude is ~1112 m
        d = pairwise_distances([29.75, 29.76], [-95.36, -95.36])
        assert d[0, 1] == pytest.approx(1112.0, rel=0.01)
        assert d[0, 0] == 0.0 and d[1, 0] == d[0, 1]


class TestTemporalAttention:
    def _attention(self, m=4, heads=2, seed=0):
        return TemporalAttention(ParamStore(), m, heads, np.random.default_rng(seed))

    def test_single_node_scores_one(self):
        attn = self._attention()
        c = Tensor(np.random.default_rng(1).standard_normal((1, 1, 4)))
        scores, _, _ = attn.forward(c)
        np.testing.assert_allclose(scores.data, [[[1.0]]], atol=1e-15)

    def test_rows_are_distributions(self):
        attn = self._attention(m=8, heads=4, seed=2)
        c = Tensor(np.random.default_rng(3).standard_normal((2, 5, 8)))
        scores, _, _ = attn.forward(c)
        np.testing.assert_allclose(scores.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(scores.data >= 0)

    def test_head_logits_match_loop_oracle(self):
        attn = self._attention(m=4, heads=2, seed=4)
        rng = np.random.default_rng(5)
        c = rng.standard_normal((1, 3, 4))
        _, _, logits = attn.forward(Tensor(c))
        wq, wk = attn.w_query.data, attn.w_key.data
        dh = attn.head_dim
        for head in range(2):
            q = c[0] @ wq[:, head * dh:(head + 1) * dh]
            k = c[0] @ wk[:, head * dh:(head + 1) * dh]
            want = np.zeros((3, 3))
            for i in range(3):
                for j in range(3):
                    want[i, j] = float(q[i] @ k[j]) / math.sqrt(4.0)
            assert np.max(np.abs(logits[0, head] - want)) <= 1e-10

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigurationError):
            self._attention(m=6, heads=4)

    def test_gradients(self):
        attn = self._attention(m=4, heads=2, seed=6)
        c = Parameter(np.random.default_rng(7).standard_normal((1, 3, 4)), "c")
        w = Tensor(np.random.default_rng(8).standard_normal((1, 3, 3)))

        def build():
            scores, _, _ = attn.forward(c)
            return (scores * w).sum()
        check_gradients(build, [c, attn.w_query, attn.w_key])


class TestGateFusion:
    def _parts(self, b=2, s=3, seed=0):
        rng = np.random.default_rng(seed)
        sem = Tensor(rng.uniform(-1, 1, (s, s)))
        spa = rng.uniform(0, 1, (s, s))
        scores = Tensor(rng.uniform(0, 1, (b, s, s)))
        return sem, spa, scores

    def test_alpha_zero_endpoint(self):
        sem, spa, scores = self._parts()
        alpha_raw = Parameter(np.array(-40.0), "alpha")  # sigmoid -> exactly 0
        fused = fuse_gate(sem, spa, scores, alpha_raw)
        np.testing.assert_array_equal(fused.data, sem.data[None] * scores.data)

    def test_alpha_one_endpoint(self):
        sem, spa, scores = self._parts(seed=1)
        alpha_raw = Parameter(np.array(40.0), "alpha")
        fused = fuse_gate(sem, spa, scores, alpha_raw)
        np.testing.assert_array_equal(fused.data, spa[None] * scores.data)

    def test_zero_spatial_entry_kills_edge_at_alpha_one(self):
        sem, spa, scores = self._parts(seed=2)
        spa[0, 1] = 0.0
        fused = fuse_gate(sem, spa, scores, Parameter(np.array(40.0), "alpha"))
        np.testing.assert_array_equal(fused.data[:, 0, 1], 0.0)

    def test_single_context_modes(self):
        sem, spa, scores = self._parts(seed=3)
        only_sem = fuse_gate(sem, None, scores, None)
        np.testing.assert_array_equal(only_sem.data, sem.data[None] * scores.data)
        only_spa = fuse_gate(None, spa, scores, None)
        np.testing.assert_array_equal(only_spa.data, spa[None] * scores.data)
        with pytest.raises(ConfigurationError):
            fuse_gate(None, None, scores, None)
        with pytest.raises(ConfigurationError):
            fuse_gate(sem, spa, scores, None)

    def test_gradient_reaches_alpha(self):
        sem, spa, scores = self._parts(seed=4)
        alpha_raw = Parameter(np.array(0.3), "alpha")
        check_gradients(lambda: (fuse_gate(sem, spa, scores, alpha_raw) ** 2.0).sum(),
                        [alpha_raw])


class TestAmplifyThreshold:
    def test_row_max_always_survives(self):
        rng = np.random.default_rng(0)
        values = rng.uniform(0.01, 1.0, (2, 4, 4))
        mask, zeroed = amplification_mask(values, power=2.5, keep_threshold=0.15)
        assert zeroed == 0
        argmax = values.argmax(axis=-1)
        for b in range(2):
            for i in range(4):
                assert mask[b, i, argmax[b, i]] == 1.0

    def test_fifteen_percent_of_max_is_dropped(self):
        # (0.15)^2.5 ~= 0.00871 < 0.15
        values = np.array([[[1.0, 0.15, 0.5]]])
        mask, _ = amplification_mask(values, power=2.5, keep_threshold=0.15)
        np.testing.assert_array_equal(mask[0, 0], [1.0, 0.0, 1.0])
        assert 0.15 ** 2.5 == pytest.approx(0.008714, abs=5e-7)

    def test_extreme_threshold_keeps_only_maxima(self):
        rng = np.random.default_rng(1)
        values = rng.uniform(0.1, 1.0, (1, 5, 5))
        mask, _ = amplification_mask(values, power=200.0, keep_threshold=0.999)
        np.testing.assert_array_equal(mask.sum(axis=-1), np.ones((1, 5)))

    def test_negative_entries_never_kept(self):
        values = np.array([[[0.5, -0.4, 0.1]]])
        mask, _ = amplification_mask(values, power=2.5, keep_threshold=0.01)
        assert mask[0, 0, 1] == 0.0

    def test_nonpositive_row_zeroed_and_counted(self):
        values = np.array([[[-0.2, -0.1, 0.0], [0.3, 0.2, 0.1]]])
        mask, zeroed = amplification_mask(values, power=2.5, keep_threshold=0.15)
        assert zeroed == 1
        np.testing.assert_array_equal(mask[0, 0], np.zeros(3))
        assert mask[0, 1].sum() > 0

    def test_sparsity_monotone_in_eta_and_power(self):
        rng = np.random.default_rng(2)
        values = rng.uniform(0.01, 1.0, (3, 6, 6))
        for lo, hi in [(0.05, 0.2), (0.2, 0.6), (0.6, 0.9)]:
            m_lo, _ = amplification_mask(values, 2.5, lo)
            m_hi, _ = amplification_mask(values, 2.5, hi)
            assert m_lo.sum() >= m_hi.sum()
        for lo, hi in [(1.0, 2.5), (2.5, 6.0)]:
            m_lo, _ = amplification_mask(values, lo, 0.15)
            m_hi, _ = amplification_mask(values, hi, 0.15)
            assert m_lo.sum() >= m_hi.sum()

    def test_mask_blocks_gradient(self):
        values = Parameter(np.array([[[1.0, 0.1, 0.5]]]), "s")
        out, mask, _ = amplify_threshold(values, power=2.5, keep_threshold=0.15)
        ad.backward(out.sum())
        np.testing.assert_array_equal(values.grad, mask)

    def test_fixed_mask_override(self):
        values = Parameter(np.array([[[1.0, 0.1, 0.5]]]), "s")
        pinned = np.ones((1, 1, 3))
        out, mask, zeroed = amplify_threshold(values, 2.5, 0.15, fixed_mask=pinned)
        np.testing.assert_array_equal(out.data, values.data)
        assert zeroed == 0

    def test_parameter_validation(self):
        with pytest.raises(ConfigurationError):
            amplification_mask(np.ones((1, 2, 2)), power=0.0, keep_threshold=0.15)
        with pytest.raises(ConfigurationError):
            amplification_mask(np.ones((1, 2, 2)), power=2.5, keep_threshold=1.5)


class TestMatrixExport:
    def test_round_trip_identity(self, tmp_path):
        labels = ["p0", "p1", "category:Cafes", "global"]
        matrix = np.random.default_rng(3).standard_normal((4, 4))
        path = tmp_path / "adj.csv"
        write_labeled_matrix_csv(path, labels, matrix)
        got_labels, got = read_labeled_matrix_csv(path)
        assert got_labels == labels
        np.testing.assert_array_equal(got, matrix)  # exact float round-trip

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "adj.csv"
        path.write_text("node,a,b\na,1.0,2.0\n")
        with pytest.raises(SchemaError):
            read_labeled_matrix_csv(path)
