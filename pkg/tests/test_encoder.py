"""Temporal encoder: scalar-loop oracle equivalence, independence across
series, and gradient checks."""

import numpy as np
import pytest

from bysgnn import autodiff as ad
from bysgnn.autodiff import ParamStore
from bysgnn.encoder import SeriesEncoder
from bysgnn.errors import ConfigurationError

from helpers import check_gradients


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def encoder_oracle(enc: SeriesEncoder, x: np.ndarray) -> np.ndarray:
    """Independent per-element re-implementation of the whole encoder."""
    s_n, b_n, t_n = x.shape
    d, m = enc.lift_dim, enc.embed_dim
    w1, b1 = enc.lift1_w.data, enc.lift1_b.data
    w2, b2 = enc.lift2_w.data, enc.lift2_b.data
    w_in, b_in = enc.gru_w_in.data, enc.gru_b_in.data
    u_zr, u_h = enc.gru_u_zr.data, enc.gru_u_h.data
    gain, bias = enc.norm_gain.data, enc.norm_bias.data
    out = np.zeros((s_n, b_n, m))
    for s in range(s_n):
        for b in range(b_n):
            lifted = np.zeros((t_n, d))
            for t in range(t_n):
                hidden = np.tanh(x[s, b, t] * w1[s, 0] + b1[s, 0])
                lifted[t] = hidden @ w2[s] + b2[s, 0]
            h = np.zeros(m)
            states = np.zeros((t_n, m))
            for t in range(t_n):
                gates = lifted[t] @ w_in[s] + b_in[s, 0]
                z = _logistic(gates[:m] + h @ u_zr[s][:, :m])
                r = _logistic(gates[m:2 * m] + h @ u_zr[s][:, m:])
                cand = np.tanh(gates[2 * m:] + (r * h) @ u_h[s])
                h = (1.0 - z) * h + z * cand
                states[t] = h
            if enc.self_attention:
                w_a = enc.attn_w.data[:, 0]
                raw = np.array([np.tanh(np.concatenate([states[t], h]) @ w_a)
                                for t in range(t_n)])
                weights = np.exp(raw - raw.max())
                weights /= weights.sum()
                pre = h + (weights[:, None] * states).sum(axis=0)
            else:
                pre = h
            mu, var = pre.mean(), pre.var()
            out[s, b] = (pre - mu) / np.sqrt(var + 1e-10) * gain + bias
    return out


def _encoder(n_series=2, lift_dim=2, embed_dim=2, seed=0, self_attention=True):
    return SeriesEncoder(ParamStore(), n_series, lift_dim, embed_dim,
                         np.random.default_rng(seed), self_attention=self_attention)


class TestOracleEquivalence:
    def test_matches_scalar_loop(self):
        enc = _encoder(n_series=2, lift_dim=2, embed_dim=2, seed=1)
        x = np.random.default_rng(2).standard_normal((2, 2, 3))
        got = enc.encode(x).data
        want = encoder_oracle(enc, x)
        assert np.max(np.abs(got - want)) <= 1e-10

    def test_matches_without_attention(self):
        enc = _encoder(seed=3, self_attention=False)
        x = np.random.default_rng(4).standard_normal((2, 1, 3))
        assert np.max(np.abs(enc.encode(x).data - encoder_oracle(enc, x))) <= 1e-10

    def test_larger_instance(self):
        enc = _encoder(n_series=3, lift_dim=4, embed_dim=6, seed=5)
        x = np.random.default_rng(6).standard_normal((3, 2, 5))
        assert np.max(np.abs(enc.encode(x).data - encoder_oracle(enc, x))) <= 1e-10


class TestRecurrenceContracts:
    def test_closed_update_gate_keeps_zero_state(self):
        enc = _encoder(seed=7)
        m = enc.embed_dim
        enc.gru_b_in.data[:, :, :m] = -1e4  # update gate saturates at exactly 0
        x = np.random.default_rng(8).standard_normal((2, 1, 4))
        out, attn = enc.encode(x, return_attention=True)
        # hidden state never leaves zero, so the embedding is layer_norm(0) = 0
        np.testing.assert_array_equal(out.data, np.zeros_like(out.data))
        np.testing.assert_allclose(attn, 0.25, atol=1e-15)  # uniform over T=4

    def test_single_step_window(self):
        enc = _encoder(seed=9)
        x = np.random.default_rng(10).standard_normal((2, 1, 1))
        out, attn = enc.encode(x, return_attention=True)
        np.testing.assert_allclose(attn, 1.0, atol=1e-15)
        want = encoder_oracle(enc, x)
        assert np.max(np.abs(out.data - want)) <= 1e-12

    def test_identical_states_make_attention_irrelevant(self):
        # update gate pinned open and zero state->candidate coupling, with a
        # constant input: every hidden state equals the first one, so the
        # summary is that state regardless of attention weights
        enc = _encoder(seed=11)
        m = enc.embed_dim
        enc.gru_b_in.data[:, :, :m] = 1e4   # z == 1
        enc.gru_u_h.data[:] = 0.0
        x = np.full((2, 1, 5), 0.7)
        got = enc.encode(x).data
        want = encoder_oracle(enc, x)
        assert np.max(np.abs(got - want)) <= 1e-12
        # cross-check the algebra: embedding equals layer_norm(2 * state)
        enc_na = _encoder(seed=11, self_attention=False)
        for name in ("lift1_w", "lift1_b", "lift2_w", "lift2_b",
                     "gru_w_in", "gru_b_in", "gru_u_zr", "gru_u_h"):
            getattr(enc_na, name).data[:] = getattr(enc, name).data
        state_norm = enc_na.encode(x).data  # layer_norm(h); gain/bias identical
        # layer_norm(2h) == layer_norm(h) because normalization removes scale
        np.testing.assert_allclose(got, state_norm, atol=1e-12)

    def test_attention_weights_are_distributions(self):
        enc = _encoder(n_series=3, lift_dim=3, embed_dim=4, seed=12)
        x = np.random.default_rng(13).standard_normal((3, 2, 6))
        _, attn = enc.encode(x, return_attention=True)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(attn >= 0)


class TestSeriesIndependence:
    def test_perturbing_one_series_leaves_others(self):
        enc = _encoder(n_series=3, seed=14)
        rng = np.random.default_rng(15)
        x = rng.standard_normal((3, 2, 4))
        base = enc.encode(x).data
        x2 = x.copy()
        x2[1] += rng.standard_normal((2, 4))
        moved = enc.encode(x2).data
        np.testing.assert_array_equal(base[0], moved[0])
        np.testing.assert_array_equal(base[2], moved[2])
        assert np.max(np.abs(base[1] - moved[1])) > 0

    def test_permuting_series_and_parameters(self):
        enc_a = _encoder(n_series=2, seed=16)
        enc_b = _encoder(n_series=2, seed=17)
        for name in ("lift1_w", "lift1_b", "lift2_w", "lift2_b",
                     "gru_w_in", "gru_b_in", "gru_u_zr", "gru_u_h"):
            getattr(enc_b, name).data[:] = getattr(enc_a, name).data[::-1]
        for name in ("attn_w", "norm_gain", "norm_bias"):
            getattr(enc_b, name).data[:] = getattr(enc_a, name).data
        x = np.random.default_rng(18).standard_normal((2, 2, 4))
        out_a = enc_a.encode(x).data
        out_b = enc_b.encode(x[::-1]).data
        np.testing.assert_allclose(out_b, out_a[::-1], atol=1e-14)

    def test_batch_equals_single_series_runs(self):
        enc = _encoder(n_series=3, lift_dim=3, embed_dim=4, seed=19)
        x = np.random.default_rng(20).standard_normal((3, 2, 5))
        joint = enc.encode(x).data
        for s in range(3):
            single = _encoder(n_series=1, lift_dim=3, embed_dim=4, seed=21)
            for name in ("lift1_w", "lift1_b", "lift2_w", "lift2_b",
                         "gru_w_in", "gru_b_in", "gru_u_zr", "gru_u_h"):
                getattr(single, name).data[:] = getattr(enc, name).data[s:s + 1]
            for name in ("attn_w", "norm_gain", "norm_bias"):
                getattr(single, name).data[:] = getattr(enc, name).data
            np.testing.assert_allclose(single.encode(x[s:s + 1]).data[0],
                                       joint[s], atol=1e-12)


class TestEncoderGradients:
    def test_lift_gradient_on_24_step_series(self):
        enc = _encoder(n_series=1, lift_dim=3, embed_dim=2, seed=22)
        x = ad.Tensor(np.random.default_rng(23).standard_normal((1, 24, 1)))
        params = [enc.lift1_w, enc.lift1_b, enc.lift2_w, enc.lift2_b]
        check_gradients(lambda: (enc.lift(x) ** 2.0).sum(), params)

    def test_zero_lift_weights_give_zero(self):
        enc = _encoder(seed=24)
        enc.lift1_w.data[:] = 0
        enc.lift1_b.data[:] = 0
        enc.lift2_w.data[:] = 0
        enc.lift2_b.data[:] = 0
        out = enc.lift(ad.Tensor(np.ones((2, 5, 1))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 5, 2)))

    def test_full_encoder_gradients(self):
        enc = _encoder(n_series=2, lift_dim=2, embed_dim=2, seed=25)
        x = np.random.default_rng(26).standard_normal((2, 1, 3))
        store_params = [enc.lift1_w, enc.lift1_b, enc.lift2_w, enc.lift2_b,
                        enc.gru_w_in, enc.gru_b_in, enc.gru_u_zr, enc.gru_u_h,
                        enc.attn_w, enc.norm_gain, enc.norm_bias]
        weights = ad.Tensor(np.random.default_rng(27).standard_normal((2, 1, 2)))
        check_gradients(lambda: (enc.encode(x) * weights).sum(), store_params)


def test_bad_input_shape():
    enc = _encoder(n_series=2)
    with pytest.raises(ConfigurationError):
        enc.encode(np.zeros((3, 1, 4)))
