"""Per-series temporal encoder: scalar lift, independent GRUs, and an
attention-weighted summary of the hidden states.

Each series owns its lift and GRU weights.  They are stored as stacked
blocks (leading axis = series) and evaluated in one batched pass, which is
numerically identical to looping over series; parameters are never shared
across series.  The attention projection and the output layer norm are
shared.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, init_uniform
from .errors import ConfigurationError


class SeriesEncoder:
    """Encodes an (S, B, T) stack of windows into (S, B, M) embeddings."""

    def __init__(self, store: ParamStore, n_series: int, lift_dim: int,
                 embed_dim: int, rng: np.random.Generator,
                 self_attention: bool = True, prefix: str = "encoder"):
        self.n_series = n_series
        self.lift_dim = lift_dim
        self.embed_dim = embed_dim
        self.self_attention = self_attention
        s, d, m = n_series, lift_dim, embed_dim

        reg = store.register
        self.lift1_w = reg(f"{prefix}.lift1.weight", init_uniform(rng, (s, 1, d), 1))
        self.lift1_b = reg(f"{prefix}.lift1.bias", np.zeros((s, 1, d)))
        self.lift2_w = reg(f"{prefix}.lift2.weight", init_uniform(rng, (s, d, d), d))
        self.lift2_b = reg(f"{prefix}.lift2.bias", np.zeros((s, 1, d)))
        # packed gate order along the last axis: update, reset, candidate
        self.gru_w_in = reg(f"{prefix}.gru.w_in", init_uniform(rng, (s, d, 3 * m), d))
        self.gru_b_in = reg(f"{prefix}.gru.b_in", np.zeros((s, 1, 3 * m)))
        self.gru_u_zr = reg(f"{prefix}.gru.u_zr", init_uniform(rng, (s, m, 2 * m), m))
        self.gru_u_h = reg(f"{prefix}.gru.u_h", init_uniform(rng, (s, m, m), m))
        if self_attention:
            self.attn_w = reg(f"{prefix}.attn.weight", init_uniform(rng, (2 * m, 1), 2 * m))
        self.norm_gain = reg(f"{prefix}.norm.gain", np.ones(m))
        self.norm_bias = reg(f"{prefix}.norm.bias", np.zeros(m))

    def lift(self, x: Tensor) -> Tensor:
        """(S, R, 1) scalars -> (S, R, D) features via linear-tanh-linear.

        The first layer has a scalar input, so the matmul collapses to a
        broadcast product with the (S, 1, D) weight rows.
        """
        h = ad.tanh(x * self.lift1_w + self.lift1_b)
        return ad.matmul(h, self.lift2_w) + self.lift2_b

    def encode(self, x, return_attention: bool = False):
        """Run the full encoder over an (S, B, T) stack of windows."""
        values = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if values.ndim != 3 or values.shape[0] != self.n_series:
            raise ConfigurationError(
                f"expected ({self.n_series}, B, T) input, got {values.shape}")
        s, b, t = values.shape
        m = self.embed_dim

        x_in = x if isinstance(x, Tensor) else Tensor(values)
        lifted = self.lift(x_in.reshape((s, b * t, 1)))
        # input-side gate projections for all steps at once; the per-step
        # bias lands on the small (S, B, 3M) slices inside the loop
        gates_in = ad.matmul(lifted, self.gru_w_in).reshape((s, b, t, 3 * m))

        h = Tensor(np.zeros((s, b, m)))
        states = []
        for step in range(t):
            xt = ad.take_index(gates_in, 2, step) + self.gru_b_in
            zr = ad.sigmoid(ad.slice_last(xt, 0, 2 * m) + ad.matmul(h, self.gru_u_zr))
            z = ad.slice_last(zr, 0, m)
            r = ad.slice_last(zr, m, 2 * m)
            cand = ad.tanh(ad.slice_last(xt, 2 * m, 3 * m)
                           + ad.matmul(r * h, self.gru_u_h))
            h = (1.0 - z) * h + z * cand
            states.append(h)

        attention = None
        if self.self_attention:
            # score_t = tanh(W_a [h_t || z]); the concatenated projection is
            # evaluated as two partial products to avoid materializing [H || z]
            all_h = ad.stack(states, axis=2)                     # (S, B, T, M)
            w_state = ad.slice_axis(self.attn_w, 0, 0, m)
            w_final = ad.slice_axis(self.attn_w, 0, m, 2 * m)
            scores = ad.tanh(ad.matmul(all_h, w_state)
                             + ad.matmul(h.reshape((s, b, 1, m)), w_final))
            weights = ad.softmax_rows(scores.reshape((s, b, t)))
            summary = (all_h * weights.reshape((s, b, t, 1))).sum(axis=2)
            pre_norm = h + summary
            attention = weights.data
        else:
            pre_norm = h

        embedding = ad.layer_norm(pre_norm, self.norm_gain, self.norm_bias)
        if return_attention:
            return embedding, attention
        return embedding
