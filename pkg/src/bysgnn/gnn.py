"""Graph convolution stack and the forecast head.

Three propagation layers of the symmetric-normalized form
act(D^-1/2 (A+ + I) D^-1/2 . H . W) with tanh on the first two layers and
identity on the last.  Negative adjacency entries are clamped to zero for
propagation (they stay visible in exports); self-loops guarantee positive
degrees.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, init_uniform


class GcnForecaster:
    """Graph convolution over busyness graphs plus the linear forecast head."""

    def __init__(self, store: ParamStore, in_dim: int, hidden_dim: int,
                 out_dim: int, horizon: int, rng: np.random.Generator,
                 prefix: str = "gnn"):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.horizon = horizon
        reg = store.register
        self.w1 = reg(f"{prefix}.layer1.weight", init_uniform(rng, (in_dim, hidden_dim), in_dim))
        self.b1 = reg(f"{prefix}.layer1.bias", np.zeros(hidden_dim))
        self.w2 = reg(f"{prefix}.layer2.weight", init_uniform(rng, (hidden_dim, hidden_dim), hidden_dim))
        self.b2 = reg(f"{prefix}.layer2.bias", np.zeros(hidden_dim))
        self.w3 = reg(f"{prefix}.layer3.weight", init_uniform(rng, (hidden_dim, out_dim), hidden_dim))
        self.b3 = reg(f"{prefix}.layer3.bias", np.zeros(out_dim))
        head_in = in_dim + out_dim
        self.head_w = reg(f"{prefix}.head.weight", init_uniform(rng, (head_in, horizon), head_in))
        self.head_b = reg(f"{prefix}.head.bias", np.zeros(horizon))

    @staticmethod
    def normalized_propagator(adjacency: Tensor) -> Tensor:
        """Symmetric-normalized propagation matrix from a weighted adjacency.

        Clamps negatives, adds self-loops, then scales rows and columns by
        inverse square-root degree.  Differentiable through kept entries.
        """
        b, s, _ = adjacency.shape
        positive = ad.relu(adjacency)
        with_loops = positive + Tensor(np.eye(s))
        degree = with_loops.sum(axis=-1, keepdims=True)       # (B, S, 1), >= 1
        inv_sqrt = degree ** -0.5
        return with_loops * inv_sqrt * inv_sqrt.swap_last()

    def propagate(self, adjacency: Tensor, features: Tensor) -> Tensor:
        """(B, S, S) adjacency + (B, S, F) features -> (B, S, out_dim)."""
        prop = self.normalized_propagator(adjacency)
        h = ad.tanh(ad.matmul(prop, ad.matmul(features, self.w1) + self.b1))
        h = ad.tanh(ad.matmul(prop, ad.matmul(h, self.w2) + self.b2))
        return ad.matmul(prop, ad.matmul(h, self.w3) + self.b3)

    def forecast(self, node_embeddings: Tensor, features: Tensor) -> Tensor:
        """Concatenate propagated embeddings with the original features and
        map to the horizon, in normalized units."""
        return ad.matmul(ad.concat([node_embeddings, features], axis=-1),
                         self.head_w) + self.head_b
