"""Dynamic graph construction: spatial, semantic, and temporal-attention
similarity matrices fused through a learnable gate, then sparsified by a
case-amplification threshold.

The temporal attention block keeps the full multi-head machinery (value
projections and the output projection are real parameters), but the score
matrix used for graph fusion is the head-averaged post-softmax attention
weight matrix; the projected output embeddings are returned for inspection
and do not feed the forecast path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, init_uniform
from .errors import ConfigurationError, SchemaError

EARTH_RADIUS_M = 6_371_000.0


# ---------------------------------------------------------------------------
# spatial context
# ---------------------------------------------------------------------------

def pairwise_distances(latitudes, longitudes) -> np.ndarray:
    """Pairwise distances in meters via an equirectangular projection
    about the coordinate centroid (adequate at city scale)."""
    lat = np.radians(np.asarray(latitudes, dtype=np.float64))
    lon = np.radians(np.asarray(longitudes, dtype=np.float64))
    lat0 = lat.mean()
    x = EARTH_RADIUS_M * (lon - lon.mean()) * math.cos(lat0)
    y = EARTH_RADIUS_M * (lat - lat0)
    dx = x[:, None] - x[None, :]
    dy = y[:, None] - y[None, :]
    return np.hypot(dx, dy)


@dataclass
class SpatialContext:
    """Distance matrix with its dispersion and cutoff threshold."""
    distances: np.ndarray  # (N, N) meters, symmetric, zero diagonal
    sigma: float
    tau: float
    degenerate: bool = False  # all POIs colocated

    @classmethod
    def build(cls, distances: np.ndarray, tau: float | None = None) -> "SpatialContext":
        d = np.asarray(distances, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ConfigurationError(f"distance matrix must be square, got {d.shape}")
        if np.any(d < 0) or not np.allclose(d, d.T, atol=1e-6):
            raise SchemaError("distance matrix must be symmetric and non-negative")
        if not np.allclose(np.diag(d), 0.0, atol=1e-6):
            raise SchemaError("distance matrix must have a zero diagonal")
        n = d.shape[0]
        if n > 1:
            iu = np.triu_indices(n, k=1)
            sigma = float(d[iu].std())
        else:
            sigma = 0.0
        degenerate = sigma == 0.0
        if tau is None:
            tau = 2.0 * sigma if not degenerate else 1.0  # 1 m floor
        return cls(distances=d, sigma=sigma, tau=float(tau), degenerate=degenerate)

    @classmethod
    def from_coordinates(cls, latitudes, longitudes, tau: float | None = None):
        return cls.build(pairwise_distances(latitudes, longitudes), tau=tau)

    @classmethod
    def from_csv(cls, path, n_pois: int, tau: float | None = None) -> "SpatialContext":
        """Dense headerless N x N matrix of meters, POI order = dataset order."""
        rows = []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                if len(row) != n_pois:
                    raise SchemaError(f"{path} line {lineno}: expected {n_pois} columns")
                rows.append([float(v) for v in row])
        if len(rows) != n_pois:
            raise SchemaError(f"{path}: expected {n_pois} rows, got {len(rows)}")
        return cls.build(np.array(rows), tau=tau)


def spatial_similarity(ctx: SpatialContext, n_meta: int) -> np.ndarray:
    """Thresholded Gaussian kernel on the POI block; meta rows/columns are 1.

    Kernel: exp(-d^2 / sigma^2) where d < tau, else 0.  With all POIs
    colocated (sigma = 0) every kernel value is 1.
    """
    n = ctx.distances.shape[0]
    if ctx.degenerate:
        block = np.ones((n, n))
    else:
        kernel = np.exp(-(ctx.distances ** 2) / (ctx.sigma ** 2))
        block = np.where(ctx.distances < ctx.tau, kernel, 0.0)
    size = n + n_meta
    sim = np.ones((size, size))
    sim[:n, :n] = block
    return sim


# ---------------------------------------------------------------------------
# temporal attention scores
# ---------------------------------------------------------------------------

class TemporalAttention:
    """Multi-head self-attention over node temporal embeddings.

    Queries, keys, and values are all the embedding matrix; logits are
    scaled by sqrt of the full embedding width.  Per-head projections are
    stored as column blocks of one (M, M) matrix: head i owns columns
    [i*M/l, (i+1)*M/l).
    """

    def __init__(self, store: ParamStore, embed_dim: int, heads: int,
                 rng: np.random.Generator, prefix: str = "attention"):
        if embed_dim % heads != 0:
            raise ConfigurationError(
                f"embedding dim {embed_dim} not divisible by {heads} heads")
        self.embed_dim = embed_dim
        self.heads = heads
        self.head_dim = embed_dim // heads
        shape = (embed_dim, embed_dim)
        self.w_query = store.register(f"{prefix}.w_query",
                                      init_uniform(rng, shape, embed_dim))
        self.w_key = store.register(f"{prefix}.w_key",
                                    init_uniform(rng, shape, embed_dim))
        self.w_value = store.register(f"{prefix}.w_value",
                                      init_uniform(rng, shape, embed_dim))
        self.w_out = store.register(f"{prefix}.w_out",
                                    init_uniform(rng, shape, embed_dim))

    def _split_heads(self, projected: Tensor, b: int, s: int) -> Tensor:
        """(B, S, M) -> (B, l, S, M/l)."""
        return ad.transpose(
            projected.reshape((b, s, self.heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, embeddings: Tensor):
        """(B, S, M) embeddings -> (scores (B, S, S), projected output,
        per-head pre-softmax logits as ndarray)."""
        b, s, m = embeddings.shape
        if m != self.embed_dim:
            raise ConfigurationError(f"expected embedding dim {self.embed_dim}, got {m}")
        q = self._split_heads(ad.matmul(embeddings, self.w_query), b, s)
        k = self._split_heads(ad.matmul(embeddings, self.w_key), b, s)
        v = self._split_heads(ad.matmul(embeddings, self.w_value), b, s)
        logits = ad.matmul(q, k.swap_last()) * (1.0 / math.sqrt(m))
        weights = ad.softmax_rows(logits)               # (B, l, S, S)
        scores = weights.mean(axis=1)                   # head average -> (B, S, S)
        heads_out = ad.matmul(weights, v)               # (B, l, S, M/l)
        merged = ad.transpose(heads_out, (0, 2, 1, 3)).reshape((b, s, m))
        projected = ad.matmul(merged, self.w_out)
        return scores, projected, logits.data


# ---------------------------------------------------------------------------
# gate fusion and thresholding
# ---------------------------------------------------------------------------

def fuse_gate(semantic_sim: Tensor | None, spatial_sim: np.ndarray | None,
              attention_scores: Tensor, alpha_raw: Tensor | None) -> Tensor:
    """Blend context similarities and modulate the attention scores.

    Full model: gate = (1 - alpha) * semantic + alpha * spatial with
    alpha = sigmoid(alpha_raw).  With one context ablated the gate is the
    remaining matrix alone.  The fused result is gate (.) scores.
    """
    b, s, _ = attention_scores.shape
    if semantic_sim is not None and spatial_sim is not None:
        if alpha_raw is None:
            raise ConfigurationError("alpha parameter required when both contexts present")
        alpha = ad.sigmoid(alpha_raw)
        gate = (1.0 - alpha) * semantic_sim + alpha * Tensor(spatial_sim)
    elif semantic_sim is not None:
        gate = semantic_sim
    elif spatial_sim is not None:
        gate = Tensor(spatial_sim)
    else:
        raise ConfigurationError("gate needs at least one of semantic/spatial context")
    return ad.broadcast_to(gate.reshape((1, s, s)), (b, s, s)) * attention_scores


def amplification_mask(values: np.ndarray, power: float, keep_threshold: float):
    """Binary keep-mask from the row-normalized case-amplification rule.

    Keeps entry (i, j) iff (S_ij / max(S_i))^p > eta.  Rows whose maximum
    is not positive are zeroed entirely and counted (the rule is undefined
    there); negative entries never satisfy the keep condition.
    """
    if power <= 0 or not 0.0 < keep_threshold < 1.0:
        raise ConfigurationError("need power > 0 and threshold in (0, 1)")
    row_max = values.max(axis=-1, keepdims=True)
    positive_rows = row_max > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(positive_rows, values / np.where(row_max > 0, row_max, 1.0), 0.0)
    keep = np.zeros(values.shape, dtype=bool)
    pos = ratio > 0.0
    keep[pos] = ratio[pos] ** power > keep_threshold
    keep &= positive_rows
    zeroed_rows = int(np.sum(~positive_rows))
    return keep.astype(np.float64), zeroed_rows


def amplify_threshold(fused: Tensor, power: float = 2.5, keep_threshold: float = 0.15,
                      fixed_mask: np.ndarray | None = None):
    """Apply the case-amplification mask; gradients pass only through kept
    entries (the mask itself is non-differentiable and recomputed per
    window unless ``fixed_mask`` pins it)."""
    if fixed_mask is not None:
        mask, zeroed = np.asarray(fixed_mask, dtype=np.float64), 0
    else:
        mask, zeroed = amplification_mask(fused.data, power, keep_threshold)
    return ad.apply_mask(fused, mask), mask, zeroed


@dataclass
class BusynessGraph:
    """Per-window graph: node features plus the fused thresholded adjacency."""
    node_features: Tensor      # (B, S, F)
    adjacency: Tensor          # (B, S, S)
    node_labels: list[str]


# ---------------------------------------------------------------------------
# labeled matrix export / import
# ---------------------------------------------------------------------------

def write_labeled_matrix_csv(path, labels: list[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.shape != (len(labels), len(labels)):
        raise ConfigurationError("matrix shape does not match labels")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node"] + labels)
        for label, row in zip(labels, matrix):
            writer.writerow([label] + [f"{v:.17g}" for v in row])


def read_labeled_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "node":
            raise SchemaError(f"{path}: expected 'node' header column")
        labels = header[1:]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(labels) + 1 or row[0] != labels[len(rows)]:
                raise SchemaError(f"{path} line {lineno}: malformed matrix row")
            rows.append([float(v) for v in row[1:]])
    if len(rows) != len(labels):
        raise SchemaError(f"{path}: expected {len(labels)} rows, got {len(rows)}")
    return labels, np.array(rows)
