"""Model assembly: wires the encoder, semantics, graph construction, and
GNN stack into a single forecaster, with ablation switches that remove one
subsystem at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import graphgen, semantics
from .autodiff import ParamStore, Tensor
from .data import PoiMetadata, VisitSeriesDataset
from .encoder import SeriesEncoder
from .errors import ConfigurationError, SchemaError
from .gnn import GcnForecaster
from .graphgen import SpatialContext, TemporalAttention
from .metanodes import CategoryIndex, aggregate_by_category

ABLATIONS = ("no_semantics", "no_space", "no_metanodes",
             "no_self_attention", "no_adj_threshold")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the protocol values."""
    window: int = 24
    horizon: int = 6
    lift_dim: int = 64
    temporal_dim: int = 128
    semantic_dim: int = 168
    raw_embedding_dim: int = 768
    attention_heads: int = 8
    gcn_hidden: int = 64
    gcn_out_dim: int = 32
    amp_power: float = 2.5
    edge_keep_threshold: float = 0.15

    def validate(self) -> None:
        if self.temporal_dim % self.attention_heads != 0:
            raise ConfigurationError(
                f"temporal_dim {self.temporal_dim} must be divisible by "
                f"{self.attention_heads} attention heads")
        for name in ("window", "horizon", "lift_dim", "temporal_dim",
                     "semantic_dim", "raw_embedding_dim", "gcn_hidden", "gcn_out_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")


def validate_ablations(ablations) -> tuple[str, ...]:
    flags = tuple(ablations or ())
    unknown = [a for a in flags if a not in ABLATIONS]
    if unknown:
        raise ConfigurationError(f"unknown ablation flags {unknown}; valid: {ABLATIONS}")
    if "no_semantics" in flags and "no_space" in flags:
        raise ConfigurationError(
            "no_semantics and no_space together leave the gate without context")
    return flags


@dataclass
class PreparedInputs:
    """Window-invariant model inputs derived from a dataset + metadata."""
    index: CategoryIndex | None
    augmented: np.ndarray                 # (S, T_total) raw counts
    labels: list[str]
    raw_semantic: np.ndarray | None       # (S, E) frozen embeddings
    spatial: SpatialContext | None
    spatial_sim: np.ndarray | None        # (S, S)
    n_pois: int


def prepare_inputs(ds: VisitSeriesDataset, metadata: list[PoiMetadata],
                   config: ModelConfig, ablations=(),
                   embeddings_path=None, distances_path=None,
                   region: str | None = None) -> PreparedInputs:
    """Build the static model inputs (aggregates, sentences, distances)."""
    flags = validate_ablations(ablations)
    by_id = {m.poi_id: m for m in metadata}
    missing = [p for p in ds.poi_ids if p not in by_id]
    extra = [m.poi_id for m in metadata if m.poi_id not in set(ds.poi_ids)]
    if missing or extra:
        raise SchemaError(
            f"metadata/visits poi_id mismatch; missing={missing[:5]} extra={extra[:5]}")
    ordered = [by_id[p] for p in ds.poi_ids]

    if "no_metanodes" in flags:
        index = None
        augmented = np.array(ds.visits, dtype=np.float64)
        labels = list(ds.poi_ids)
        n_meta = 0
    else:
        index = CategoryIndex.from_metadata(ordered)
        augmented = aggregate_by_category(ds.visits, index).values
        labels = index.node_labels(ds.poi_ids)
        n_meta = index.n_categories + 1

    raw_semantic = None
    if "no_semantics" not in flags:
        if embeddings_path is not None:
            raw_semantic = semantics.load_embeddings_csv(embeddings_path, labels)
        else:
            # without meta-nodes only the first N sentences (the POIs) exist
            sent_index = index if index is not None else _poi_only_index(ordered)
            sents = [semantics.render_sentence(i, ordered, sent_index, region)
                     for i in range(len(labels))]
            raw_semantic = semantics.embed_sentences(sents, config.raw_embedding_dim)

    spatial = None
    spatial_sim = None
    if "no_space" not in flags:
        if distances_path is not None:
            spatial = SpatialContext.from_csv(distances_path, len(ordered))
        else:
            spatial = SpatialContext.from_coordinates(
                [m.latitude for m in ordered], [m.longitude for m in ordered])
        spatial_sim = graphgen.spatial_similarity(spatial, n_meta)

    return PreparedInputs(index=index, augmented=augmented, labels=labels,
                          raw_semantic=raw_semantic, spatial=spatial,
                          spatial_sim=spatial_sim, n_pois=len(ordered))


def _poi_only_index(metadata: list[PoiMetadata]) -> CategoryIndex:
    categories = sorted({m.top_category for m in metadata})
    lookup = {c: i for i, c in enumerate(categories)}
    return CategoryIndex(
        n_pois=len(metadata), categories=categories,
        membership=np.array([lookup[m.top_category] for m in metadata], dtype=np.intp))


@dataclass
class GraphCapture:
    """Intermediate graph-construction products of one forward pass."""
    semantic_sim: np.ndarray | None
    spatial_sim: np.ndarray | None
    attention_scores: np.ndarray          # (B, S, S) head-averaged weights
    head_logits: np.ndarray               # (B, l, S, S) pre-softmax
    fused: np.ndarray                     # (B, S, S) before thresholding
    threshold_mask: np.ndarray            # (B, S, S) 0/1
    adjacency: np.ndarray                 # (B, S, S) final
    zeroed_rows: int
    node_embeddings: np.ndarray           # (B, S, out_dim) post-GNN
    multihead_out: np.ndarray             # (B, S, M) value-path output
    alpha: float | None
    node_labels: list[str] = field(default_factory=list)


class BusynessForecaster:
    """End-to-end forecaster over per-window dynamic busyness graphs."""

    def __init__(self, config: ModelConfig, inputs: PreparedInputs,
                 ablations=(), seed: int = 0):
        config.validate()
        self.config = config
        self.ablations = validate_ablations(ablations)
        self.inputs = inputs
        self.n_nodes = inputs.augmented.shape[0]
        self.n_pois = inputs.n_pois
        self.labels = inputs.labels

        use_semantics = "no_semantics" not in self.ablations
        use_space = "no_space" not in self.ablations
        if use_semantics and inputs.raw_semantic is None:
            raise ConfigurationError("semantic inputs missing but semantics enabled")
        if use_space and inputs.spatial_sim is None:
            raise ConfigurationError("spatial inputs missing but space enabled")

        rng = np.random.default_rng(seed)
        store = ParamStore()
        self.store = store
        self.encoder = SeriesEncoder(
            store, self.n_nodes, config.lift_dim, config.temporal_dim, rng,
            self_attention="no_self_attention" not in self.ablations)
        self.projection = None
        if use_semantics:
            self.projection = semantics.SemanticProjection(
                store, inputs.raw_semantic.shape[1], config.semantic_dim, rng)
        self.attention = TemporalAttention(
            store, config.temporal_dim, config.attention_heads, rng)
        self.alpha_raw = None
        if use_semantics and use_space:
            # sigmoid(0) = 0.5: start the gate balanced
            self.alpha_raw = store.register("gate.alpha_raw", np.zeros(()))

        feature_dim = config.temporal_dim + (config.semantic_dim if use_semantics else 0)
        self.gnn = GcnForecaster(store, feature_dim, config.gcn_hidden,
                                 config.gcn_out_dim, config.horizon, rng)

    @property
    def alpha(self) -> float | None:
        if self.alpha_raw is None:
            return None
        return float(0.5 * (1.0 + np.tanh(0.5 * self.alpha_raw.data)))

    def forward(self, windows: np.ndarray, fixed_mask: np.ndarray | None = None,
                capture: bool = False):
        """Forecast normalized windows.

        ``windows`` is (B, S, T) in normalized units; returns (B, S, H)
        predictions, plus a GraphCapture when requested.  ``fixed_mask``
        pins the threshold mask (used by gradient checks, where the mask
        must be held constant while inputs are perturbed).
        """
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[1] != self.n_nodes \
                or windows.shape[2] != self.config.window:
            raise ConfigurationError(
                f"expected (B, {self.n_nodes}, {self.config.window}) windows, "
                f"got {windows.shape}")

        series_major = Tensor(np.ascontiguousarray(windows.transpose(1, 0, 2)))
        temporal = ad.transpose(self.encoder.encode(series_major), (1, 0, 2))

        semantic_embed = None
        semantic_sim = None
        if self.projection is not None:
            semantic_embed = self.projection.project(self.inputs.raw_semantic)
            semantic_sim = ad.cosine_rows(semantic_embed)

        features = semantics.build_node_features(temporal, semantic_embed)
        scores, multihead_out, head_logits = self.attention.forward(temporal)
        fused = graphgen.fuse_gate(semantic_sim, self.inputs.spatial_sim,
                                   scores, self.alpha_raw)

        if "no_adj_threshold" in self.ablations:
            mask = np.ones(fused.shape)
            adjacency, zeroed = fused, 0
        else:
            adjacency, mask, zeroed = graphgen.amplify_threshold(
                fused, self.config.amp_power, self.config.edge_keep_threshold,
                fixed_mask=fixed_mask)

        node_embeddings = self.gnn.propagate(adjacency, features)
        predictions = self.gnn.forecast(node_embeddings, features)

        if not capture:
            return predictions
        return predictions, GraphCapture(
            semantic_sim=None if semantic_sim is None else semantic_sim.data,
            spatial_sim=self.inputs.spatial_sim,
            attention_scores=scores.data,
            head_logits=head_logits,
            fused=fused.data,
            threshold_mask=mask,
            adjacency=adjacency.data,
            zeroed_rows=zeroed,
            node_embeddings=node_embeddings.data,
            multihead_out=multihead_out.data,
            alpha=self.alpha,
            node_labels=self.labels)
