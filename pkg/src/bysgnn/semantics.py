"""Node semantics: sentence descriptions, a deterministic text embedder,
and the learnable projection that adapts frozen embeddings to the task.

The default embedder is a signed token-hash bag of words.  It is
order-insensitive by construction (a documented simplification) and keeps
the repo free of language-model weights; precomputed embeddings can be
loaded from file instead and flow through the same frozen-input +
learnable-projection contract.
"""

from __future__ import annotations

import csv
import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, init_uniform
from .data import PoiMetadata
from .errors import ConfigurationError, SchemaError
from .metanodes import GLOBAL_LABEL, CategoryIndex

POI_TEMPLATE = (
    "This point of interest is {name} located at {address}. "
    "It is open for business during {hours}. "
    "It can be contacted by phone at {phone}. "
    "The location belongs to the top-category {top_category}, "
    "with the sub-category {sub_category}."
)

META_TEMPLATE = (
    "This is the meta-node representing all the points of interest{region} "
    "that belong to the top category {category}."
)

GLOBAL_TEMPLATE = "This is the meta-node representing all points of interest{region}."

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


@dataclass
class SentenceDescription:
    node_index: int
    text: str
    missing_fields: list[str]


def render_sentence(node_index: int, metadata: list[PoiMetadata],
                    index: CategoryIndex, region: str | None = None) -> SentenceDescription:
    """Render the description sentence for a POI node or a meta-node.

    Missing or empty metadata fields render as "unknown" and are reported,
    never raised.
    """
    region_text = f" in {region}" if region else ""
    n = index.n_pois
    if node_index < 0 or node_index >= index.n_nodes:
        raise ConfigurationError(f"node index {node_index} out of range")
    if node_index < n:
        meta = metadata[node_index]
        values = {}
        missing = []
        for key in ("name", "address", "hours", "phone", "top_category", "sub_category"):
            value = getattr(meta, key)
            if not str(value).strip():
                missing.append(key)
                value = "unknown"
            values[key] = value
        return SentenceDescription(node_index, POI_TEMPLATE.format(**values), missing)
    if node_index < n + index.n_categories:
        category = index.categories[node_index - n]
        text = META_TEMPLATE.format(region=region_text, category=category)
        return SentenceDescription(node_index, text, [])
    return SentenceDescription(node_index, GLOBAL_TEMPLATE.format(region=region_text), [])


def render_all_sentences(metadata: list[PoiMetadata], index: CategoryIndex,
                         region: str | None = None) -> list[SentenceDescription]:
    return [render_sentence(i, metadata, index, region) for i in range(index.n_nodes)]


def embed_sentence(text: str, dim: int = 768) -> np.ndarray:
    """Signed token-hash bag of words, L2-normalized (zero vector if empty).

    Tokens are lowercased alphanumeric runs; each token hashes to one of
    ``dim`` buckets with a +/-1 sign.  Deterministic across processes.
    """
    vec = np.zeros(dim)
    for token in _TOKEN_SPLIT.split(text.lower()):
        if not token:
            continue
        digest = hashlib.md5(token.encode("utf-8")).digest()
        h = int.from_bytes(digest[:8], "little")
        sign = 1.0 if h & (1 << 63) == 0 else -1.0
        vec[h % dim] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def embed_sentences(sentences: list[SentenceDescription], dim: int = 768) -> np.ndarray:
    return np.stack([embed_sentence(s.text, dim) for s in sentences])


def load_embeddings_csv(path, labels: list[str]) -> np.ndarray:
    """Load precomputed raw embeddings keyed by node label.

    Expected header: ``node_key,e_0,...,e_{E-1}``.  Every node label must
    be present; width is taken from the file.
    """
    rows: dict[str, np.ndarray] = {}
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "node_key":
            raise SchemaError(f"{path}: first column must be node_key")
        width = len(header) - 1
        if width < 1 or header[1:] != [f"e_{i}" for i in range(width)]:
            raise SchemaError(f"{path}: embedding columns must be e_0..e_{{E-1}}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise SchemaError(f"{path} line {lineno}: expected {width + 1} fields")
            rows[row[0]] = np.array([float(v) for v in row[1:]])
    missing = [label for label in labels if label not in rows]
    if missing:
        raise SchemaError(f"{path}: missing embeddings for {missing[:5]}"
                          + ("..." if len(missing) > 5 else ""))
    return np.stack([rows[label] for label in labels])


def write_embeddings_csv(path, labels: list[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_key"] + [f"e_{i}" for i in range(matrix.shape[1])])
        for label, row in zip(labels, matrix):
            writer.writerow([label] + [f"{v:.17g}" for v in row])


class SemanticProjection:
    """Learnable linear map from frozen raw embeddings to task embeddings."""

    def __init__(self, store: ParamStore, raw_dim: int, out_dim: int,
                 rng: np.random.Generator, prefix: str = "semantics"):
        self.raw_dim = raw_dim
        self.out_dim = out_dim
        self.weight = store.register(f"{prefix}.proj.weight",
                                     init_uniform(rng, (raw_dim, out_dim), raw_dim))
        self.bias = store.register(f"{prefix}.proj.bias", np.zeros(out_dim))

    def project(self, raw: np.ndarray) -> Tensor:
        """(S, E) frozen rows -> (S, P) learnable embedding."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[1] != self.raw_dim:
            raise ConfigurationError(
                f"raw embeddings must be (S, {self.raw_dim}), got {raw.shape}")
        return ad.matmul(Tensor(raw), self.weight) + self.bias


def build_node_features(temporal: Tensor, semantic: Tensor | None) -> Tensor:
    """Concatenate temporal and semantic embeddings per node (that order).

    ``temporal`` is (B, S, M); ``semantic`` is (S, P), constant across the
    batch, or None when semantics are ablated.
    """
    if semantic is None:
        return temporal
    b, s, _ = temporal.shape
    if semantic.shape[0] != s:
        raise ConfigurationError(
            f"row mismatch: temporal has {s} nodes, semantic {semantic.shape[0]}")
    sem = ad.broadcast_to(semantic.reshape((1, s, semantic.shape[1])),
                          (b, s, semantic.shape[1]))
    return ad.concat([temporal, sem], axis=-1)
