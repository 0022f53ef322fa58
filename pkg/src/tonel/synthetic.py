"""Synthetic labelled corpora for tests, demos and trend checks.

Each cluster ``c`` is Gaussian with mean ``m + mu_c`` and covariance
``jitter**2 * v_c v_c^T + (spread**2 / dim) * I`` where ``v_c = m + mu_c``:

* ``mu_c`` has norm ``separation`` in a uniformly random direction;
* ``m`` is a direction shared by every document (norm ``offset``), the
  common component that off-the-shelf sentence encoders tend to produce;
* a per-document gain ``1 + jitter * N(0, 1)`` on ``v_c`` varies document
  norms, so MIPS favours "long" documents as real corpora do.

It is sampled as ``x = (1 + jitter * g) * v_c + spread / sqrt(dim) * e``.
Documents cycle through the clusters (balanced labels); queries draw their
cluster uniformly.  Everything comes from the ``SYNTH`` streams of ``seed``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .embedding_store import EmbeddingSet, Manifest, ManifestEntry, attach_labels, LabeledSet
from .errors import ConfigError


@dataclass
class SyntheticCorpus:
    docs: np.ndarray           # N x d float32
    queries: np.ndarray        # Q x d float32
    doc_labels: np.ndarray     # N int64
    query_labels: np.ndarray   # Q int64
    centers: np.ndarray        # C x d float64, cluster means including the shared offset

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]

    def doc_ids(self) -> list[str]:
        return [f"doc{i}" for i in range(self.docs.shape[0])]

    def query_ids(self) -> list[str]:
        return [f"q{i}" for i in range(self.queries.shape[0])]

    def manifest(self) -> Manifest:
        return Manifest([
            ManifestEntry(i, f"synthetic document {n} (cluster {c})", int(c))
            for n, (i, c) in enumerate(zip(self.doc_ids(), self.doc_labels))
        ])

    def query_manifest(self) -> Manifest:
        return Manifest([
            ManifestEntry(i, f"synthetic query {n} (cluster {c})", int(c))
            for n, (i, c) in enumerate(zip(self.query_ids(), self.query_labels))
        ])

    def labeled(self) -> LabeledSet:
        emb = EmbeddingSet(self.docs, self.doc_ids())
        return attach_labels(emb, self.manifest(), n_classes=self.n_clusters)


def make_corpus(n_docs: int = 1500, n_queries: int = 300, n_clusters: int = 15, dim: int = 384,
                separation: float = 1.0, spread: float = 0.8, offset: float = 1.5,
                jitter: float = 0.4, seed: int = 0) -> SyntheticCorpus:
    if min(n_docs, n_clusters, dim) < 1 or n_queries < 0:
        raise ConfigError("n_docs, n_clusters and dim must be positive, n_queries non-negative")
    if min(separation, spread, offset, jitter) < 0:
        raise ConfigError("separation, spread, offset and jitter must be non-negative")

    def direction(gen, k):
        u = gen.standard_normal((k, dim))
        return u / np.linalg.norm(u, axis=1, keepdims=True)

    g = rngmod.stream(seed, rngmod.SYNTH, 0)
    centers = separation * direction(g, n_clusters) + offset * direction(g, 1)

    def draw(labels, part):
        gen = rngmod.stream(seed, rngmod.SYNTH, part)
        gain = 1.0 + jitter * gen.standard_normal((labels.size, 1))
        e = gen.standard_normal((labels.size, dim))
        return (gain * centers[labels] + spread / np.sqrt(dim) * e).astype(np.float32)

    doc_labels = np.arange(n_docs, dtype=np.int64) % n_clusters
    query_labels = rngmod.stream(seed, rngmod.SYNTH, 3).integers(0, n_clusters, n_queries).astype(np.int64)
    return SyntheticCorpus(draw(doc_labels, 1), draw(query_labels, 2), doc_labels, query_labels, centers)


def make_blobs(n: int, n_clusters: int, dim: int, separation: float, spread: float,
               seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic blobs with per-coordinate stddev ``spread``; centres are
    at least ``separation`` apart (coordinate-wise grid offsets)."""
    if n_clusters > dim + 1:
        raise ConfigError("make_blobs places centres on simplex-like axes; need n_clusters <= dim + 1")
    centers = np.zeros((n_clusters, dim))
    centers[1:, :n_clusters - 1] = np.eye(n_clusters - 1) * separation
    gen = rngmod.stream(seed, rngmod.SYNTH, 4)
    labels = np.arange(n, dtype=np.int64) % n_clusters
    x = centers[labels] + spread * gen.standard_normal((n, dim))
    return x.astype(np.float32), labels
