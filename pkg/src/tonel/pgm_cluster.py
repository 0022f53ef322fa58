"""K-means pseudo-labels for documents without task annotations."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .embedding_store import Manifest, _read_bytes, _write_bytes
from .errors import (
    BadHeader,
    BadMagic,
    KTooLarge,
    LengthMismatch,
    NonFiniteInput,
    ShapeMismatch,
    TruncatedPayload,
)

log = logging.getLogger(__name__)


@dataclass
class ClusterModel:
    centroids: np.ndarray          # K x d float64
    assignments: np.ndarray        # N int64
    inertia: float
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)
    degenerate: bool = False       # fewer than K distinct points

    @property
    def K(self) -> int:
        return self.centroids.shape[0]


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """N x K squared Euclidean distances from explicit differences (exact zeros, stable ties)."""
    n, k = x.shape[0], c.shape[0]
    out = np.empty((n, k))
    step = max(1, (1 << 22) // max(1, k * x.shape[1]))
    for lo in range(0, n, step):
        diff = x[lo:lo + step, None, :] - c[None, :, :]
        out[lo:lo + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeans_pp(x: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each step draws ``2 + floor(ln k)`` D^2 candidates
    and keeps the one that lowers the potential most (first on ties)."""
    n = x.shape[0]
    trials = 2 + int(np.log(k))
    chosen = [int(gen.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a centroid already: pick any unused one
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(unused[gen.integers(unused.size)]) if unused.size else int(gen.integers(n))
            closest = np.minimum(closest, ((x - x[nxt]) ** 2).sum(1))
        else:
            cand = np.searchsorted(np.cumsum(closest), gen.random(trials) * total, side="right")
            cand = np.minimum(cand, n - 1)
            best = None
            for c in cand:
                trial = np.minimum(closest, ((x - x[c]) ** 2).sum(1))
                pot = trial.sum()
                if best is None or pot < best[0]:
                    best = (pot, int(c), trial)
            _, nxt, closest = best
        chosen.append(nxt)
    return x[chosen].copy()


def _assign(x, c):
    d = _sq_dists(x, c)
    a = np.argmin(d, axis=1)  # first minimum: lowest index wins ties
    return a, float(d[np.arange(x.shape[0]), a].sum()), d


def kmeans_fit(data, K: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-6,
               normalize: bool = False) -> ClusterModel:
    """Lloyd's algorithm from a k-means++ start.

    Stops when the relative centroid shift ``||C_new - C|| / ||C||`` drops
    below ``tol`` or after ``max_iters`` updates.  A cluster that empties
    is reseeded at the point farthest from its assigned centroid.
    """
    x = np.asarray(getattr(data, "data", data), dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected an N x d matrix, got shape {x.shape}")
    n = x.shape[0]
    if not 1 <= K <= n:
        raise KTooLarge(f"K={K} must be in [1, N={n}]")
    if not np.isfinite(x).all():
        raise NonFiniteInput("embeddings contain non-finite values")
    if normalize:
        x = _normalize(x)
    degenerate = np.unique(x, axis=0).shape[0] < K

    gen = rngmod.stream(seed, rngmod.KMEANS)
    c = _kmeans_pp(x, K, gen)
    history: list[float] = []
    it = 0
    while True:
        a, inertia, d = _assign(x, c)
        history.append(inertia)
        if it >= max_iters:
            break
        counts = np.bincount(a, minlength=K)
        for empty in np.flatnonzero(counts == 0):
            own = d[np.arange(n), a]
            far = int(np.argmax(own))
            if own[far] <= 0:
                break
            c[empty] = x[far]
            a, inertia, d = _assign(x, c)
            counts = np.bincount(a, minlength=K)
        new_c = c.copy()
        for j in range(K):
            members = np.flatnonzero(a == j)
            if members.size:
                new_c[j] = x[members].sum(0) / members.size
        shift = np.linalg.norm(new_c - c) / max(np.linalg.norm(c), 1e-300)
        c = new_c
        it += 1
        if shift < tol:
            a, inertia, _ = _assign(x, c)
            history.append(inertia)
            break
    return ClusterModel(c, a.astype(np.int64), inertia, it, history, bool(degenerate))


def assign(model: ClusterModel, x) -> int:
    """Nearest centroid by squared Euclidean distance, lowest index on ties."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.centroids.shape[1],):
        raise ShapeMismatch(f"expected a vector of length {model.centroids.shape[1]}, got {x.shape}")
    d = ((model.centroids - x) ** 2).sum(axis=1)
    return int(np.argmin(d))


def write_pseudo_labels(model: ClusterModel, manifest: Manifest) -> Manifest:
    """Copy of ``manifest`` with ``pseudo_label`` set from the assignments."""
    if len(model.assignments) != len(manifest):
        raise LengthMismatch(f"{len(model.assignments)} assignments for {len(manifest)} manifest entries")
    overwritten = sum(e.pseudo_label is not None for e in manifest)
    if overwritten:
        log.info("overwriting %d existing pseudo labels", overwritten)
    return Manifest([replace(e, pseudo_label=int(a)) for e, a in zip(manifest, model.assignments)])


def inertia_sweep(data, ks, seed: int = 0, **kw) -> list[tuple[int, float]]:
    """Inertia for several K, for elbow plots.  Reporting only; never picks K."""
    return [(k, kmeans_fit(data, k, seed=seed, **kw).inertia) for k in ks]


# "TKMN" | u32 version | u32 K | u32 d | f32 centroids
_TKMN = struct.Struct("<4sIII")


def save_clusters(model: ClusterModel, path) -> None:
    k, d = model.centroids.shape
    _write_bytes(path, [_TKMN.pack(b"TKMN", 1, k, d),
                        np.ascontiguousarray(model.centroids, dtype="<f4").tobytes()])


def load_centroids(path) -> np.ndarray:
    buf = _read_bytes(path)
    if buf[:4] != b"TKMN":
        raise BadMagic(f"{path}: expected magic b'TKMN' at byte 0")
    if len(buf) < _TKMN.size:
        raise TruncatedPayload(f"{path}: header truncated")
    _, version, k, d = _TKMN.unpack_from(buf, 0)
    if version != 1:
        raise BadHeader(f"{path}: unsupported version {version}")
    if len(buf) != _TKMN.size + 4 * k * d:
        raise TruncatedPayload(f"{path}: expected {k}x{d} centroids")
    return np.frombuffer(buf, "<f4", k * d, _TKMN.size).reshape(k, d).astype(np.float64)
