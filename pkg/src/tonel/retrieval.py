"""MIPS retrieval on (noisy) stored embeddings, scored against a clean oracle.

The oracle ranks documents by inner product of the original full-precision
embeddings.  A method (trained projector, PCA, identity) maps documents and
queries to the stored space; documents are quantized and read back through
the device-noise model, queries are quantized but never noised.

Metrics, per query, averaged over queries:

* ``acc@1``  - system top-1 equals oracle top-1;
* ``prec@5`` - ``|system top-5 & oracle top-5| / 5``;
* ``ndcg@5`` - graded gain ``6 - oracle_rank`` for the oracle's top 5
  (0 otherwise), DCG = sum (2**gain - 1) / log2(i + 1), normalised by the
  oracle's own DCG.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from . import __version__
from . import rng as rngmod
from .cim_noise import NoiseConfig, perturb_matrix
from .errors import KTooLarge, KTooSmall, MissingText, QueryMismatch, ShapeMismatch
from .quantizer import INT8, QuantConfig, quantize_rows

PROMPT_SEPARATOR = "\n\n"


@dataclass
class RetrievalResult:
    query_id: str | int
    indices: np.ndarray  # top-k document indices, best first
    scores: np.ndarray   # matching inner products, non-increasing


def _as_matrix(docs) -> np.ndarray:
    return np.asarray(getattr(docs, "data", docs))


def mips_scores(docs, queries) -> np.ndarray:
    """Q x N inner products in float64."""
    d = _as_matrix(docs).astype(np.float64, copy=False)
    q = _as_matrix(queries).astype(np.float64, copy=False)
    if d.ndim != 2 or q.ndim != 2 or d.shape[1] != q.shape[1]:
        raise ShapeMismatch(f"document matrix {d.shape} and queries {q.shape} disagree")
    return q @ d.T


def rank(scores: np.ndarray, k: int | None = None) -> np.ndarray:
    """Row-wise descending order; equal scores keep ascending document index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order if k is None else order[..., :k]


def mips_topk_batch(docs, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
    d = _as_matrix(docs)
    if not 1 <= k <= d.shape[0]:
        raise KTooLarge(f"k={k} must be in [1, N={d.shape[0]}]")
    s = mips_scores(d, queries)
    idx = rank(s, k)
    return idx, np.take_along_axis(s, idx, axis=1)


def mips_topk(docs, query, k: int, query_id: str | int = 0) -> RetrievalResult:
    q = np.asarray(query)
    if q.ndim != 1:
        raise ShapeMismatch(f"query must be a vector, got shape {q.shape}")
    idx, sc = mips_topk_batch(docs, q[None, :], k)
    return RetrievalResult(query_id, idx[0], sc[0])


@dataclass
class OracleRanking:
    rankings: np.ndarray  # Q x N, each row a permutation of document indices

    def top(self, k: int) -> np.ndarray:
        return self.rankings[:, :k]

    def __len__(self) -> int:
        return self.rankings.shape[0]


def oracle_rankings(full_set, queries) -> OracleRanking:
    """Full clean MIPS ranking of every document for every query."""
    return OracleRanking(rank(mips_scores(full_set, queries)))


# -- metrics --------------------------------------------------------------

def _system_matrix(results) -> np.ndarray:
    if isinstance(results, np.ndarray):
        return results if results.ndim == 2 else results[:, None]
    return np.stack([np.asarray(r.indices) for r in results])


def _check(system: np.ndarray, oracle: OracleRanking, k: int) -> None:
    if system.shape[0] != len(oracle):
        raise QueryMismatch(f"{system.shape[0]} system rankings vs {len(oracle)} oracle rankings")
    if system.shape[1] < k:
        raise KTooSmall(f"need at least {k} retrieved documents per query, got {system.shape[1]}")
    if oracle.rankings.shape[1] < k:
        raise KTooSmall(f"need at least {k} documents, got {oracle.rankings.shape[1]}")


def per_query_acc_at_1(results, oracle: OracleRanking) -> np.ndarray:
    s = _system_matrix(results)
    _check(s, oracle, 1)
    return (s[:, 0] == oracle.rankings[:, 0]).astype(np.float64)


def per_query_prec_at_5(results, oracle: OracleRanking) -> np.ndarray:
    s = _system_matrix(results)
    _check(s, oracle, 5)
    top_s, top_o = s[:, :5], oracle.top(5)
    hits = (top_s[:, :, None] == top_o[:, None, :]).any(axis=2).sum(axis=1)
    return hits / 5.0


_DISCOUNT = 1.0 / np.log2(np.arange(2, 7))           # positions 1..5
_IDEAL_DCG = float(((2.0 ** np.arange(5, 0, -1) - 1) * _DISCOUNT).sum())


def per_query_ndcg_at_5(results, oracle: OracleRanking) -> np.ndarray:
    s = _system_matrix(results)
    _check(s, oracle, 5)
    top_s, top_o = s[:, :5], oracle.top(5)
    match = top_s[:, :, None] == top_o[:, None, :]             # Q x 5 (system pos) x 5 (oracle pos)
    gain = (match * np.arange(5, 0, -1)[None, None, :]).sum(axis=2)
    dcg = ((2.0 ** gain - 1.0) * _DISCOUNT).sum(axis=1)
    return dcg / _IDEAL_DCG


def acc_at_1(results, oracle: OracleRanking) -> float:
    return float(per_query_acc_at_1(results, oracle).mean())


def prec_at_5(results, oracle: OracleRanking) -> float:
    return float(per_query_prec_at_5(results, oracle).mean())


def ndcg_at_5(results, oracle: OracleRanking) -> float:
    return float(per_query_ndcg_at_5(results, oracle).mean())


def random_rankings(n_queries: int, n_docs: int, k: int, seed: int = 0) -> np.ndarray:
    """Top-k lists of a uniformly random ranker, for reference rows."""
    gen = rngmod.stream(seed, rngmod.RANDOM_RANKER)
    return np.stack([gen.choice(n_docs, size=k, replace=False) for _ in range(n_queries)])


# -- methods --------------------------------------------------------------

class Projector(Protocol):
    name: str
    quantized: bool

    def embed(self, x: np.ndarray) -> np.ndarray: ...


@dataclass
class IdentityProjector:
    """Use the input embeddings as they are; ``quantized=False`` is the oracle itself."""

    name: str = "identity"
    quantized: bool = True

    def embed(self, x):
        return np.asarray(x, dtype=np.float32)


@dataclass
class TonelProjector:
    model: object
    name: str = "tonel"
    quantized: bool = True

    def embed(self, x):
        from .model import project
        return project(self.model, x).astype(np.float32)


@dataclass
class PcaProjector:
    model: object
    name: str = "pca"
    quantized: bool = True

    def embed(self, x):
        from .baselines import pca_project
        return pca_project(self.model, x).astype(np.float32)


# -- experiment -----------------------------------------------------------

@dataclass
class EvalReport:
    method: str
    device: str
    sigma_scale: float
    noisy_fraction: float
    seed: int
    n_docs: int
    n_queries: int
    k: int
    n_noisy: int
    acc_at_1: float
    prec_at_5: float
    ndcg_at_5: float
    per_query_resampling: bool = False
    version: str = __version__
    per_query: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["per_query"] is None:
            del d["per_query"]
        return d


def make_grid(profiles, noisy_fractions: Sequence[float] = (1.0,), sigma_scales: Sequence[float] = (1.0,),
              seed: int = 0, per_query: bool = False) -> list[NoiseConfig]:
    return [NoiseConfig(p, s, f, seed, per_query)
            for p in profiles for f in noisy_fractions for s in sigma_scales]


def run_experiment(projector: Projector, docs, queries, grid: Sequence[NoiseConfig], k: int = 5,
                   quant: QuantConfig = INT8, oracle: OracleRanking | None = None,
                   per_query_detail: bool = False) -> list[EvalReport]:
    """One report per grid point: embed, quantize, perturb, retrieve, score against the oracle."""
    full_docs, full_q = _as_matrix(docs), _as_matrix(queries)
    if full_docs.shape[1] != full_q.shape[1]:
        raise ShapeMismatch(f"documents have dim {full_docs.shape[1]}, queries {full_q.shape[1]}")
    n = full_docs.shape[0]
    if not 5 <= k <= n:
        raise KTooSmall(f"k must be in [5, N={n}] to score prec@5 / ndcg@5")
    if oracle is None:
        oracle = oracle_rankings(full_docs, full_q)
    dz = projector.embed(full_docs)
    qz = projector.embed(full_q)
    if projector.quantized:
        stored = quantize_rows(dz, quant)
        qz = quantize_rows(qz, quant).dequantize()
    reports = []
    for cfg in grid:
        if not projector.quantized:
            if cfg.noisy_fraction > 0 and cfg.sigma_scale > 0:
                raise ShapeMismatch(f"method {projector.name!r} stores no codes; only clean grids apply")
            idx, _ = mips_topk_batch(dz, qz, k)
            noisy = np.zeros(0, dtype=np.int64)
        elif cfg.per_query:
            rows = []
            for j in range(qz.shape[0]):
                mat, noisy = perturb_matrix(stored, cfg, query_index=j)
                rows.append(mips_topk_batch(mat, qz[j:j + 1], k)[0][0])
            idx = np.stack(rows)
        else:
            mat, noisy = perturb_matrix(stored, cfg)
            idx, _ = mips_topk_batch(mat, qz, k)
        a, p, g = (per_query_acc_at_1(idx, oracle), per_query_prec_at_5(idx, oracle),
                   per_query_ndcg_at_5(idx, oracle))
        detail = None
        if per_query_detail:
            detail = {"acc_at_1": a.tolist(), "prec_at_5": p.tolist(), "ndcg_at_5": g.tolist(),
                      "top_k": idx.tolist()}
        reports.append(EvalReport(
            method=projector.name, device=cfg.profile.name, sigma_scale=cfg.sigma_scale,
            noisy_fraction=cfg.noisy_fraction, seed=cfg.seed, n_docs=n, n_queries=qz.shape[0], k=k,
            n_noisy=int(noisy.size), acc_at_1=float(a.mean()), prec_at_5=float(p.mean()),
            ndcg_at_5=float(g.mean()), per_query_resampling=cfg.per_query, per_query=detail,
        ))
    return reports


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    cols = ["method", "device", "noisy_fraction", "sigma_scale", "seed", "acc_at_1", "prec_at_5", "ndcg_at_5"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in reports:
        d = r.to_dict()
        w.writerow([f"{d[c]:.6f}" if isinstance(d[c], float) else d[c] for c in cols])
    return buf.getvalue()


# -- prompts --------------------------------------------------------------

def assemble_prompt(query_text: str, retrieved_texts: Sequence[str | None],
                    separator: str = PROMPT_SEPARATOR) -> str:
    """Retrieved documents in rank order, then the query, joined by ``separator``."""
    for i, t in enumerate(retrieved_texts):
        if t is None:
            raise MissingText(f"retrieved document at rank {i + 1} has no text")
    if query_text is None:
        raise MissingText("query has no text")
    return separator.join([*retrieved_texts, query_text])
