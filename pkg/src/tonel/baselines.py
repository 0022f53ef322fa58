"""PCA baseline: same quantizer, noise model and evaluation as the trained projector."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .embedding_store import _read_bytes, _write_bytes
from .errors import BadHeader, BadMagic, ConfigError, DataError, ShapeMismatch, TruncatedPayload


class RankDeficientWarning(UserWarning):
    """Fewer than ``d_out`` directions carry variance; the rest are padding."""


@dataclass
class PcaModel:
    mean: np.ndarray                # d_in
    components: np.ndarray          # d_in x d_out, orthonormal columns
    explained_variance: np.ndarray  # d_out, non-increasing
    degenerate: np.ndarray          # d_out bool, True for zero-variance padding

    @property
    def d_in(self) -> int:
        return self.components.shape[0]

    @property
    def d_out(self) -> int:
        return self.components.shape[1]


def _round_robin_orders(n: int) -> list[np.ndarray]:
    """Layouts for one Jacobi sweep over ``n`` (even) indices.

    In layout ``o`` the pairs are ``(o[i], o[i + n/2])``; across the n-1
    layouts every pair occurs exactly once (circle method).
    """
    players = list(range(n))
    half = n // 2
    orders = []
    for _ in range(n - 1):
        orders.append(np.array(players[:half] + players[half:][::-1]))
        players = [players[0], players[-1]] + players[1:-1]
    return orders


def jacobi_eigh(a: np.ndarray, tol: float = 1e-13, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    A sweep visits every off-diagonal pair once in round-robin order.  The
    matrix is kept permuted so that a round's pairs sit at ``(i, i + n/2)``
    and all of that round's rotations apply as block-wise elementwise
    updates.  Only elementwise arithmetic is used, so the result does not
    depend on BLAS threading.  Returns ``(eigenvalues, eigenvectors)``
    unsorted.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeMismatch("jacobi_eigh needs a square matrix")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max(initial=0))):
        raise DataError("jacobi_eigh needs a symmetric matrix")
    if n <= 1:
        return np.diag(a).copy(), np.eye(n)
    m = n + (n % 2)
    if m != n:
        a = np.pad(a, ((0, 1), (0, 1)))
    h = m // 2
    orders = _round_robin_orders(m)
    # moves[r] re-indexes layout r into layout r+1 (the last one wraps to the first)
    pos = [np.argsort(o) for o in orders]
    moves = [orders[(r + 1) % len(orders)] for r in range(len(orders))]
    moves = [pos[r][moves[r]] for r in range(len(orders))]

    cur = orders[0]
    b = a[np.ix_(cur, cur)]
    v = np.eye(m)[:, cur]
    scale = max(np.linalg.norm(a), 1e-300)
    idx = np.arange(h)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(b * b) - np.sum(np.diag(b) ** 2), 0.0))
        if off <= tol * scale:
            break
        for r in range(len(orders)):
            apq = b[idx, idx + h]
            app = b[idx, idx]
            aqq = b[idx + h, idx + h]
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                theta = (aqq - app) / (2.0 * apq)
                t = np.where(np.abs(theta) > 1e150, 0.5 / theta,
                             np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0)))
            t = np.where(apq == 0, 0.0, np.where(theta == 0, 1.0, t))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # B <- J^T B J, J = [[diag(c), diag(s)], [diag(-s), diag(c)]] in this layout
            left, right = b[:, :h].copy(), b[:, h:]
            b[:, :h] = left * c - right * s
            b[:, h:] = left * s + right * c
            top, bot = b[:h].copy(), b[h:]
            b[:h] = c[:, None] * top - s[:, None] * bot
            b[h:] = s[:, None] * top + c[:, None] * bot
            b[idx, idx + h] = 0.0
            b[idx + h, idx] = 0.0
            left, right = v[:, :h].copy(), v[:, h:]
            v[:, :h] = left * c - right * s
            v[:, h:] = left * s + right * c
            mv = moves[r]
            b = b.take(mv, axis=0).take(mv, axis=1)
            v = v.take(mv, axis=1)
    # undo the layout permutation (we are back at orders[0] after each full sweep)
    inv = np.argsort(orders[0])
    vals = np.diag(b)[inv]
    vecs = v[:, inv]
    return vals[:n].copy(), vecs[:n, :n].copy()


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def pca_fit(data, d_out: int, solver: str = "eigh", rank_tol: float = 1e-10) -> PcaModel:
    """Top-``d_out`` principal directions of the (N-1)-normalised covariance.

    ``solver`` is ``"eigh"`` (LAPACK) or ``"jacobi"`` (:func:`jacobi_eigh`,
    pure elementwise numpy; exact but slow beyond a few hundred dims).
    Each component's largest-magnitude entry is made positive.  Directions
    whose variance is below ``rank_tol`` times the largest are flagged
    degenerate and their variance clamped to zero.
    """
    x = np.asarray(getattr(data, "data", data), dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected an N x d matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise DataError("PCA needs at least two rows")
    if not 1 <= d_out <= min(n, d):
        raise ConfigError(f"d_out={d_out} must be in [1, min(N, d_in)={min(n, d)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1)
    cov = (cov + cov.T) / 2.0
    if solver == "jacobi":
        vals, vecs = jacobi_eigh(cov)
    elif solver == "eigh":
        vals, vecs = np.linalg.eigh(cov)
    else:
        raise ConfigError(f"unknown PCA solver {solver!r}")
    order = np.lexsort((np.arange(d), -vals))[:d_out]
    vals, vecs = vals[order], _fix_signs(vecs[:, order])
    top = max(vals.max(initial=0.0), 0.0)
    degenerate = vals <= rank_tol * top if top > 0 else np.ones(d_out, dtype=bool)
    vals = np.where(degenerate, 0.0, vals)
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} of {d_out} PCA components have zero variance",
                      RankDeficientWarning, stacklevel=2)
    return PcaModel(mean, vecs, vals, degenerate)


def pca_project(model: PcaModel, x) -> np.ndarray:
    """``components^T (x - mean)`` for a vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.d_in:
        raise ShapeMismatch(f"expected last dim {model.d_in}, got {x.shape[-1]}")
    return (x - model.mean) @ model.components


# "TPCA" | u32 version | u32 d_in | u32 d_out | f32 mean | f32 components | f32 variances | u8 degenerate
_TPCA = struct.Struct("<4sIII")


def save_pca(model: PcaModel, path) -> None:
    _write_bytes(path, [
        _TPCA.pack(b"TPCA", 1, model.d_in, model.d_out),
        np.ascontiguousarray(model.mean, "<f4").tobytes(),
        np.ascontiguousarray(model.components, "<f4").tobytes(),
        np.ascontiguousarray(model.explained_variance, "<f4").tobytes(),
        np.ascontiguousarray(model.degenerate, np.uint8).tobytes(),
    ])


def load_pca(path) -> PcaModel:
    buf = _read_bytes(path)
    if buf[:4] != b"TPCA":
        raise BadMagic(f"{path}: expected magic b'TPCA' at byte 0")
    if len(buf) < _TPCA.size:
        raise TruncatedPayload(f"{path}: header truncated")
    _, version, d_in, d_out = _TPCA.unpack_from(buf, 0)
    if version != 1:
        raise BadHeader(f"{path}: unsupported version {version}")
    sizes = [4 * d_in, 4 * d_in * d_out, 4 * d_out, d_out]
    if len(buf) != _TPCA.size + sum(sizes):
        raise TruncatedPayload(f"{path}: payload size does not match header")
    o = _TPCA.size
    mean = np.frombuffer(buf, "<f4", d_in, o).astype(np.float64)
    o += sizes[0]
    comps = np.frombuffer(buf, "<f4", d_in * d_out, o).reshape(d_in, d_out).astype(np.float64)
    o += sizes[1]
    var = np.frombuffer(buf, "<f4", d_out, o).astype(np.float64)
    o += sizes[2]
    deg = np.frombuffer(buf, np.uint8, d_out, o).astype(bool)
    return PcaModel(mean, comps, var, deg)
