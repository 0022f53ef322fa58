"""Embedding sets, manifests and their on-disk formats.

``TEMB`` (full-precision embeddings), little-endian::

    b"TEMB" | u32 version=1 | u64 N | u32 dim | f32[N*dim] row-major | N x (u32 len, utf-8 id)

``TQ08`` (quantized embeddings) shares the layout but stores ``i8[N*dim]``
codes followed by ``f32[N]`` per-row scales before the ids.

Manifests are JSON Lines, one object per document, in embedding order::

    {"id": "doc-0", "text": "...", "true_label": 3, "pseudo_label": 7}
"""

from __future__ import annotations

import json
import logging
import os
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadHeader,
    BadMagic,
    FormatError,
    IdMismatch,
    IoFailure,
    NonFiniteValue,
    ShapeMismatch,
    TruncatedPayload,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")  # magic, version, N, dim
_LEN = struct.Struct("<I")

DEFAULT_DIM = 384


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EmbeddingSet:
    """Immutable N x d float32 matrix with one unique id per row."""

    data: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeMismatch(f"embedding matrix must be 2-D, got shape {data.shape}")
        if data.shape[1] < 1:
            raise ShapeMismatch("embedding dim must be positive")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != data.shape[0]:
            raise ShapeMismatch(f"{len(ids)} ids for {data.shape[0]} rows")
        if len(set(ids)) != len(ids):
            dup = next(i for i, n in Counter(ids).items() if n > 1)
            raise IdMismatch(f"duplicate id {dup!r}")
        _check_finite(data)
        data = _freeze(np.array(data, dtype=np.float32, order="C", copy=True))
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", ids)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.count

    @classmethod
    def from_array(cls, data, ids: Sequence[str] | None = None, prefix: str = "doc") -> "EmbeddingSet":
        data = np.asarray(data, dtype=np.float32)
        if data.ndim == 1 and data.size == 0:
            data = data.reshape(0, DEFAULT_DIM)
        if ids is None:
            ids = [f"{prefix}-{i}" for i in range(data.shape[0])]
        return cls(data, tuple(ids))

    def subset(self, rows: Sequence[int]) -> "EmbeddingSet":
        rows = np.asarray(rows, dtype=np.int64)
        return EmbeddingSet(self.data[rows], tuple(self.ids[i] for i in rows))


# A query set has the same structure; the alias documents intent.
QuerySet = EmbeddingSet


def _check_finite(data: np.ndarray) -> None:
    bad = ~np.isfinite(data)
    if bad.any():
        row = int(np.argwhere(bad)[0, 0])
        raise NonFiniteValue(f"non-finite value in row {row}", row=row)


# -- binary I/O -----------------------------------------------------------

def _encode_ids(ids: Iterable[str]) -> bytes:
    parts = []
    for i in ids:
        raw = i.encode("utf-8")
        parts.append(_LEN.pack(len(raw)))
        parts.append(raw)
    return b"".join(parts)


def _decode_ids(buf: bytes | memoryview, offset: int, n: int) -> tuple[tuple[str, ...], int]:
    ids = []
    size = len(buf)
    for row in range(n):
        if offset + _LEN.size > size:
            raise TruncatedPayload(f"id table truncated at byte {offset} (entry {row})")
        (length,) = _LEN.unpack_from(buf, offset)
        offset += _LEN.size
        if offset + length > size:
            raise TruncatedPayload(f"id {row} truncated at byte {offset}")
        try:
            ids.append(bytes(buf[offset:offset + length]).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"id {row} at byte {offset} is not valid UTF-8") from exc
        offset += length
    return tuple(ids), offset


def _read_header(buf, magic: bytes, path) -> tuple[int, int]:
    if bytes(buf[:4]) != magic:
        raise BadMagic(f"{path}: expected magic {magic!r} at byte 0, found {bytes(buf[:4])!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayload(f"{path}: header truncated at byte {len(buf)}")
    _, version, n, dim = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise BadHeader(f"{path}: unsupported version {version} at byte 4")
    if dim == 0:
        raise BadHeader(f"{path}: dim must be positive (byte 16)")
    return n, dim


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _write_bytes(path, chunks: Iterable[bytes]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def parse_embeddings(buf: bytes, path="<bytes>") -> EmbeddingSet:
    """Decode a ``TEMB`` byte string.  Never raises anything but :class:`DataError`."""
    n, dim = _read_header(buf, b"TEMB", path)
    start = _HEADER.size
    need = n * dim * 4
    if len(buf) - start < need:
        have_rows = (len(buf) - start) // (dim * 4)
        raise TruncatedPayload(
            f"{path}: payload truncated at byte {len(buf)}: "
            f"expected {n} rows of dim {dim}, found {have_rows}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=n * dim, offset=start).reshape(n, dim)
    _check_finite(data)
    ids, end = _decode_ids(buf, start + need, n)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after byte {end}")
    try:
        return EmbeddingSet(data, ids)
    except IdMismatch as exc:
        raise FormatError(f"{path}: {exc}") from exc


def load_embeddings(path) -> EmbeddingSet:
    return parse_embeddings(_read_bytes(path), path)


def save_embeddings(emb: EmbeddingSet, path) -> None:
    header = _HEADER.pack(b"TEMB", FORMAT_VERSION, emb.count, emb.dim)
    payload = np.ascontiguousarray(emb.data, dtype="<f4").tobytes()
    _write_bytes(path, [header, payload, _encode_ids(emb.ids)])


def save_quantized(codes: np.ndarray, scales: np.ndarray, ids: Sequence[str], path) -> None:
    codes = np.ascontiguousarray(codes, dtype=np.int8)
    scales = np.ascontiguousarray(scales, dtype="<f4")
    if codes.ndim != 2 or scales.shape != (codes.shape[0],) or len(ids) != codes.shape[0]:
        raise ShapeMismatch("codes, scales and ids disagree on row count")
    header = _HEADER.pack(b"TQ08", FORMAT_VERSION, codes.shape[0], codes.shape[1])
    _write_bytes(path, [header, codes.tobytes(), scales.tobytes(), _encode_ids(ids)])


def load_quantized(path) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """Return ``(codes int8 N x d, scales float32 N, ids)`` from a ``TQ08`` file."""
    buf = _read_bytes(path)
    n, dim = _read_header(buf, b"TQ08", path)
    start = _HEADER.size
    need = n * dim + 4 * n
    if len(buf) - start < need:
        raise TruncatedPayload(f"{path}: payload truncated at byte {len(buf)}")
    codes = np.frombuffer(buf, dtype=np.int8, count=n * dim, offset=start).reshape(n, dim).copy()
    scales = np.frombuffer(buf, dtype="<f4", count=n, offset=start + n * dim).astype(np.float32)
    bad = ~np.isfinite(scales) | (scales <= 0)
    if bad.any():
        row = int(np.argmax(bad))
        raise NonFiniteValue(f"{path}: invalid scale in row {row}", row=row)
    ids, end = _decode_ids(buf, start + need, n)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after byte {end}")
    return codes, scales, ids


# -- manifests ------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    text: str | None = None
    true_label: int | None = None
    pseudo_label: int | None = None

    def to_json(self) -> str:
        obj: dict = {"id": self.id}
        if self.text is not None:
            obj["text"] = self.text
        if self.true_label is not None:
            obj["true_label"] = self.true_label
        if self.pseudo_label is not None:
            obj["pseudo_label"] = self.pseudo_label
        return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    @classmethod
    def from_ids(cls, ids: Iterable[str]) -> "Manifest":
        return cls([ManifestEntry(i) for i in ids])

    def copy(self) -> "Manifest":
        return Manifest([replace(e) for e in self.entries])


def _label(obj: dict, key: str, lineno: int) -> int | None:
    v = obj.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise FormatError(f"manifest line {lineno}: {key} must be a non-negative integer, got {v!r}")
    return v


def load_manifest(path) -> Manifest:
    entries = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"manifest line {lineno}: {exc.msg}") from exc
            if not isinstance(obj, dict) or not isinstance(obj.get("id"), str):
                raise FormatError(f"manifest line {lineno}: missing string field 'id'")
            text = obj.get("text")
            if text is not None and not isinstance(text, str):
                raise FormatError(f"manifest line {lineno}: text must be a string")
            entries.append(ManifestEntry(
                obj["id"], text,
                _label(obj, "true_label", lineno),
                _label(obj, "pseudo_label", lineno),
            ))
    return Manifest(entries)


def save_manifest(manifest: Manifest, path) -> None:
    body = "".join(e.to_json() + "\n" for e in manifest.entries)
    _write_bytes(path, [body.encode("utf-8")])


# -- joined view ----------------------------------------------------------

@dataclass(frozen=True)
class LabeledSet:
    """Embeddings joined with their manifest.

    Missing labels are stored as -1; ``has_true`` / ``has_pseudo`` flag
    which entries carry a label of each kind.
    """

    embeddings: EmbeddingSet
    manifest: Manifest
    true_labels: np.ndarray
    pseudo_labels: np.ndarray
    n_classes: int
    n_clusters: int

    @property
    def has_true(self) -> np.ndarray:
        return self.true_labels >= 0

    @property
    def has_pseudo(self) -> np.ndarray:
        return self.pseudo_labels >= 0

    def labels(self, source: str) -> tuple[np.ndarray, int]:
        if source == "true":
            return self.true_labels, self.n_classes
        if source == "pseudo":
            return self.pseudo_labels, self.n_clusters
        raise ValueError(f"unknown label source {source!r}")


def attach_labels(emb: EmbeddingSet, manifest: Manifest,
                  n_classes: int | None = None, n_clusters: int | None = None) -> LabeledSet:
    """Join embeddings and manifest by id; class counts are inferred as max+1 unless given."""
    if list(emb.ids) != manifest.ids:
        extra = set(manifest.ids) - set(emb.ids)
        missing = set(emb.ids) - set(manifest.ids)
        if extra or missing:
            raise IdMismatch(
                f"manifest ids differ from embedding ids "
                f"(extra: {sorted(extra)[:5]}, missing: {sorted(missing)[:5]})"
            )
        raise IdMismatch("manifest ids are not in embedding order")
    true = np.array([-1 if e.true_label is None else e.true_label for e in manifest], dtype=np.int64)
    pseudo = np.array([-1 if e.pseudo_label is None else e.pseudo_label for e in manifest], dtype=np.int64)
    c = int(true.max()) + 1 if true.size and true.max() >= 0 else 0
    k = int(pseudo.max()) + 1 if pseudo.size and pseudo.max() >= 0 else 0
    if n_classes is not None:
        if c > n_classes:
            raise FormatError(f"true label {c - 1} outside declared class count {n_classes}")
        c = n_classes
    if n_clusters is not None:
        if k > n_clusters:
            raise FormatError(f"pseudo label {k - 1} outside declared cluster count {n_clusters}")
        k = n_clusters
    return LabeledSet(emb, manifest, _freeze(true), _freeze(pseudo), c, k)
