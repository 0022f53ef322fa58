import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from tonel.embedding_store import (
    EmbeddingSet,
    Manifest,
    ManifestEntry,
    attach_labels,
    load_embeddings,
    load_manifest,
    load_quantized,
    parse_embeddings,
    save_embeddings,
    save_manifest,
    save_quantized,
)
from tonel.errors import (
    BadHeader,
    BadMagic,
    DataError,
    FormatError,
    IdMismatch,
    NonFiniteValue,
    TruncatedPayload,
)


def _bytes(data, ids=None):
    data = np.asarray(data, dtype="<f4")
    n, d = data.shape
    ids = ids or [f"d{i}" for i in range(n)]
    out = struct.pack("<4sIQI", b"TEMB", 1, n, d) + data.tobytes()
    for i in ids:
        raw = i.encode()
        out += struct.pack("<I", len(raw)) + raw
    return out


def test_load_small_file(tmp_path):
    p = tmp_path / "e.temb"
    p.write_bytes(_bytes([[1, 0, 0], [0, 1, 0]]))
    emb = load_embeddings(p)
    assert (emb.count, emb.dim) == (2, 3)
    assert emb.ids == ("d0", "d1")
    assert np.array_equal(emb.data, [[1, 0, 0], [0, 1, 0]])


def test_payload_one_row_short():
    buf = _bytes(np.ones((3, 4)))
    header = struct.pack("<4sIQI", b"TEMB", 1, 4, 4)
    with pytest.raises(TruncatedPayload):
        parse_embeddings(header + buf[20:])


def test_nan_names_row():
    data = np.zeros((8, 3), np.float32)
    data[5, 1] = np.nan
    with pytest.raises(NonFiniteValue) as exc:
        parse_embeddings(_bytes(data))
    assert exc.value.row == 5
    assert "5" in str(exc.value)


def test_bad_magic():
    buf = bytearray(_bytes(np.ones((1, 2))))
    buf[0:4] = b"XEMB"
    with pytest.raises(BadMagic):
        parse_embeddings(bytes(buf))


def test_bad_version():
    buf = bytearray(_bytes(np.ones((1, 2))))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(BadHeader):
        parse_embeddings(bytes(buf))


def test_empty_set_round_trip(tmp_path):
    emb = EmbeddingSet(np.zeros((0, 384), np.float32), [])
    save_embeddings(emb, tmp_path / "e.temb")
    back = load_embeddings(tmp_path / "e.temb")
    assert back.count == 0 and back.dim == 384


def test_large_round_trip_hash(tmp_path):
    data = np.random.default_rng(0).standard_normal((1470, 384)).astype(np.float32)
    emb = EmbeddingSet.from_array(data)
    save_embeddings(emb, tmp_path / "e.temb")
    back = load_embeddings(tmp_path / "e.temb")
    assert hashlib.sha256(back.data.tobytes()).digest() == hashlib.sha256(data.tobytes()).digest()
    assert back.ids == emb.ids


finite_f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12), elements=finite_f32),
       st.text(min_size=0, max_size=6))
def test_round_trip_is_bit_exact(tmp_path_factory, data, prefix):
    ids = [f"{prefix}{i}" for i in range(data.shape[0])]
    if data.shape[1] == 0:
        return
    emb = EmbeddingSet(data, ids)
    p = tmp_path_factory.mktemp("rt") / "e.temb"
    save_embeddings(emb, p)
    back = load_embeddings(p)
    assert back.data.tobytes() == data.tobytes()
    assert list(back.ids) == ids


@given(st.binary(max_size=200))
def test_random_bytes_never_crash(buf):
    try:
        parse_embeddings(buf)
    except DataError:
        pass


@given(st.data())
def test_mutated_files_raise_typed_errors(data):
    good = _bytes(np.arange(12, dtype=np.float32).reshape(3, 4), ["a", "bb", "ccc"])
    pos = data.draw(st.integers(0, len(good) - 1))
    kind = data.draw(st.sampled_from(["flip", "cut", "extend"]))
    if kind == "flip":
        buf = bytearray(good)
        buf[pos] ^= data.draw(st.integers(1, 255))
        buf = bytes(buf)
    elif kind == "cut":
        buf = good[:pos]
    else:
        buf = good + data.draw(st.binary(min_size=1, max_size=8))
    try:
        emb = parse_embeddings(buf)
    except DataError:
        return
    assert emb.count >= 0  # some flips (inside float payload) stay valid


def test_duplicate_ids_rejected():
    with pytest.raises(DataError):
        EmbeddingSet(np.zeros((2, 2), np.float32), ["a", "a"])


def test_quantized_round_trip(tmp_path):
    codes = np.array([[127, -63, 0], [-128, 1, 2]], np.int8)
    scales = np.array([0.01, 1.0], np.float32)
    save_quantized(codes, scales, ["x", "y"], tmp_path / "q.tq08")
    c, s, ids = load_quantized(tmp_path / "q.tq08")
    assert np.array_equal(c, codes) and np.array_equal(s, scales) and ids == ("x", "y")


def test_manifest_round_trip(tmp_path):
    m = Manifest([ManifestEntry("a", "hello", 0, 3), ManifestEntry("b"), ManifestEntry("c", None, 1)])
    save_manifest(m, tmp_path / "m.jsonl")
    assert load_manifest(tmp_path / "m.jsonl") == m


def test_manifest_error_names_line(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"id": "a"}\n{"id": "b", "true_label": -2}\n')
    with pytest.raises(FormatError, match="line 2"):
        load_manifest(p)


def test_attach_labels_infers_class_count():
    emb = EmbeddingSet.from_array(np.zeros((4, 2)))
    man = Manifest([ManifestEntry(i, true_label=j % 2) for j, i in enumerate(emb.ids)])
    ls = attach_labels(emb, man)
    assert ls.n_classes == 2
    labels, c = ls.labels("true")
    assert c == 2 and labels.tolist() == [0, 1, 0, 1]


def test_attach_labels_fifteen_classes():
    emb = EmbeddingSet.from_array(np.zeros((30, 2)))
    man = Manifest([ManifestEntry(i, true_label=j % 15) for j, i in enumerate(emb.ids)])
    assert attach_labels(emb, man).n_classes == 15


def test_attach_labels_extra_id():
    emb = EmbeddingSet.from_array(np.zeros((2, 2)))
    man = Manifest.from_ids([*emb.ids, "extra"])
    with pytest.raises(IdMismatch):
        attach_labels(emb, man)


def test_missing_labels_are_flagged():
    emb = EmbeddingSet.from_array(np.zeros((3, 2)))
    man = Manifest([ManifestEntry(emb.ids[0], true_label=1), ManifestEntry(emb.ids[1]),
                    ManifestEntry(emb.ids[2], pseudo_label=0)])
    ls = attach_labels(emb, man)
    assert ls.has_true.tolist() == [True, False, False]
    assert ls.has_pseudo.tolist() == [False, False, True]


def test_loaded_set_is_read_only(tmp_path):
    emb = EmbeddingSet.from_array(np.ones((2, 2)))
    with pytest.raises(ValueError):
        emb.data[0, 0] = 3.0
