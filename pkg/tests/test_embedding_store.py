import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avclip.embedding_store import (
    EmbeddingMatrix,
    PairedDataset,
    PairEntry,
    PairManifest,
    decode_embeddings,
    encode_embeddings,
    l2_normalize_rows,
    read_embeddings,
    read_manifest,
    split_pairs,
    write_embeddings,
    write_manifest,
)
from avclip.errors import CorruptionError, DimensionError, FormatError, ValidationError


def _ds(n, dim=4):
    rng = np.random.default_rng(0)
    a = EmbeddingMatrix("audio", rng.standard_normal((n, dim)), dim)
    v = EmbeddingMatrix("video", rng.standard_normal((n, dim)), dim)
    return PairedDataset(a, v, PairManifest.identity(n))


def test_small_matrix_layout_and_roundtrip(tmp_path):
    m = EmbeddingMatrix("video", [[1, 2, 3], [4, 5, 6]], expected_dim=3)
    path = tmp_path / "m.emb"
    write_embeddings(path, m)
    raw = path.read_bytes()
    assert raw[:4] == b"EMB1"
    # version, tag length, "video", rows, dim, then 6 float32
    assert len(raw) - 4 == 45
    assert struct.unpack_from("<II", raw, 4) == (1, 5)
    assert raw[12:17] == b"video"
    assert struct.unpack_from("<II", raw, 17) == (2, 3)
    back = read_embeddings(path, expected_dim=3)
    assert back == m
    assert back.data.tobytes() == m.data.tobytes()


def test_empty_matrix_roundtrip(tmp_path):
    m = EmbeddingMatrix("video", np.zeros((0, 512)))
    write_embeddings(tmp_path / "e.emb", m)
    back = read_embeddings(tmp_path / "e.emb")
    assert back.rows == 0 and back.dim == 512


def test_nan_rejected_before_write():
    with pytest.raises(ValidationError, match="row 1, col 0"):
        EmbeddingMatrix("shared", [[1.0, 2.0], [np.nan, 0.0]])


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.emb"
    raw = encode_embeddings(EmbeddingMatrix("shared", np.ones((2, 2))))
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        read_embeddings(p)


def test_truncated_payload(tmp_path):
    m = EmbeddingMatrix("video", np.ones((10, 512)))
    raw = encode_embeddings(m)
    p = tmp_path / "t.emb"
    p.write_bytes(raw[:-512 * 4])
    with pytest.raises(CorruptionError):
        read_embeddings(p)


def test_nonfinite_in_file_names_position():
    raw = bytearray(encode_embeddings(EmbeddingMatrix("shared", np.zeros((3, 2)))))
    struct.pack_into("<f", raw, len(raw) - 4 * 3, float("inf"))  # row 1, col 1
    with pytest.raises(ValidationError, match="row 1, col 1"):
        decode_embeddings(bytes(raw))


def test_modality_dims_enforced():
    with pytest.raises(DimensionError):
        EmbeddingMatrix("audio", np.zeros((1, 512)))
    with pytest.raises(DimensionError):
        EmbeddingMatrix("goal", np.zeros((1, 527)))
    EmbeddingMatrix("audio", np.zeros((1, 527)))
    EmbeddingMatrix("audio", np.zeros((1, 16)), expected_dim=16)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(1, 6)),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_roundtrip_bit_exact(data):
    m = EmbeddingMatrix("shared", data)
    back = decode_embeddings(encode_embeddings(m))
    assert back.data.tobytes() == m.data.tobytes()


def test_normalize_examples(caplog):
    m = EmbeddingMatrix("shared", [[3, 4], [0, 0], [1, 0]])
    out, zero = l2_normalize_rows(m)
    np.testing.assert_allclose(out.data[0], [0.6, 0.8], atol=1e-7)
    np.testing.assert_array_equal(out.data[1], [0, 0])
    np.testing.assert_array_equal(out.data[2], [1, 0])
    assert zero.tolist() == [1]
    assert "zero-norm" in caplog.text


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3, width=32)))
def test_normalize_unit_and_idempotent(data):
    once, zero = l2_normalize_rows(EmbeddingMatrix("shared", data))
    twice, _ = l2_normalize_rows(once)
    norms = np.linalg.norm(once.data.astype(np.float64), axis=1)
    nz = np.setdiff1d(np.arange(len(norms)), zero)
    np.testing.assert_allclose(norms[nz], 1.0, atol=1e-6)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-7)


def test_split_floor_rule_and_determinism():
    ds = _ds(10)
    s = split_pairs(ds, 0.2, seed=3)
    tags = [e.split for e in s.manifest.entries]
    assert tags.count("test") == 2 and tags.count("train") == 8
    assert [e.split for e in split_pairs(ds, 0.2, seed=3).manifest.entries] == tags
    assert all(e.split == "train" for e in split_pairs(ds, 0.0, 1).manifest.entries)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.floats(0, 0.99), st.integers(0, 2**31))
def test_split_partitions(n, frac, seed):
    s = split_pairs(_ds(n), frac, seed)
    a_test, _ = s.manifest.indices("test")
    a_train, _ = s.manifest.indices("train")
    assert len(a_test) == int(np.floor(frac * n))
    assert sorted(np.concatenate([a_test, a_train]).tolist()) == list(range(n))


def test_split_empty_rejected():
    with pytest.raises(ValidationError):
        split_pairs(_ds(0), 0.1, 0)


def test_manifest_invariants(tmp_path):
    with pytest.raises(ValidationError):
        PairManifest([PairEntry("a", 0, 0, 0), PairEntry("a", 0, 1, 1)])
    with pytest.raises(ValidationError):
        PairManifest([PairEntry("a", 0, 0, 0), PairEntry("a", 1, 0, 1)])
    with pytest.raises(ValidationError):
        PairedDataset(_ds(2).audio, _ds(2).video, PairManifest([PairEntry("a", 0, 5, 0)]))
    ds = split_pairs(_ds(6), 0.5, 0)
    write_manifest(tmp_path / "p.json", ds.manifest)
    assert read_manifest(tmp_path / "p.json") == ds.manifest
    keys = set(json.loads((tmp_path / "p.json").read_text())[0])
    assert keys == {"source_id", "window_index", "audio_row", "video_row", "split"}


def test_subset_renumbers_rows():
    ds = split_pairs(_ds(10), 0.3, 0)
    test = ds.subset("test")
    a, v = ds.arrays("test")
    np.testing.assert_array_equal(test.audio.data, a)
    np.testing.assert_array_equal(test.video.data, v)
    assert [e.audio_row for e in test.manifest.entries] == [0, 1, 2]
