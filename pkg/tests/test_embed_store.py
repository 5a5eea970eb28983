import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from embdistill.embed_store import (
    EmbeddingSet,
    align_pairs,
    read_embeddings,
    read_label_csv,
    read_tensor,
    write_embeddings,
    write_label_csv,
    write_tensor,
)
from embdistill.errors import DataError, FormatError


def test_empty_set_round_trips(tmp_path):
    s = EmbeddingSet([], np.zeros((0, 8)), 8)
    write_embeddings(tmp_path / "e.ssnd", s)
    back = read_embeddings(tmp_path / "e.ssnd")
    assert len(back) == 0 and back.dim == 8
    assert (tmp_path / "e.ssnd").stat().st_size == 20


def test_zero_matrix_file_size(tmp_path):
    ids = ["a", "bb", "ccc"]
    s = EmbeddingSet(ids, np.zeros((3, 4)))
    p = tmp_path / "z.ssnd"
    write_embeddings(p, s)
    # header 4+4+8+4, id table 3*(2)+1+2+3, payload 3*4*4
    assert p.stat().st_size == 20 + 12 + 48
    assert read_embeddings(p) == s


def test_header_layout(tmp_path):
    p = tmp_path / "h.ssnd"
    write_embeddings(p, EmbeddingSet(["x"], [[1.5, -2.0]]))
    raw = p.read_bytes()
    assert raw[:4] == b"SSND"
    assert struct.unpack("<IQI", raw[4:20]) == (1, 1, 2)
    assert struct.unpack("<H", raw[20:22]) == (1,)
    assert raw[22:23] == b"x"
    assert np.frombuffer(raw[23:], "<f4").tolist() == [1.5, -2.0]


def test_nan_rejected_before_writing(tmp_path):
    p = tmp_path / "n.ssnd"
    with pytest.raises(DataError):
        s = EmbeddingSet(["a"], [[0.0, np.nan]])
        write_embeddings(p, s)
    assert not p.exists()


def test_nan_injected_after_construction_is_caught(tmp_path):
    s = EmbeddingSet(["a"], [[0.0, 1.0]])
    s.data[0, 1] = np.inf
    with pytest.raises(DataError):
        write_embeddings(tmp_path / "x.ssnd", s)
    assert not list(tmp_path.iterdir())


def test_duplicate_ids_rejected():
    with pytest.raises(DataError, match="duplicate"):
        EmbeddingSet(["a", "a"], np.zeros((2, 2)))


def test_bad_magic(tmp_path):
    p = tmp_path / "b.ssnd"
    write_embeddings(p, EmbeddingSet(["a"], [[1.0]]))
    raw = bytearray(p.read_bytes())
    raw[:4] = b"NOPE"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_embeddings(p)


def test_bad_version(tmp_path):
    p = tmp_path / "v.ssnd"
    p.write_bytes(struct.pack("<4sIQI", b"SSND", 9, 0, 1))
    with pytest.raises(FormatError, match="version"):
        read_embeddings(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.ssnd"
    write_embeddings(p, EmbeddingSet(["a", "b"], np.ones((2, 3))))
    raw = bytearray(p.read_bytes())
    raw[8:16] = struct.pack("<Q", 5)  # claims 5 rows
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="truncated"):
        read_embeddings(p)


def test_duplicate_ids_in_file(tmp_path):
    p = tmp_path / "d.ssnd"
    blob = struct.pack("<4sIQI", b"SSND", 1, 2, 1)
    blob += struct.pack("<H", 1) + b"a" + struct.pack("<H", 1) + b"a"
    blob += np.zeros(2, "<f4").tobytes()
    p.write_bytes(blob)
    with pytest.raises(FormatError, match="duplicate"):
        read_embeddings(p)


def test_tensor_round_trip_is_float64_exact(tmp_path, rng):
    a = rng.normal(size=(3, 5))
    write_tensor(tmp_path / "t.ssnd", a)
    assert read_tensor(tmp_path / "t.ssnd").tobytes() == a.tobytes()
    b = rng.normal(size=7)
    write_tensor(tmp_path / "b.ssnd", b)
    assert read_tensor(tmp_path / "b.ssnd").ravel().tobytes() == b.tobytes()
    with pytest.raises(FormatError):
        read_embeddings(tmp_path / "t.ssnd")


ids_strategy = st.lists(
    st.text(min_size=1, max_size=12),
    min_size=0, max_size=6, unique=True,
)


@settings(max_examples=60, deadline=None)
@given(ids=ids_strategy, d=st.integers(1, 5), data=st.data())
def test_round_trip_property(tmp_path_factory, ids, d, data):
    mat = data.draw(
        arrays(np.float32, (len(ids), d), elements=st.floats(width=32, allow_nan=False, allow_infinity=False))
    )
    s = EmbeddingSet(ids, mat, d)
    p = tmp_path_factory.mktemp("rt") / "x.ssnd"
    write_embeddings(p, s)
    assert read_embeddings(p) == s


def test_align_identical():
    a = EmbeddingSet(["a", "b", "c"], np.eye(3))
    pd = align_pairs(a, a)
    assert pd.ids == ["a", "b", "c"]
    assert (pd.dropped_inputs, pd.dropped_targets) == (0, 0)


def test_align_partial_overlap():
    x = EmbeddingSet(["a", "b", "c"], [[1.0], [2.0], [3.0]])
    t = EmbeddingSet(["d", "c", "b"], [[40.0, 0], [30.0, 0], [20.0, 0]])
    pd = align_pairs(x, t)
    assert pd.ids == ["b", "c"]
    assert pd.inputs.ravel().tolist() == [2.0, 3.0]
    assert pd.targets[:, 0].tolist() == [20.0, 30.0]
    assert (pd.dropped_inputs, pd.dropped_targets) == (1, 1)


def test_align_disjoint():
    with pytest.raises(DataError):
        align_pairs(EmbeddingSet(["a"], [[1.0]]), EmbeddingSet(["b"], [[1.0]]))


def test_align_idempotent_and_order_stable():
    x = EmbeddingSet(["c", "a", "b"], [[3.0], [1.0], [2.0]])
    t = EmbeddingSet(["a", "b", "c"], [[1.0], [2.0], [3.0]])
    first = align_pairs(x, t)
    again = align_pairs(
        EmbeddingSet(first.ids, first.inputs), EmbeddingSet(first.ids, first.targets)
    )
    assert first.ids == again.ids == ["c", "a", "b"]
    np.testing.assert_array_equal(first.targets, again.targets)


def test_label_csv_round_trip(tmp_path):
    write_label_csv(tmp_path / "s.csv", ["a", "b"], np.array([2, 0]))
    ids, lab = read_label_csv(tmp_path / "s.csv")
    assert ids == ["a", "b"] and lab.tolist() == [2, 0]
    write_label_csv(tmp_path / "m.csv", ["a", "b"], np.array([[0, 1, 1], [1, 0, 0]]))
    ids, lab = read_label_csv(tmp_path / "m.csv")
    assert lab.tolist() == [[0, 1, 1], [1, 0, 0]]


def test_label_csv_bad_header(tmp_path):
    (tmp_path / "x.csv").write_text("name,cls\na,1\n")
    with pytest.raises(FormatError):
        read_label_csv(tmp_path / "x.csv")
