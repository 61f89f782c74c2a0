import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gateann.core import (BinLabel, Equality, FormatError, RangeBin, SearchParams, SingleLabel,
                          Subset, TagSet, VectorDataset, evaluate, l2_sq, predicate_from_json,
                          predicate_to_json, read_vectors, recall_at_k, write_vectors)


def test_l2_sq_examples():
    assert l2_sq([0, 0], [0, 0]) == 0
    assert l2_sq([1, 2], [4, 6]) == 25


def test_l2_sq_matches_coordinate_loop():
    rng = np.random.default_rng(11)
    a = rng.integers(0, 256, 128).astype(np.uint8)
    b = rng.integers(0, 256, 128).astype(np.uint8)
    expect = 0
    for x, y in zip(a.tolist(), b.tolist()):
        expect += (x - y) * (x - y)
    assert l2_sq(a, b) == expect  # exact for u8


def test_l2_sq_no_u8_wraparound():
    assert l2_sq(np.array([0], np.uint8), np.array([255], np.uint8)) == 255 ** 2


def test_l2_sq_dimension_mismatch():
    with pytest.raises(ValueError):
        l2_sq([1, 2], [1, 2, 3])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=16), st.data())
def test_l2_sq_identity_and_symmetry(a, data):
    b = data.draw(st.lists(st.floats(-1e3, 1e3), min_size=len(a), max_size=len(a)))
    assert l2_sq(a, a) == 0
    assert l2_sq(a, b) == l2_sq(b, a)
    assert l2_sq(a, b) >= 0


def test_evaluate_examples():
    assert evaluate(Equality(3), SingleLabel(3))
    assert not evaluate(Equality(3), SingleLabel(4))
    assert evaluate(Subset((7,)), TagSet((2, 7, 9)))
    assert not evaluate(Subset((2, 8)), TagSet((2, 7, 9)))
    assert evaluate(RangeBin(4), BinLabel(4))
    assert not evaluate(Subset((1,)), TagSet(()))


def test_evaluate_kind_mismatch():
    with pytest.raises(TypeError):
        evaluate(Subset((1,)), SingleLabel(1))
    with pytest.raises(TypeError):
        evaluate(Equality(1), TagSet((1,)))


def test_evaluate_pure():
    p, m = Subset((2, 9)), TagSet((2, 7, 9))
    assert [evaluate(p, m) for _ in range(5)] == [True] * 5


@settings(max_examples=10_000, deadline=None)
@given(st.sets(st.integers(0, 40), min_size=1, max_size=6), st.sets(st.integers(0, 40), max_size=12))
def test_subset_matches_set_oracle(q, tags):
    assert evaluate(Subset(tuple(sorted(q))), TagSet(tuple(sorted(tags)))) == (q <= tags)


def test_predicate_validation():
    with pytest.raises(ValueError):
        Subset(())
    with pytest.raises(ValueError):
        Subset((3, 2))
    with pytest.raises(ValueError):
        TagSet((1, 1))


@pytest.mark.parametrize("pred", [Equality(3), RangeBin(9), Subset((1, 5, 200))])
def test_predicate_json_round_trip(pred):
    assert predicate_from_json(predicate_to_json(pred)) == pred


def test_predicate_json_unknown_kind():
    with pytest.raises(FormatError):
        predicate_from_json({"kind": "nope"})


def test_search_params_validation():
    SearchParams(L=10, K=10, W=1)
    for bad in [dict(L=5, K=10), dict(L=10, K=0), dict(L=10, W=0), dict(L=10, mode="x")]:
        with pytest.raises(ValueError):
            SearchParams(**bad)


def test_recall_examples():
    t = list(range(10))
    assert recall_at_k(t, t, 10) == 1.0
    assert recall_at_k(list(range(10, 20)), t, 10) == 0.0
    assert recall_at_k([0, 1, 2, 3, 4, 5, 6, 90, 91, 92], t, 10) == pytest.approx(0.7)


def test_recall_short_truth_uses_true_count():
    assert recall_at_k([4, 8, 1], [4, 8], 10) == 1.0
    assert recall_at_k([4], [4, 8], 10) == 0.5
    assert recall_at_k([1, 2], [], 10) == 0.0


@pytest.mark.parametrize("dtype", [np.uint8, np.float32])
def test_vector_file_round_trip(tmp_path, dtype):
    rng = np.random.default_rng(0)
    ds = VectorDataset((rng.random((17, 5)) * 200).astype(dtype))
    write_vectors(ds, tmp_path / "v.vec")
    back = read_vectors(tmp_path / "v.vec")
    assert back.dtype == ds.dtype and np.array_equal(back.data, ds.data)


def test_vector_file_rejects_garbage(tmp_path):
    (tmp_path / "bad.vec").write_bytes(b"NOTAVEC!" + bytes(16))
    with pytest.raises(FormatError):
        read_vectors(tmp_path / "bad.vec")
    ds = VectorDataset(np.zeros((4, 3), np.uint8))
    write_vectors(ds, tmp_path / "t.vec")
    raw = (tmp_path / "t.vec").read_bytes()
    (tmp_path / "t.vec").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_vectors(tmp_path / "t.vec")


def test_dataset_invariants():
    with pytest.raises(ValueError):
        VectorDataset(np.zeros((0, 3), np.uint8))
    with pytest.raises(ValueError):
        VectorDataset(np.zeros((3,), np.uint8))
    with pytest.raises(ValueError):
        VectorDataset(np.zeros((2, 2), np.int32))
