import math

import numpy as np
import pytest

from sparselab import model as M
from sparselab.pruning import apply_mask, magnitude_mask
from sparselab.sparse_store import (
    CscMatrix, FormatError, csc_decode, csc_encode, dense_bytes, load_sparse_dense, memory_bytes,
    read_sparse_model, report_model_memory, transformer_base_manifest, write_sparse_model,
)
from sparselab.tensor import ShapeError, Tensor


def brute_csc(a):
    """Column-by-column loop encoding used as an independent oracle."""
    col_ptr, rows, vals = [0], [], []
    for j in range(a.shape[1]):
        for i in range(a.shape[0]):
            if a[i, j] != 0.0 or math.copysign(1.0, a[i, j]) < 0:
                rows.append(i)
                vals.append(a[i, j])
        col_ptr.append(len(rows))
    return col_ptr, rows, vals


def test_encode_examples():
    z = csc_encode(np.zeros((3, 3)))
    assert z.nnz == 0 and z.col_ptr.tolist() == [0, 0, 0, 0]
    eye = csc_encode(Tensor(np.eye(2)))
    assert eye.col_ptr.tolist() == [0, 1, 2]
    assert eye.row_idx.tolist() == [0, 1]
    assert eye.values.tolist() == [1.0, 1.0]
    m = csc_encode(np.array([[0.0, 5.0], [7.0, 0.0]]))
    assert m.col_ptr.tolist() == [0, 1, 2]
    assert m.row_idx.tolist() == [1, 0]
    assert m.values.tolist() == [7.0, 5.0]


def test_encode_rejects_non_matrix():
    with pytest.raises(ShapeError):
        csc_encode(np.zeros(4))


def test_decode_empty_and_round_trip():
    assert np.array_equal(csc_decode(csc_encode(np.zeros((2, 5)))), np.zeros((2, 5)))
    rng = np.random.default_rng(0)
    a = rng.normal(size=(16, 16))
    a[rng.random((16, 16)) < 0.5] = 0.0
    assert csc_decode(csc_encode(a)).tobytes() == a.tobytes()


def test_encode_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = rng.normal(size=tuple(rng.integers(1, 9, size=2)))
        a[rng.random(a.shape) < 0.6] = 0.0
        c = csc_encode(a)
        col_ptr, rows, vals = brute_csc(a)
        assert c.col_ptr.tolist() == col_ptr
        assert c.row_idx.tolist() == rows
        assert c.values.tolist() == vals


def test_negative_zero_preserved():
    a = np.array([[0.0, -0.0], [1.5, 0.0]])
    back = csc_decode(csc_encode(a))
    assert back.tobytes() == a.tobytes()
    assert np.signbit(back[0, 1])


def test_decode_rejects_invalid():
    bad = CscMatrix(2, 2, np.array([0, 2, 1]), np.array([0]), np.array([1.0]))
    with pytest.raises(FormatError):
        csc_decode(bad)
    bad = CscMatrix(2, 1, np.array([0, 2]), np.array([1, 0]), np.array([1.0, 2.0]))
    with pytest.raises(FormatError):
        csc_decode(bad)
    bad = CscMatrix(2, 1, np.array([0, 1]), np.array([5]), np.array([1.0]))
    with pytest.raises(FormatError):
        csc_decode(bad)
    bad = CscMatrix(2, 1, np.array([0, 1]), np.array([0]), np.array([0.0]))
    with pytest.raises(FormatError):
        csc_decode(bad)


def test_memory_bytes_examples():
    a = np.zeros((4, 4))
    a.flat[:8] = 1.0
    assert memory_bytes(csc_encode(a), 4, 4) == 84
    assert memory_bytes(csc_encode(np.zeros((4, 4))), 4, 4) == 20
    with pytest.raises(ValueError):
        memory_bytes(csc_encode(a), 3, 4)


def test_memory_bytes_linear_in_nnz():
    rng = np.random.default_rng(3)
    for vw in (2, 4, 8):
        for iw in (2, 4, 8):
            a = rng.normal(size=(6, 5))
            a[rng.random(a.shape) < 0.5] = 0.0
            c = csc_encode(a)
            assert memory_bytes(c, vw, iw) == c.nnz * (vw + iw) + 6 * iw


def test_transformer_base_dense_memory_matches_table():
    shapes = [s for _, s in transformer_base_manifest()]
    n_params = sum(math.prod(s) for s in shapes)
    assert 60.5e6 < n_params < 61.5e6
    mib = sum(dense_bytes(s, 4) for s in shapes) / 2**20
    assert abs(mib - 234) / 234 <= 0.02
    assert abs(dense_bytes((60_900_000,), 4) / 2**20 - 234) / 234 <= 0.02


def _sparse_model(s, seed=0):
    reg = M.build_model(M.ModelConfig(seed=seed))
    if s > 0:
        apply_mask(reg, magnitude_mask(reg, s))
    return reg


def test_report_dense_and_sparse():
    reg = _sparse_model(0.0)
    rep = report_model_memory(reg)
    assert all(e.encoding == "dense" for e in rep.entries)
    assert rep.total == rep.dense_total == sum(e.dense_bytes for e in rep.entries)
    reg = _sparse_model(0.98)
    rep = report_model_memory(reg, value_width=4, index_width=2)
    matrices = [e for e in rep.entries if e.csc_bytes is not None]
    assert all(e.encoding == "csc" for e in matrices)
    matrix_dense = sum(e.dense_bytes for e in matrices)
    assert sum(e.chosen_bytes for e in matrices) < 0.1 * matrix_dense
    assert rep.total < 0.1 * rep.dense_total
    assert all(e.encoding == "dense" for e in rep.entries if e.csc_bytes is None)


def test_report_non_increasing_along_ladder():
    reg = M.build_model(M.ModelConfig(seed=4))
    totals = [report_model_memory(reg).total]
    mask = None
    for s in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 0.98):
        mask = magnitude_mask(reg, s, mask)
        apply_mask(reg, mask)
        totals.append(report_model_memory(reg).total)
    assert all(b <= a for a, b in zip(totals, totals[1:]))


def test_nnz_matches_mask_density():
    reg = _sparse_model(0.7)
    for e in reg.prunable():
        c = csc_encode(e.values)
        assert abs(c.nnz - 0.3 * e.values.size) <= 1


def test_sparse_model_file_round_trip(tmp_path):
    reg = _sparse_model(0.9)
    path = tmp_path / "model.spm"
    write_sparse_model(path, reg)
    blocks = read_sparse_model(path)
    assert list(blocks) == reg.names()
    assert all(isinstance(blocks[e.name], CscMatrix) for e in reg.prunable())
    dense = load_sparse_dense(path)
    for e in reg:
        assert dense[e.name].tobytes() == e.values.tobytes()
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        read_sparse_model(path)
