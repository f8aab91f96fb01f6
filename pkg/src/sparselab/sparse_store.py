"""Compressed sparse column encoding, memory accounting, and the sparse model file."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import ShapeError, Tensor

WIDTHS = (2, 4, 8)


class FormatError(ValueError):
    pass


@dataclass
class CscMatrix:
    n_rows: int
    n_cols: int
    col_ptr: np.ndarray
    row_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    def validate(self) -> None:
        cp, ri, v = self.col_ptr, self.row_idx, self.values
        if self.n_rows < 1 or self.n_cols < 1:
            raise FormatError(f"bad dimensions {self.n_rows}x{self.n_cols}")
        if cp.shape != (self.n_cols + 1,) or cp[0] != 0:
            raise FormatError("col_ptr must have n_cols+1 entries starting at 0")
        if np.any(np.diff(cp) < 0):
            raise FormatError("col_ptr must be non-decreasing")
        if not (cp[-1] == ri.shape[0] == v.shape[0]):
            raise FormatError(f"col_ptr[-1]={cp[-1]}, len(row_idx)={ri.shape[0]}, len(values)={v.shape[0]}")
        if ri.size and (ri.min() < 0 or ri.max() >= self.n_rows):
            raise FormatError("row index out of range")
        for j in range(self.n_cols):
            seg = ri[cp[j]:cp[j + 1]]
            if seg.size > 1 and np.any(np.diff(seg) <= 0):
                raise FormatError(f"row indices not strictly increasing in column {j}")
        if np.any((v == 0.0) & ~np.signbit(v)):
            raise FormatError("explicit +0.0 entries are not allowed")


def csc_encode(dense) -> CscMatrix:
    """All nonzero entries of a matrix in column-major order."""
    arr = np.asarray(dense.values if isinstance(dense, Tensor) else dense, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"csc_encode needs a rank-2 tensor, got shape {arr.shape}")
    n_rows, n_cols = arr.shape
    # Stored entries are those whose bit pattern is not +0.0, so -0.0 survives a round trip.
    present = (arr != 0.0) | np.signbit(arr)
    cols, rows = np.nonzero(present.T)
    col_ptr = np.zeros(n_cols + 1, dtype=np.int64)
    np.cumsum(np.bincount(cols, minlength=n_cols), out=col_ptr[1:])
    return CscMatrix(n_rows, n_cols, col_ptr, rows.astype(np.int64), arr[rows, cols].copy())


def csc_decode(sparse: CscMatrix) -> np.ndarray:
    sparse.validate()
    out = np.zeros((sparse.n_rows, sparse.n_cols))
    cols = np.repeat(np.arange(sparse.n_cols), np.diff(sparse.col_ptr))
    out[sparse.row_idx, cols] = sparse.values
    return out


def _check_widths(value_width: int, index_width: int) -> None:
    if value_width not in WIDTHS or index_width not in WIDTHS:
        raise ValueError(f"widths must be in {WIDTHS}, got {value_width}/{index_width}")


def memory_bytes(sparse: CscMatrix, value_width: int = 4, index_width: int = 4) -> int:
    _check_widths(value_width, index_width)
    return sparse.nnz * (value_width + index_width) + (sparse.n_cols + 1) * index_width


def dense_bytes(shape: Iterable[int], value_width: int = 4) -> int:
    n = 1
    for d in shape:
        n *= int(d)
    return n * value_width


@dataclass
class MemoryEntry:
    name: str
    shape: tuple[int, ...]
    dense_bytes: int
    csc_bytes: int | None
    encoding: str

    @property
    def chosen_bytes(self) -> int:
        return self.csc_bytes if self.encoding == "csc" else self.dense_bytes


@dataclass
class MemoryReport:
    value_width: int
    index_width: int
    entries: list[MemoryEntry] = field(default_factory=list)

    @property
    def dense_total(self) -> int:
        return sum(e.dense_bytes for e in self.entries)

    @property
    def total(self) -> int:
        return sum(e.chosen_bytes for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "value_width": self.value_width,
            "index_width": self.index_width,
            "dense_total": self.dense_total,
            "total": self.total,
            "entries": [
                {"name": e.name, "shape": list(e.shape), "dense_bytes": e.dense_bytes,
                 "csc_bytes": e.csc_bytes, "encoding": e.encoding}
                for e in self.entries
            ],
        }


def report_model_memory(reg, m=None, value_width: int = 4, index_width: int = 4) -> MemoryReport:
    """Cheaper of dense and CSC per matrix; vectors always dense.

    ``m`` is accepted for symmetry with the training API; the report counts the
    nonzeros actually present, so the mask must already be applied.
    """
    _check_widths(value_width, index_width)
    report = MemoryReport(value_width, index_width)
    for e in reg:
        shape = tuple(e.values.shape)
        dense = dense_bytes(shape, value_width)
        if e.prunable and e.values.ndim == 2:
            csc = memory_bytes(csc_encode(e.values), value_width, index_width)
            enc = "csc" if csc < dense else "dense"
            report.entries.append(MemoryEntry(e.name, shape, dense, csc, enc))
        else:
            report.entries.append(MemoryEntry(e.name, shape, dense, None, "dense"))
    return report


def transformer_base_manifest(vocab_size: int = 33_000, d_model: int = 512, d_ff: int = 2048,
                              n_layers: int = 6) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter shapes of a base-size encoder-decoder with shared embeddings."""
    out: list[tuple[str, tuple[int, ...]]] = [("embedding", (vocab_size, d_model))]

    def attn(p):
        for proj in "qkvo":
            out.append((f"{p}.w_{proj}", (d_model, d_model)))
            out.append((f"{p}.b_{proj}", (d_model,)))

    def norm(p):
        out.extend([(f"{p}.gain", (d_model,)), (f"{p}.bias", (d_model,))])

    def ff(p):
        out.extend([(f"{p}.w_1", (d_model, d_ff)), (f"{p}.b_1", (d_ff,)),
                    (f"{p}.w_2", (d_ff, d_model)), (f"{p}.b_2", (d_model,))])

    for i in range(n_layers):
        norm(f"enc.{i}.ln_attn"); attn(f"enc.{i}.attn"); norm(f"enc.{i}.ln_ff"); ff(f"enc.{i}.ff")
    norm("enc.ln_out")
    for i in range(n_layers):
        norm(f"dec.{i}.ln_self"); attn(f"dec.{i}.self")
        norm(f"dec.{i}.ln_cross"); attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln_ff"); ff(f"dec.{i}.ff")
    norm("dec.ln_out")
    return out


# --------------------------------------------------------------- sparse model file

SPARSE_MAGIC = b"SLSPARSE"
SPARSE_VERSION = 1
_KIND_DENSE, _KIND_CSC = 0, 1
# Payload encoding actually written; the accounting widths above are separate.
_FILE_VALUE_WIDTH, _FILE_INDEX_WIDTH = 8, 8


def seal(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


def unseal(blob: bytes, magic: bytes) -> bytes:
    if len(blob) < len(magic) + 32 or not blob.startswith(magic):
        raise FormatError("not a recognised file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checksum mismatch")
    return body


def write_sparse_model(path, reg) -> None:
    """Prunable matrices as CSC blocks, everything else as dense blocks."""
    parts = [SPARSE_MAGIC, struct.pack("<HI", SPARSE_VERSION, len(reg))]
    for e in reg:
        name = e.name.encode()
        shape = e.values.shape
        head = struct.pack("<H", len(name)) + name + struct.pack("<B", len(shape))
        head += struct.pack(f"<{len(shape)}Q", *shape)
        if e.prunable and e.values.ndim == 2:
            csc = csc_encode(e.values)
            parts.append(struct.pack("<B", _KIND_CSC) + head)
            parts.append(struct.pack("<QBB", csc.nnz, _FILE_VALUE_WIDTH, _FILE_INDEX_WIDTH))
            parts.append(csc.col_ptr.astype("<i8").tobytes())
            parts.append(csc.row_idx.astype("<i8").tobytes())
            parts.append(csc.values.astype("<f8").tobytes())
        else:
            parts.append(struct.pack("<B", _KIND_DENSE) + head)
            parts.append(np.ascontiguousarray(e.values).astype("<f8").tobytes())
    Path(path).write_bytes(seal(b"".join(parts)))


class _Reader:
    def __init__(self, body: bytes, pos: int):
        self.body = body
        self.pos = pos

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.body):
            raise FormatError("truncated file")
        out = struct.unpack_from(fmt, self.body, self.pos)
        self.pos += size
        return out

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.body):
            raise FormatError("truncated file")
        out = np.frombuffer(self.body, dtype=dtype, count=count, offset=self.pos).copy()
        self.pos += size
        return out

    def text(self) -> str:
        (n,) = self.unpack("<H")
        if self.pos + n > len(self.body):
            raise FormatError("truncated file")
        s = self.body[self.pos:self.pos + n].decode()
        self.pos += n
        return s


def read_sparse_model(path) -> dict[str, np.ndarray | CscMatrix]:
    """Blocks in file order: CSC blocks as ``CscMatrix``, dense as arrays."""
    body = unseal(Path(path).read_bytes(), SPARSE_MAGIC)
    r = _Reader(body, len(SPARSE_MAGIC))
    version, count = r.unpack("<HI")
    if version != SPARSE_VERSION:
        raise FormatError(f"unsupported sparse model version {version}")
    out: dict[str, np.ndarray | CscMatrix] = {}
    for _ in range(count):
        (kind,) = r.unpack("<B")
        name = r.text()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        if kind == _KIND_CSC:
            nnz, vw, iw = r.unpack("<QBB")
            if (vw, iw) != (_FILE_VALUE_WIDTH, _FILE_INDEX_WIDTH) or ndim != 2:
                raise FormatError(f"{name}: unsupported CSC block layout")
            csc = CscMatrix(shape[0], shape[1], r.array("<i8", shape[1] + 1),
                            r.array("<i8", nnz), r.array("<f8", nnz))
            csc.validate()
            out[name] = csc
        elif kind == _KIND_DENSE:
            n = int(np.prod(shape)) if shape else 1
            out[name] = r.array("<f8", n).reshape(shape)
        else:
            raise FormatError(f"unknown block kind {kind}")
    if r.pos != len(body):
        raise FormatError("trailing bytes after last block")
    return out


def load_sparse_dense(path) -> dict[str, np.ndarray]:
    return {n: csc_decode(b) if isinstance(b, CscMatrix) else b
            for n, b in read_sparse_model(path).items()}
