"""Checkpoints and their versioned binary container.

Layout (all integers little-endian)::

    magic "SLCKPT01" | u16 version | u32 header length | header (UTF-8 JSON)
    | f64 parameter payloads in manifest order
    | f64 first/second moment payloads in manifest order (if present)
    | packed 1-bit masks for prunable entries, LSB first, byte aligned (if present)
    | sha256 of everything above
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import OptimizerState, ParamRegistry
from .pruning import MaskSet
from .sparse_store import FormatError, seal, unseal

MAGIC = b"SLCKPT01"
VERSION = 1


@dataclass
class Checkpoint:
    id: str
    step: int
    params: ParamRegistry
    optimizer: OptimizerState
    mask: MaskSet | None = None
    lineage: str | None = None

    @classmethod
    def capture(cls, id: str, reg: ParamRegistry, state: OptimizerState,
                mask: MaskSet | None = None, lineage: str | None = None) -> "Checkpoint":
        """Deep copy of the live training state."""
        return cls(id, state.t, reg.copy(), copy_optimizer(state),
                   mask.copy() if mask is not None else None, lineage)

    def registry(self) -> ParamRegistry:
        return self.params.copy()

    def check_mask(self) -> None:
        if self.mask is None:
            return
        self.mask.check_covers(self.params)
        for e in self.params.prunable():
            if np.any(e.values[self.mask[e.name] == 0.0] != 0.0):
                raise FormatError(f"{self.id}: {e.name} has nonzero masked entries")


def copy_optimizer(state: OptimizerState) -> OptimizerState:
    return OptimizerState(
        base_lr=state.base_lr, warmup=state.warmup, beta1=state.beta1, beta2=state.beta2,
        eps=state.eps, t=state.t,
        m={k: v.copy() for k, v in state.m.items()},
        v={k: v.copy() for k, v in state.v.items()},
    )


def to_bytes(ckpt: Checkpoint) -> bytes:
    reg = ckpt.params
    opt = ckpt.optimizer
    has_moments = bool(opt.m)
    header = {
        "format_version": VERSION,
        "id": ckpt.id,
        "step": ckpt.step,
        "lineage": ckpt.lineage,
        "manifest": [
            {"name": e.name, "shape": list(e.values.shape), "prunable": e.prunable,
             "fan_in": e.fan_in, "fan_out": e.fan_out}
            for e in reg
        ],
        "optimizer": {"t": opt.t, "base_lr": opt.base_lr, "warmup": opt.warmup,
                      "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        "has_moments": has_moments,
        "has_mask": ckpt.mask is not None,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(head)), head]
    for e in reg:
        parts.append(np.ascontiguousarray(e.values).astype("<f8").tobytes())
    if has_moments:
        for e in reg:
            parts.append(opt.m[e.name].astype("<f8").tobytes())
            parts.append(opt.v[e.name].astype("<f8").tobytes())
    if ckpt.mask is not None:
        for e in reg.prunable():
            bits = ckpt.mask[e.name].reshape(-1) != 0.0
            parts.append(np.packbits(bits, bitorder="little").tobytes())
    return seal(b"".join(parts))


def from_bytes(blob: bytes) -> Checkpoint:
    body = unseal(blob, MAGIC)
    pos = len(MAGIC)
    version, head_len = struct.unpack_from("<HI", body, pos)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos += 6
    header = json.loads(body[pos:pos + head_len].decode())
    pos += head_len

    def take(n_bytes: int) -> bytes:
        nonlocal pos
        if pos + n_bytes > len(body):
            raise FormatError("truncated checkpoint")
        chunk = body[pos:pos + n_bytes]
        pos += n_bytes
        return chunk

    def take_f64(shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    reg = ParamRegistry()
    for item in header["manifest"]:
        reg.add(item["name"], take_f64(tuple(item["shape"])), item["fan_in"], item["fan_out"])
        if reg.entries[item["name"]].prunable != item["prunable"]:
            raise FormatError(f"{item['name']}: prunable flag inconsistent with shape")
    o = header["optimizer"]
    opt = OptimizerState(base_lr=o["base_lr"], warmup=o["warmup"], beta1=o["beta1"],
                         beta2=o["beta2"], eps=o["eps"], t=o["t"])
    if header["has_moments"]:
        for e in reg:
            opt.m[e.name] = take_f64(e.values.shape)
            opt.v[e.name] = take_f64(e.values.shape)
    mask = None
    if header["has_mask"]:
        masks = {}
        for e in reg.prunable():
            n = e.values.size
            bits = np.unpackbits(np.frombuffer(take((n + 7) // 8), dtype=np.uint8),
                                 count=n, bitorder="little")
            masks[e.name] = bits.astype(np.float64).reshape(e.values.shape)
        mask = MaskSet(masks)
    if pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return Checkpoint(header["id"], header["step"], reg, opt, mask, header["lineage"])


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
