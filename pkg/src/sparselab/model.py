"""Tiny pre-norm encoder-decoder transformer and its Adam optimizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, BOS = 0, 1
FIRST_DATA_TOKEN = 2


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_seq_len: int = 16
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{name} must be a positive int, got {v!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size <= FIRST_DATA_TOKEN:
            raise ConfigError("vocab_size must leave room for PAD and BOS")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned int, got {self.seed}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    prunable: bool
    fan_in: int
    fan_out: int

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values


@dataclass
class ParamRegistry:
    """Ordered named parameters; matrices are prunable, vectors are not."""

    entries: dict[str, ParamEntry] = field(default_factory=dict)

    def add(self, name: str, values: np.ndarray, fan_in: int = 0, fan_out: int = 0) -> None:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        values = np.asarray(values, dtype=np.float64)
        prunable = values.ndim >= 2
        if prunable and (fan_in < 1 or fan_out < 1):
            raise ValueError(f"{name}: prunable entries need fan_in/fan_out")
        self.entries[name] = ParamEntry(
            name, Tensor(values, requires_grad=True, name=name), prunable, fan_in, fan_out
        )

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name].tensor

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self.entries.values())

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def prunable(self) -> list[ParamEntry]:
        return [e for e in self.entries.values() if e.prunable]

    def zero_grad(self) -> None:
        for e in self.entries.values():
            e.tensor.grad = None

    def state(self) -> dict[str, np.ndarray]:
        """Copy of every parameter array, keyed by name."""
        return {n: e.values.copy() for n, e in self.entries.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.entries):
            raise KeyError("state names do not match registry")
        for n, e in self.entries.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != e.values.shape:
                raise T.ShapeError(f"{n}: shape {arr.shape} != {e.values.shape}")
            e.tensor.values = arr.copy()

    def copy(self) -> "ParamRegistry":
        out = ParamRegistry()
        for e in self:
            out.add(e.name, e.values.copy(), e.fan_in, e.fan_out)
        return out

    def count(self, prunable_only: bool = False) -> int:
        return sum(e.values.size for e in self if e.prunable or not prunable_only)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def build_model(cfg: ModelConfig) -> ParamRegistry:
    """Create all parameters; matrices are Glorot-uniform from ``cfg.seed``.

    Weight matrices are stored (fan_in, fan_out) and applied as ``x @ W``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    reg = ParamRegistry()
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size

    def matrix(name, n_in, n_out):
        reg.add(name, _glorot(rng, n_in, n_out, (n_in, n_out)), n_in, n_out)

    def vector(name, n, fill=0.0):
        reg.add(name, np.full(n, fill))

    def norm(prefix):
        vector(f"{prefix}.gain", d, 1.0)
        vector(f"{prefix}.bias", d)

    def attention(prefix):
        for proj in ("q", "k", "v", "o"):
            matrix(f"{prefix}.w_{proj}", d, d)
            vector(f"{prefix}.b_{proj}", d)

    def feed_forward(prefix):
        matrix(f"{prefix}.w_1", d, f)
        vector(f"{prefix}.b_1", f)
        matrix(f"{prefix}.w_2", f, d)
        vector(f"{prefix}.b_2", d)

    matrix("embedding", v, d)
    for i in range(cfg.n_layers):
        p = f"enc.{i}"
        norm(f"{p}.ln_attn")
        attention(f"{p}.attn")
        norm(f"{p}.ln_ff")
        feed_forward(f"{p}.ff")
    norm("enc.ln_out")
    for i in range(cfg.n_layers):
        p = f"dec.{i}"
        norm(f"{p}.ln_self")
        attention(f"{p}.self")
        norm(f"{p}.ln_cross")
        attention(f"{p}.cross")
        norm(f"{p}.ln_ff")
        feed_forward(f"{p}.ff")
    norm("dec.ln_out")
    matrix("out.w", d, v)
    vector("out.b", v)
    return reg


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d_model)
    out = np.zeros((length, d_model))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)[:, : (d_model - d_model // 2)]
    return out


def _linear(reg, x: Tensor, w: str, b: str) -> Tensor:
    return T.add(T.matmul(x, reg[w]), reg[b])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, d = x.shape
    return T.transpose(T.reshape(x, (b, l, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def _attention(reg, prefix, q_in: Tensor, kv_in: Tensor, n_heads: int, mask=None) -> Tensor:
    q = _split_heads(_linear(reg, q_in, f"{prefix}.w_q", f"{prefix}.b_q"), n_heads)
    k = _split_heads(_linear(reg, kv_in, f"{prefix}.w_k", f"{prefix}.b_k"), n_heads)
    v = _split_heads(_linear(reg, kv_in, f"{prefix}.w_v", f"{prefix}.b_v"), n_heads)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = T.add_constant(scores, mask)
    ctx = _merge_heads(T.matmul(T.softmax_rows(scores), v))
    return _linear(reg, ctx, f"{prefix}.w_o", f"{prefix}.b_o")


def _norm(reg, x, prefix):
    return T.layer_norm(x, reg[f"{prefix}.gain"], reg[f"{prefix}.bias"], 1e-5)


def _ff(reg, x, prefix):
    h = T.relu(_linear(reg, x, f"{prefix}.w_1", f"{prefix}.b_1"))
    return _linear(reg, h, f"{prefix}.w_2", f"{prefix}.b_2")


def _embed(reg, ids: np.ndarray, d_model: int) -> Tensor:
    x = T.scale(T.embedding(reg["embedding"], ids), math.sqrt(d_model))
    return T.add_constant(x, sinusoidal_positions(ids.shape[1], d_model))


def forward_logits(reg: ParamRegistry, cfg: ModelConfig, src: np.ndarray, tgt_in: np.ndarray) -> Tensor:
    """Logits of shape (batch, tgt_len, vocab) for teacher-forced decoding."""
    src = np.asarray(src)
    tgt_in = np.asarray(tgt_in)
    for label, arr in (("source", src), ("target", tgt_in)):
        if arr.ndim != 2:
            raise T.ShapeError(f"{label} batch must be 2-D, got shape {arr.shape}")
        if arr.shape[1] > cfg.max_seq_len:
            raise LengthError(f"{label} length {arr.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    h = cfg.n_heads
    x = _embed(reg, src, cfg.d_model)
    for i in range(cfg.n_layers):
        p = f"enc.{i}"
        xn = _norm(reg, x, f"{p}.ln_attn")
        x = T.add(x, _attention(reg, f"{p}.attn", xn, xn, h))
        x = T.add(x, _ff(reg, _norm(reg, x, f"{p}.ln_ff"), f"{p}.ff"))
    memory = _norm(reg, x, "enc.ln_out")

    n = tgt_in.shape[1]
    causal = np.triu(np.full((n, n), -1e9), k=1)
    y = _embed(reg, tgt_in, cfg.d_model)
    for i in range(cfg.n_layers):
        p = f"dec.{i}"
        yn = _norm(reg, y, f"{p}.ln_self")
        y = T.add(y, _attention(reg, f"{p}.self", yn, yn, h, causal))
        y = T.add(y, _attention(reg, f"{p}.cross", _norm(reg, y, f"{p}.ln_cross"), memory, h))
        y = T.add(y, _ff(reg, _norm(reg, y, f"{p}.ln_ff"), f"{p}.ff"))
    y = _norm(reg, y, "dec.ln_out")
    # Scaled so an untrained model starts near uniform predictions.
    return T.add(T.scale(T.matmul(y, reg["out.w"]), 1.0 / math.sqrt(cfg.d_model)), reg["out.b"])


def shift_right(tgt: np.ndarray) -> np.ndarray:
    tgt = np.asarray(tgt)
    return np.concatenate([np.full((tgt.shape[0], 1), BOS, dtype=tgt.dtype), tgt[:, :-1]], axis=1)


def forward_loss(reg: ParamRegistry, cfg: ModelConfig, src: np.ndarray, tgt: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy on the target side."""
    tgt = np.asarray(tgt)
    logits = forward_logits(reg, cfg, src, shift_right(tgt))
    b, n, v = logits.shape
    return T.cross_entropy_loss(T.reshape(logits, (b * n, v)), tgt.reshape(-1))


def evaluate(reg: ParamRegistry, cfg: ModelConfig, batches) -> tuple[float, float]:
    """(mean loss, token accuracy) under teacher forcing over ``batches``."""
    total_loss = 0.0
    correct = 0
    count = 0
    with T.no_grad():
        for src, tgt in batches:
            logits = forward_logits(reg, cfg, src, shift_right(tgt))
            b, n, v = logits.shape
            loss = T.cross_entropy_loss(T.reshape(logits, (b * n, v)), tgt.reshape(-1))
            total_loss += loss.item() * b * n
            correct += int((logits.values.argmax(axis=-1) == tgt).sum())
            count += b * n
    return total_loss / count, correct / count


# ------------------------------------------------------------------ optimizer


def lr(t: int, w: int, base: float) -> float:
    """``base / max(t, w)``: flat during warmup, then inverse-time decay."""
    if t < 0 or w < 1:
        raise ValueError(f"lr needs t >= 0 and w >= 1, got t={t}, w={w}")
    return base / max(t, w)


@dataclass
class OptimizerState:
    base_lr: float = 0.1
    warmup: int = 10
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_registry(cls, reg: ParamRegistry, **hyper) -> "OptimizerState":
        state = cls(**hyper)
        for e in reg:
            state.m[e.name] = np.zeros_like(e.values)
            state.v[e.name] = np.zeros_like(e.values)
        return state

    def current_lr(self) -> float:
        return lr(self.t, self.warmup, self.base_lr)


def optimizer_step(reg: ParamRegistry, state: OptimizerState) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    missing = [e.name for e in reg if e.tensor.grad is None]
    if missing:
        raise RuntimeError(f"optimizer_step: no gradient for {missing[:3]}")
    step_lr = state.current_lr()
    b1, b2 = state.beta1, state.beta2
    k = state.t + 1
    c1 = 1.0 - b1**k
    c2 = 1.0 - b2**k
    for e in reg:
        g = e.tensor.grad
        m = state.m[e.name]
        v = state.v[e.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        e.tensor.values = e.values - step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.t += 1


def reset_optimizer(state: OptimizerState) -> None:
    state.t = 0
    for buf in (state.m, state.v):
        for arr in buf.values():
            arr.fill(0.0)
