"""Masks, magnitude-based mask construction, sparsity schedules and sign transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .model import ConfigError, OptimizerState, ParamRegistry

LADDER = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 0.98)
_LADDER_TOL = 1e-9


class MonotonicityError(ValueError):
    """A requested mask would un-prune entries already removed."""


class MaskError(ValueError):
    """Mask does not cover the registry's prunable entries."""


class MaskSet(Mapping[str, np.ndarray]):
    """Binary keep-mask (1.0 keep, 0.0 pruned) per prunable parameter."""

    def __init__(self, masks: Mapping[str, np.ndarray]):
        self._masks = {}
        for name, m in masks.items():
            m = np.asarray(m, dtype=np.float64)
            if not np.all((m == 0.0) | (m == 1.0)):
                raise MaskError(f"{name}: mask entries must be exactly 0.0 or 1.0")
            self._masks[name] = m

    @classmethod
    def ones(cls, reg: ParamRegistry) -> "MaskSet":
        return cls({e.name: np.ones_like(e.values) for e in reg.prunable()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self._masks[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._masks)

    def __len__(self) -> int:
        return len(self._masks)

    def total(self) -> int:
        return sum(m.size for m in self._masks.values())

    def pruned(self) -> int:
        return sum(int(m.size - np.count_nonzero(m)) for m in self._masks.values())

    def sparsity(self) -> float:
        total = self.total()
        return self.pruned() / total if total else 0.0

    def layer_sparsity(self) -> dict[str, float]:
        return {n: 1.0 - np.count_nonzero(m) / m.size for n, m in self._masks.items()}

    def copy(self) -> "MaskSet":
        return MaskSet({n: m.copy() for n, m in self._masks.items()})

    def check_covers(self, reg: ParamRegistry) -> None:
        expected = {e.name: e.values.shape for e in reg.prunable()}
        got = {n: m.shape for n, m in self._masks.items()}
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            bad = sorted(n for n in set(expected) & set(got) if expected[n] != got[n])
            raise MaskError(f"mask coverage mismatch: missing={missing} extra={extra} shape={bad}")


# --------------------------------------------------------------- schedule


@dataclass(frozen=True)
class PruneSchedule:
    s0: float
    sT: float
    ramp_steps: int
    prune_interval: int

    def __post_init__(self):
        if not (0.0 <= self.s0 < self.sT <= 1.0):
            raise ValueError(f"need 0 <= s0 < sT <= 1, got s0={self.s0}, sT={self.sT}")
        if self.ramp_steps < 1 or not (1 <= self.prune_interval <= self.ramp_steps):
            raise ValueError(
                f"need 1 <= prune_interval <= ramp_steps, got {self.prune_interval}, {self.ramp_steps}"
            )


def target_sparsity(t: int, sched: PruneSchedule) -> float:
    """Cubic ramp from s0 to sT over ``ramp_steps``; sT afterwards."""
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    return sched.sT + min(0.0, (sched.s0 - sched.sT) * (1.0 - t / sched.ramp_steps) ** 3)


def is_prune_step(t: int, sched: PruneSchedule) -> bool:
    return t % sched.prune_interval == 0


# --------------------------------------------------------------- masks


def pruned_count(sparsity: float, n: int) -> int:
    # Python's round() is half-to-even.
    return int(round(sparsity * n))


def magnitude_mask(reg: ParamRegistry, sparsity: float, prior: MaskSet | None = None) -> MaskSet:
    """Prune the smallest-magnitude surviving entries of every matrix to ``sparsity``.

    Each matrix is pruned independently to ``round(sparsity * n)`` zeros.
    Entries already pruned in ``prior`` stay pruned; among equal magnitudes the
    lower flat index is pruned first.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {sparsity}")
    prior = MaskSet.ones(reg) if prior is None else prior
    prior.check_covers(reg)
    out = {}
    for e in reg.prunable():
        keep = prior[e.name].reshape(-1)
        n = keep.size
        k = pruned_count(sparsity, n)
        already = n - int(np.count_nonzero(keep))
        if k < already:
            raise MonotonicityError(
                f"{e.name}: sparsity {sparsity} prunes {k} of {n} entries but prior already pruned {already}"
            )
        new = keep.copy()
        extra = k - already
        if extra:
            survivors = np.flatnonzero(keep)
            mags = np.abs(e.values.reshape(-1)[survivors])
            order = np.argsort(mags, kind="stable")
            new[survivors[order[:extra]]] = 0.0
        out[e.name] = new.reshape(e.values.shape)
    return MaskSet(out)


def apply_mask(reg: ParamRegistry, m: MaskSet, state: OptimizerState | None = None) -> None:
    """Zero every masked entry (and its optimizer moments, if given)."""
    m.check_covers(reg)
    for e in reg.prunable():
        keep = m[e.name] != 0.0
        e.tensor.values = np.where(keep, e.values, 0.0)
        if state is not None and e.name in state.m:
            state.m[e.name][~keep] = 0.0
            state.v[e.name][~keep] = 0.0


def enforce_mask_after_step(reg: ParamRegistry, m: MaskSet, state: OptimizerState | None = None) -> None:
    apply_mask(reg, m, state)


# --------------------------------------------------------------- sign transforms


def alpha_for_layer(fan_in: int, fan_out: int) -> float:
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    return math.sqrt(6.0 / (fan_in + fan_out))


def clt_transform(reg: ParamRegistry, m: MaskSet) -> None:
    """Replace each surviving weight by sign(w) * alpha of its layer; zero maps to +alpha."""
    m.check_covers(reg)
    for e in reg.prunable():
        alpha = alpha_for_layer(e.fan_in, e.fan_out)
        keep = m[e.name] != 0.0
        signed = np.where(e.values < 0.0, -alpha, alpha)
        e.tensor.values = np.where(keep, signed, 0.0)


def random_sign_transform(reg: ParamRegistry, m: MaskSet, seed: int) -> None:
    """Like ``clt_transform`` but with signs drawn uniformly from {-1, +1}."""
    m.check_covers(reg)
    rng = np.random.default_rng(seed)
    for e in reg.prunable():
        alpha = alpha_for_layer(e.fan_in, e.fan_out)
        keep = m[e.name] != 0.0
        signs = np.where(rng.integers(0, 2, size=e.values.shape) == 1, 1.0, -1.0)
        e.tensor.values = np.where(keep, signs * alpha, 0.0)


# --------------------------------------------------------------- ladder


def on_ladder(target: float) -> bool:
    return any(abs(target - s) < _LADDER_TOL for s in LADDER)


def sparsity_ladder(target: float) -> list[float]:
    """Iterative pruning levels up to and including ``target``."""
    for i, s in enumerate(LADDER):
        if abs(target - s) < _LADDER_TOL:
            return list(LADDER[: i + 1])
    raise ConfigError(f"target sparsity {target} is not on the ladder {list(LADDER)}")
