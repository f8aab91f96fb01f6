"""Flat ``key = value`` experiment configuration with a canonical text form.

Blank lines and ``#`` comments are ignored. All problems in a file are
collected and raised together in one :class:`ConfigError`, each prefixed
with the line it came from.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace

from .lifecycle import Technique, TrainConfig, make_plan
from .model import ConfigError, ModelConfig
from .pruning import on_ladder
from .tasks import TASKS

REQUIRED = ("technique", "target_sparsity", "task", "run_steps")


@dataclass(frozen=True)
class ExperimentConfig:
    technique: tuple[str, ...]
    target_sparsity: float
    task: str
    run_steps: int
    name: str = "experiment"
    rewind_fraction: float = 0.05
    prune_interval: int = 0  # 0 means 2% of run_steps, resolved on parse
    ramp_fraction: float = 0.8
    rewind_source: str = "last"
    seeds: tuple[int, ...] = (1, 2)
    vocab_size: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_seq_len: int = 16
    seq_len: int = 8
    batch_size: int = 32
    base_lr: float = 0.1
    warmup_fraction: float = 0.02
    n_evals: int = 20
    eval_batches: int = 4
    eval_batch_size: int = 64
    value_width: int = 4
    index_width: int = 4
    output_dir: str | None = field(default=None)

    @property
    def rewind_step(self) -> int:
        return round(self.rewind_fraction * self.run_steps)

    def model_config(self, seed: int = 0) -> ModelConfig:
        return ModelConfig(self.vocab_size, self.d_model, self.n_heads, self.n_layers,
                           self.d_ff, self.max_seq_len, seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.task, self.seq_len, self.batch_size, self.base_lr,
                           self.warmup_fraction, self.n_evals, self.eval_batches,
                           self.eval_batch_size)

    def plan(self, technique: str):
        return make_plan(technique, self.target_sparsity, self.run_steps, self.rewind_step,
                         self.prune_interval, self.ramp_fraction, self.rewind_source)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig(("MP",), 0.5, "copy", 1)


def _convert(key: str, raw: str):
    default = getattr(_DEFAULTS, key)
    if key == "technique":
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if not items:
            raise ValueError("empty technique list")
        out = tuple(Technique.parse(s).value for s in items)
        if len(set(out)) != len(out):
            raise ValueError("technique listed twice")
        return out
    if key == "seeds":
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if not items:
            raise ValueError("empty seed list")
        seeds = tuple(int(s) for s in items)
        if len(set(seeds)) != len(seeds) or min(seeds) < 0:
            raise ValueError("seeds must be distinct non-negative integers")
        return seeds
    if key in ("name", "task", "rewind_source", "output_dir"):
        if not raw:
            raise ValueError("empty value")
        if key == "task" and raw not in TASKS:
            raise ValueError(f"unknown task {raw!r}; expected one of {', '.join(TASKS)}")
        return raw
    if key == "target_sparsity":
        s = float(raw)
        if not on_ladder(s):
            raise ValueError(f"{s} is not on the sparsity ladder")
        return s
    if isinstance(default, bool):  # pragma: no cover
        raise TypeError(key)
    if isinstance(default, int):
        return int(raw)
    return float(raw)


def _check(cfg: ExperimentConfig) -> list[str]:
    errs = []
    if cfg.run_steps < 1:
        errs.append("run_steps: must be positive")
    if not 0 <= cfg.rewind_fraction < 1:
        errs.append("rewind_fraction: must be in [0, 1)")
    if not 0 < cfg.ramp_fraction < 1:
        errs.append("ramp_fraction: must be in (0, 1)")
    if cfg.prune_interval < 1:
        errs.append("prune_interval: must be positive")
    if cfg.rewind_source not in ("last", "dense"):
        errs.append("rewind_source: must be 'last' or 'dense'")
    for w in ("value_width", "index_width"):
        if getattr(cfg, w) not in (2, 4, 8):
            errs.append(f"{w}: must be 2, 4 or 8")
    if "/" in cfg.name or cfg.name in (".", ".."):
        errs.append("name: must be a plain directory name")
    try:
        cfg.model_config().validate()
        cfg.train_config().validate(cfg.model_config())
    except ConfigError as e:
        errs.append(str(e))
    if errs:
        return errs
    for tech in cfg.technique:
        try:
            cfg.plan(tech)
        except ConfigError as e:
            errs.append(f"technique {tech}: {e}")
    return errs


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse and validate; ``overrides`` replace raw values before conversion."""
    errors: list[str] = []
    raw: dict[str, tuple[int | None, str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {line!r}")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            errors.append(f"line {lineno}: unknown key {key!r}")
        elif key in raw:
            errors.append(f"line {lineno}: duplicate key {key!r} (first on line {raw[key][0]})")
        else:
            raw[key] = (lineno, value)
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            errors.append(f"override: unknown key {key!r}")
        else:
            raw[key] = (None, value)

    values = {}
    for key, (lineno, value) in raw.items():
        where = f"line {lineno}" if lineno is not None else "override"
        try:
            values[key] = _convert(key, value)
        except (ValueError, ConfigError) as e:
            errors.append(f"{where}: {key}: {e}")
    for key in REQUIRED:
        if key not in raw:
            errors.append(f"missing required key {key!r}")
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))

    cfg = ExperimentConfig(**values)
    if cfg.prune_interval == 0:
        cfg = replace(cfg, prune_interval=max(1, round(0.02 * cfg.run_steps)))
    errors = _check(cfg)
    if errors:
        lines = {k: v[0] for k, v in raw.items()}

        def tag(msg):
            ln = lines.get(re.match(r"\w*", msg).group())
            return f"line {ln}: {msg}" if ln else msg
        raise ConfigError("invalid config:\n  " + "\n  ".join(tag(m) for m in errors))
    return cfg


def to_text(cfg: ExperimentConfig) -> str:
    """Canonical form: every key in declaration order, defaults included."""
    out = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        out.append(f"{f.name} = {value}")
    return "\n".join(out) + "\n"
