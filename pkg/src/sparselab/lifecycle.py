"""Pruning plans (MP, LT, SLT, CLT, SLT-MP, MP-SLT) and their execution.

A plan is an ordered list of training runs. Every run starts with a fresh
optimizer (step counter 0, so warmup is repeated) and saves a rewind
checkpoint early in training. Fixed-mask runs take their mask from the
previous run's converged parameters and restart from a rewind source.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .model import (
    ConfigError, ModelConfig, OptimizerState, ParamRegistry, build_model, evaluate,
    forward_loss, optimizer_step, reset_optimizer,
)
from .pruning import (
    MaskSet, MonotonicityError, PruneSchedule, apply_mask, clt_transform,
    enforce_mask_after_step, is_prune_step, magnitude_mask, random_sign_transform,
    sparsity_ladder, target_sparsity,
)
from .tasks import DEV_STREAM, TEST_STREAM, TASKS, held_out, stream

log = logging.getLogger(__name__)

SLT_MP_LEVELS = (0.5, 0.6)
MP_SLT_SWITCH = 0.6


class Technique(str, Enum):
    MP = "MP"
    LT = "LT"
    SLT = "SLT"
    CLT = "CLT"
    SLT_MP = "SLT-MP"
    MP_SLT = "MP-SLT"
    CLT_RANDOM_SIGN = "CLT-RANDOM-SIGN"

    @classmethod
    def parse(cls, text: str) -> "Technique":
        key = text.strip().upper().replace("_", "-")
        for t in cls:
            if t.value == key:
                return t
        raise ConfigError(f"unknown technique {text!r}; expected one of {[t.value for t in cls]}")


class Rewind(str, Enum):
    NONE = "none"
    INITIAL = "initial"
    EARLY = "early"


class Transform(str, Enum):
    NONE = "none"
    CLT = "clt"
    RANDOM_SIGN = "random-sign"


class Mode(str, Enum):
    FIXED_MASK = "fixed-mask"
    GRADUAL = "gradual"


@dataclass(frozen=True)
class PlanStep:
    run_steps: int
    target_sparsity: float
    rewind_to: Rewind
    transform: Transform
    mode: Mode
    schedule: PruneSchedule | None = None


@dataclass
class PrunePlan:
    technique: Technique
    steps: list[PlanStep]
    rewind_step: int
    rewind_source: str = "last"

    @property
    def n_runs(self) -> int:
        return len(self.steps)

    def validate(self) -> None:
        if not self.steps:
            raise ConfigError("plan has no steps")
        if self.rewind_source not in ("last", "dense"):
            raise ConfigError(f"rewind_source must be 'last' or 'dense', got {self.rewind_source!r}")
        for a, b in zip(self.steps, self.steps[1:]):
            if not b.target_sparsity > a.target_sparsity:
                raise MonotonicityError(
                    f"plan targets must strictly increase: {a.target_sparsity} -> {b.target_sparsity}"
                )
        for i, s in enumerate(self.steps):
            if (s.mode is Mode.GRADUAL) != (s.schedule is not None):
                raise ConfigError(f"step {i}: gradual steps need a schedule, fixed-mask steps none")
            if not 0 <= self.rewind_step <= s.run_steps:
                raise ConfigError(f"rewind_step {self.rewind_step} outside run of {s.run_steps} steps")
            if i == 0 and s.rewind_to is not Rewind.NONE:
                raise ConfigError("the first run cannot rewind")
            if s.schedule is not None:
                interval = s.schedule.prune_interval
                last_prune = math.ceil(s.schedule.ramp_steps / interval) * interval
                if last_prune >= s.run_steps:
                    raise ConfigError(
                        f"step {i}: no prune point after the ramp ends ({s.schedule.ramp_steps}) "
                        f"within {s.run_steps} steps"
                    )

    def describe(self) -> str:
        lines = [f"technique {self.technique.value}: {self.n_runs} training run(s), "
                 f"rewind checkpoint at step {self.rewind_step} ({self.rewind_source})"]
        for i, s in enumerate(self.steps):
            extra = ""
            if s.schedule is not None:
                extra = (f" s0={s.schedule.s0:g} ramp={s.schedule.ramp_steps}"
                         f" interval={s.schedule.prune_interval}")
            lines.append(f"  run {i:2d}: target {s.target_sparsity:5.2f}  mode={s.mode.value:10s}"
                         f" rewind={s.rewind_to.value:7s} transform={s.transform.value}{extra}")
        return "\n".join(lines)


def make_plan(technique: Technique | str, target: float, run_steps: int,
              rewind_step: int | None = None, prune_interval: int | None = None,
              ramp_fraction: float = 0.8, rewind_source: str = "last") -> PrunePlan:
    """Expand a technique and target sparsity into its sequence of training runs."""
    technique = Technique.parse(technique) if isinstance(technique, str) else technique
    ladder = sparsity_ladder(target)
    if run_steps < 1:
        raise ConfigError("run_steps must be positive")
    if rewind_step is None:
        rewind_step = round(0.05 * run_steps)
    if prune_interval is None:
        prune_interval = max(1, round(0.02 * run_steps))
    ramp = max(1, round(ramp_fraction * run_steps))

    def gradual(s0: float, sT: float, rewind_to: Rewind) -> PlanStep:
        sched = PruneSchedule(s0, sT, ramp, min(prune_interval, ramp))
        return PlanStep(run_steps, sT, rewind_to, Transform.NONE, Mode.GRADUAL, sched)

    def fixed(s: float, rewind_to: Rewind, transform: Transform = Transform.NONE) -> PlanStep:
        return PlanStep(run_steps, s, rewind_to, transform, Mode.FIXED_MASK)

    dense = fixed(0.0, Rewind.NONE)
    if technique is Technique.MP:
        steps = [gradual(0.0, target, Rewind.NONE)]
    elif technique is Technique.LT:
        steps = [dense] + [fixed(s, Rewind.INITIAL) for s in ladder]
    elif technique is Technique.SLT:
        steps = [dense] + [fixed(s, Rewind.EARLY) for s in ladder]
    elif technique is Technique.CLT:
        steps = [dense] + [fixed(s, Rewind.EARLY, Transform.CLT) for s in ladder]
    elif technique is Technique.CLT_RANDOM_SIGN:
        steps = [dense] + [fixed(s, Rewind.EARLY, Transform.RANDOM_SIGN) for s in ladder]
    elif technique is Technique.SLT_MP:
        if target < SLT_MP_LEVELS[0] - 1e-9:
            raise ConfigError(f"SLT-MP needs a target of at least {SLT_MP_LEVELS[0]}")
        steps = [dense] + [fixed(s, Rewind.EARLY) for s in SLT_MP_LEVELS if s <= target + 1e-9]
        if target > SLT_MP_LEVELS[-1] + 1e-9:
            steps.append(gradual(SLT_MP_LEVELS[-1], target, Rewind.EARLY))
    elif technique is Technique.MP_SLT:
        if target <= MP_SLT_SWITCH + 1e-9:
            steps = [gradual(0.0, target, Rewind.NONE)]
        else:
            steps = [gradual(0.0, MP_SLT_SWITCH, Rewind.NONE)]
            steps += [fixed(s, Rewind.EARLY) for s in ladder if s > MP_SLT_SWITCH + 1e-9]
    else:  # pragma: no cover
        raise ConfigError(f"unhandled technique {technique}")
    plan = PrunePlan(technique, steps, rewind_step, rewind_source)
    plan.validate()
    return plan


# --------------------------------------------------------------- rewinding


def rewind(ckpt: Checkpoint, m: MaskSet, transform: Transform = Transform.NONE,
           seed: int | None = None) -> tuple[ParamRegistry, OptimizerState]:
    """``ckpt`` parameters times ``m`` (optionally sign-transformed) plus a zeroed optimizer."""
    reg = ckpt.registry()
    m.check_covers(reg)
    apply_mask(reg, m)
    if transform is Transform.CLT:
        clt_transform(reg, m)
    elif transform is Transform.RANDOM_SIGN:
        if seed is None:
            raise ValueError("random-sign transform needs a seed")
        random_sign_transform(reg, m, seed)
    o = ckpt.optimizer
    state = OptimizerState.for_registry(reg, base_lr=o.base_lr, warmup=o.warmup,
                                        beta1=o.beta1, beta2=o.beta2, eps=o.eps)
    return reg, state


def mask_from_converged(ckpt: Checkpoint, next_sparsity: float, prior: MaskSet) -> MaskSet:
    current = prior.sparsity()
    if not next_sparsity > current + 1e-12:
        raise MonotonicityError(f"next sparsity {next_sparsity} must exceed prior sparsity {current}")
    return magnitude_mask(ckpt.params, next_sparsity, prior)


# --------------------------------------------------------------- execution


@dataclass(frozen=True)
class TrainConfig:
    task: str = "copy"
    seq_len: int = 8
    batch_size: int = 32
    base_lr: float = 0.1
    warmup_fraction: float = 0.02
    n_evals: int = 20
    eval_batches: int = 4
    eval_batch_size: int = 64

    def validate(self, model_cfg: ModelConfig) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not 1 <= self.seq_len <= model_cfg.max_seq_len:
            raise ConfigError(f"seq_len must be in [1, {model_cfg.max_seq_len}], got {self.seq_len}")
        for name in ("batch_size", "n_evals", "eval_batches", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.base_lr <= 0 or not 0 < self.warmup_fraction <= 1:
            raise ConfigError("base_lr must be positive and warmup_fraction in (0, 1]")

    def warmup(self, run_steps: int) -> int:
        return max(1, round(self.warmup_fraction * run_steps))


@dataclass
class EvalPoint:
    step: int
    loss: float
    accuracy: float
    sparsity: float
    max_abs: float
    mean_abs: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunRecord:
    run_id: str
    technique: str
    seed: int
    index: int
    target_sparsity: float
    mode: str
    rewind_to: str
    transform: str
    start_max_abs: float
    metrics: list[EvalPoint] = field(default_factory=list)
    selected_step: int = -1
    dev_accuracy: float = float("nan")
    test_loss: float = float("nan")
    test_accuracy: float = float("nan")
    final_sparsity: float = float("nan")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "metrics"}
        d["metrics"] = [p.to_dict() for p in self.metrics]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        metrics = [EvalPoint(**p) for p in d.pop("metrics")]
        return cls(**d, metrics=metrics)


@dataclass
class RunResult:
    record: RunRecord
    start: Checkpoint
    rewind: Checkpoint
    final: Checkpoint


@dataclass
class PlanResult:
    plan: PrunePlan
    runs: list[RunResult]

    @property
    def records(self) -> list[RunRecord]:
        return [r.record for r in self.runs]

    @property
    def final(self) -> Checkpoint:
        return self.runs[-1].final


Observer = Callable[..., None]


def measured_sparsity(reg: ParamRegistry) -> float:
    total = zeros = 0
    for e in reg.prunable():
        total += e.values.size
        zeros += int(np.count_nonzero(e.values == 0.0))
    return zeros / total if total else 0.0


def weight_stats(reg: ParamRegistry) -> tuple[float, float]:
    """(max |w|, mean |w| over surviving entries) across prunable matrices."""
    vals = np.concatenate([e.values.reshape(-1) for e in reg.prunable()])
    alive = vals[vals != 0.0]
    if alive.size == 0:
        return 0.0, 0.0
    a = np.abs(alive)
    return float(a.max()), float(a.mean())


def _eval_steps(run_steps: int, n_evals: int) -> list[int]:
    every = max(1, run_steps // n_evals)
    steps = list(range(every, run_steps + 1, every))
    if not steps or steps[-1] != run_steps:
        steps.append(run_steps)
    return steps


def execute_plan(plan: PrunePlan, model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int,
                 observer: Observer | None = None) -> PlanResult:
    """Run every step of ``plan`` for one seed.

    ``observer(event, **info)`` is called with ``"run_start"`` (after the
    rewind, before the first update), ``"step"`` (after every update and mask
    enforcement) and ``"run_end"``.
    """
    plan.validate()
    train_cfg.validate(model_cfg)
    cfg = replace(model_cfg, seed=seed)
    init = build_model(cfg)
    first_steps = plan.steps[0].run_steps
    init_state = OptimizerState.for_registry(init, base_lr=train_cfg.base_lr,
                                             warmup=train_cfg.warmup(first_steps))
    theta0 = Checkpoint.capture(f"{plan.technique.value}-s{seed}-init", init, init_state)
    dev = held_out(train_cfg.task, seed, train_cfg.eval_batches, train_cfg.eval_batch_size,
                   train_cfg.seq_len, cfg.vocab_size, DEV_STREAM)
    test = held_out(train_cfg.task, seed, train_cfg.eval_batches, train_cfg.eval_batch_size,
                    train_cfg.seq_len, cfg.vocab_size, TEST_STREAM)

    mask = MaskSet.ones(init)
    runs: list[RunResult] = []
    for i, step in enumerate(plan.steps):
        run_id = f"{plan.technique.value}-s{seed}-r{i:02d}"
        if i == 0:
            reg = init.copy()
            state = OptimizerState.for_registry(reg, base_lr=train_cfg.base_lr)
            source = theta0
        else:
            prev = runs[-1]
            if step.mode is Mode.FIXED_MASK:
                mask = mask_from_converged(prev.final, step.target_sparsity, mask)
            if step.rewind_to is Rewind.INITIAL:
                source = theta0
            elif step.rewind_to is Rewind.EARLY:
                source = runs[0].rewind if plan.rewind_source == "dense" else prev.rewind
            else:
                source = prev.final
            reg, state = rewind(source, mask, step.transform, seed=seed * 1_000_003 + i)
        reset_optimizer(state)
        state.base_lr = train_cfg.base_lr
        state.warmup = train_cfg.warmup(step.run_steps)
        log.info("%s: start target=%.2f mode=%s rewind=%s(%s) transform=%s mask sparsity=%.4f",
                 run_id, step.target_sparsity, step.mode.value, step.rewind_to.value,
                 source.id, step.transform.value, mask.sparsity())
        start = Checkpoint.capture(f"{run_id}-start", reg, state, mask, source.id)
        if observer:
            observer("run_start", index=i, step=step, reg=reg, state=state, mask=mask,
                     source=source, plan=plan)
        result, mask = _train_run(run_id, i, plan, step, reg, state, mask, cfg, train_cfg,
                                  seed, dev, test, start, observer)
        runs.append(result)
        r = result.record
        log.info("%s: done sparsity=%.4f dev_acc=%.4f test_acc=%.4f max|w|=%.4g",
                 run_id, r.final_sparsity, r.dev_accuracy, r.test_accuracy,
                 r.metrics[-1].max_abs if r.metrics else float("nan"))
        if observer:
            observer("run_end", index=i, record=r, result=result)
    return PlanResult(plan, runs)


def _train_run(run_id, index, plan, step: PlanStep, reg, state, mask, cfg, train_cfg, seed,
               dev, test, start, observer):
    sched = step.schedule
    record = RunRecord(run_id, plan.technique.value, seed, index, step.target_sparsity,
                       step.mode.value, step.rewind_to.value, step.transform.value,
                       start_max_abs=weight_stats(reg)[0])
    eval_steps = _eval_steps(step.run_steps, train_cfg.n_evals)
    candidates = set(eval_steps[-4:] if step.mode is Mode.GRADUAL else eval_steps)
    best: tuple[float, int, dict[str, np.ndarray]] | None = None
    rewind_ckpt = None
    if plan.rewind_step == 0:
        rewind_ckpt = Checkpoint.capture(f"{run_id}-rewind", reg, state, mask, start.lineage)
    data = stream(train_cfg.task, seed, train_cfg.batch_size, train_cfg.seq_len, cfg.vocab_size)
    eval_set = set(eval_steps)

    for t in range(step.run_steps):
        if sched is not None and is_prune_step(t, sched):
            target = target_sparsity(t, sched)
            new_mask = magnitude_mask(reg, target, mask)
            if new_mask.pruned() != mask.pruned():
                mask = new_mask
                apply_mask(reg, mask, state)
        src, tgt = next(data)
        reg.zero_grad()
        loss = forward_loss(reg, cfg, src, tgt)
        if not math.isfinite(loss.item()):
            raise T.NumericError(f"{run_id}: non-finite loss at step {t}")
        T.backward(loss)
        optimizer_step(reg, state)
        enforce_mask_after_step(reg, mask, state)
        if observer:
            observer("step", index=index, t=state.t, reg=reg, mask=mask, state=state)
        if state.t == plan.rewind_step:
            rewind_ckpt = Checkpoint.capture(f"{run_id}-rewind", reg, state, mask, start.lineage)
        if state.t in eval_set:
            dev_loss, dev_acc = evaluate(reg, cfg, dev)
            mx, mean_abs = weight_stats(reg)
            record.metrics.append(EvalPoint(state.t, dev_loss, dev_acc, measured_sparsity(reg), mx, mean_abs))
            # Ties go to the later checkpoint.
            if state.t in candidates and (best is None or dev_acc >= best[0]):
                best = (dev_acc, state.t, reg.state())

    reg.zero_grad()
    final = Checkpoint.capture(f"{run_id}-final", reg, state, mask, start.lineage)
    assert best is not None and rewind_ckpt is not None
    record.dev_accuracy, record.selected_step, best_state = best
    scratch = reg.copy()
    scratch.load_state(best_state)
    record.test_loss, record.test_accuracy = evaluate(scratch, cfg, test)
    record.final_sparsity = measured_sparsity(reg)
    return RunResult(record, start, rewind_ckpt, final), mask
