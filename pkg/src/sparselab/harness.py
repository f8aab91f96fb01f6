"""Experiment runner, on-disk artifacts and averaged results tables.

Layout of an experiment directory::

    config.txt                      canonical config
    table.md, table.json            averaged table (display / exact means)
    <TECH>/seed-<s>/records.json    one RunRecord per training run
    <TECH>/seed-<s>/memory.json     memory totals per run + full final report
    <TECH>/seed-<s>/rNN-rewind.ckpt, rNN-final.ckpt
    <TECH>/seed-<s>/final.spm       sparse final model
    FAILED                          present only if a run raised
"""

from __future__ import annotations

import json
import logging
import os
import traceback
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, parse_config, to_text
from .lifecycle import RunRecord, execute_plan
from .sparse_store import (
    FormatError, load_sparse_dense, read_sparse_model, report_model_memory, write_sparse_model,
)

log = logging.getLogger(__name__)

OUT_ENV = "SPARSELAB_OUT"
DEFAULT_ROOT = "sparselab-runs"


@dataclass
class Cell:
    accuracy: float
    loss: float
    n: int


@dataclass
class TableRow:
    sparsity: float
    memory: int | None
    cells: dict[str, Cell | None]


@dataclass
class ResultsTable:
    techniques: list[str]
    rows: list[TableRow]

    def to_dict(self) -> dict:
        return {
            "techniques": self.techniques,
            "rows": [
                {"sparsity": r.sparsity, "memory": r.memory,
                 "cells": {t: (None if c is None else c.__dict__) for t, c in r.cells.items()}}
                for r in self.rows
            ],
        }


def output_dir(cfg: ExperimentConfig, override: str | os.PathLike | None = None) -> Path:
    if override is not None:
        return Path(override)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUT_ENV, DEFAULT_ROOT)) / cfg.name


def _level(s: float) -> float:
    return round(s, 6)


def aggregate(records: list[RunRecord], techniques: list[str] | None = None,
              memory: dict[tuple[str, float], int] | None = None) -> ResultsTable:
    """Average test metrics over seeds for every (technique, target sparsity)."""
    if techniques is None:
        techniques = list(dict.fromkeys(r.technique for r in records))
    groups: dict[tuple[str, float], list[RunRecord]] = {}
    for r in sorted(records, key=lambda r: (r.seed, r.index)):
        groups.setdefault((r.technique, _level(r.target_sparsity)), []).append(r)
    levels = sorted({lvl for _, lvl in groups})
    rows = []
    for lvl in levels:
        cells: dict[str, Cell | None] = {}
        for t in techniques:
            g = groups.get((t, lvl))
            cells[t] = None if not g else Cell(fmean(r.test_accuracy for r in g),
                                               fmean(r.test_loss for r in g), len(g))
        mem = None
        if memory:
            mem = next((memory[(t, lvl)] for t in techniques if (t, lvl) in memory), None)
        rows.append(TableRow(lvl, mem, cells))
    return ResultsTable(list(techniques), rows)


def _fmt_mem(n: int | None) -> str:
    return "-" if n is None else f"{n / 1024:.1f} KiB"


def emit_table(table: ResultsTable | list[RunRecord]) -> str:
    """Fixed-width markdown; ``*`` marks the best accuracy and best loss per row.

    Best is decided on the displayed (rounded) values, so every tied cell is marked.
    """
    if not isinstance(table, ResultsTable):
        table = aggregate(table)
    header = ["sparsity", "memory"]
    for t in table.techniques:
        header += [f"{t} acc%", f"{t} loss"]
    body = []
    for row in table.rows:
        accs = {t: f"{100 * c.accuracy:.2f}" for t, c in row.cells.items() if c}
        losses = {t: f"{c.loss:.4f}" for t, c in row.cells.items() if c}
        best_acc = max(accs.values(), key=float, default=None)
        best_loss = min(losses.values(), key=float, default=None)
        line = [f"{100 * row.sparsity:g}%", _fmt_mem(row.memory)]
        for t in table.techniques:
            if row.cells[t] is None:
                line += ["n/a", "n/a"]
                continue
            a, lo = accs[t], losses[t]
            line.append(a + ("*" if float(a) == float(best_acc) else ""))
            line.append(lo + ("*" if float(lo) == float(best_loss) else ""))
        body.append(line)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

    def fmt(cells, align_right=True):
        parts = [c.rjust(w) if align_right else c.ljust(w) for c, w in zip(cells, widths)]
        return "| " + " | ".join(parts) + " |"

    lines = [fmt(header, False), "|" + "|".join("-" * (w + 1) + ":" for w in widths) + "|"]
    lines += [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _run_one(cfg: ExperimentConfig, technique: str, seed: int, root: Path):
    seed_dir = root / technique / f"seed-{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    plan = cfg.plan(technique)
    result = execute_plan(plan, cfg.model_config(), cfg.train_config(), seed)
    mem_runs = []
    for i, run in enumerate(result.runs):
        checkpoint.save(run.rewind, seed_dir / f"r{i:02d}-rewind.ckpt")
        checkpoint.save(run.final, seed_dir / f"r{i:02d}-final.ckpt")
        rep = report_model_memory(run.final.params, run.final.mask, cfg.value_width, cfg.index_width)
        mem_runs.append({"run_id": run.record.run_id, "target_sparsity": run.record.target_sparsity,
                         "total": rep.total, "dense_total": rep.dense_total})
    final = result.final
    write_sparse_model(seed_dir / "final.spm", final.params)
    report = report_model_memory(final.params, final.mask, cfg.value_width, cfg.index_width)
    _dump(seed_dir / "records.json", [r.to_dict() for r in result.records])
    _dump(seed_dir / "memory.json", {"runs": mem_runs, "final": report.to_dict()})
    max_abs = [round(r.start_max_abs, 6) for r in result.records]
    log.info("%s seed %d: max|w| at run starts %s", technique, seed, max_abs)
    return result.records, mem_runs


def run_experiment(cfg: ExperimentConfig, out: str | os.PathLike | None = None) -> ResultsTable:
    """Run every technique for every seed, write artifacts and the averaged table.

    On failure a ``FAILED`` marker is written next to the partial artifacts and
    the exception propagates.
    """
    root = output_dir(cfg, out)
    root.mkdir(parents=True, exist_ok=True)
    failed = root / "FAILED"
    if failed.exists():
        failed.unlink()
    (root / "config.txt").write_text(to_text(cfg))
    records: list[RunRecord] = []
    memory: dict[tuple[str, float], int] = {}
    for technique in cfg.technique:
        for seed in cfg.seeds:
            try:
                recs, mem = _run_one(cfg, technique, seed, root)
            except Exception:
                failed.write_text(f"{technique} seed {seed}\n{traceback.format_exc()}")
                raise
            records += recs
            for m in mem:
                memory.setdefault((technique, _level(m["target_sparsity"])), m["total"])
    table = aggregate(records, list(cfg.technique), memory)
    (root / "table.md").write_text(emit_table(table))
    _dump(root / "table.json", table.to_dict())
    return table


def load_experiment(root: str | os.PathLike):
    """(config, records, memory map) re-read from an experiment directory."""
    root = Path(root)
    cfg = parse_config((root / "config.txt").read_text())
    records: list[RunRecord] = []
    memory: dict[tuple[str, float], int] = {}
    for technique in cfg.technique:
        for seed in cfg.seeds:
            d = root / technique / f"seed-{seed}"
            records += [RunRecord.from_dict(x) for x in json.loads((d / "records.json").read_text())]
            for m in json.loads((d / "memory.json").read_text())["runs"]:
                memory.setdefault((technique, _level(m["target_sparsity"])), m["total"])
    return cfg, records, memory


def report(root: str | os.PathLike) -> str:
    cfg, records, memory = load_experiment(root)
    return emit_table(aggregate(records, list(cfg.technique), memory))


def verify(root: str | os.PathLike) -> list[str]:
    """Re-check checksums, mask invariants and the sparse model file. Returns problems."""
    root = Path(root)
    problems = []
    if (root / "FAILED").exists():
        problems.append("FAILED marker present")
    for path in sorted(root.rglob("*.ckpt")):
        try:
            checkpoint.load(path).check_mask()
        except (FormatError, OSError) as e:
            problems.append(f"{path.relative_to(root)}: {e}")
    for path in sorted(root.rglob("final.spm")):
        try:
            read_sparse_model(path)
            dense = load_sparse_dense(path)
        except (FormatError, OSError) as e:
            problems.append(f"{path.relative_to(root)}: {e}")
            continue
        finals = sorted(path.parent.glob("r*-final.ckpt"))
        if not finals:
            problems.append(f"{path.relative_to(root)}: no final checkpoint next to it")
            continue
        try:
            ck = checkpoint.load(finals[-1])
        except FormatError:
            continue  # already reported
        for e in ck.params:
            if not np.array_equal(dense.get(e.name), e.values):
                problems.append(f"{path.relative_to(root)}: {e.name} differs from {finals[-1].name}")
    try:
        text = report(root)
        if (root / "table.md").read_text() != text:
            problems.append("table.md does not match the records")
    except (OSError, ValueError, KeyError) as e:
        problems.append(f"records: {e}")
    return problems
