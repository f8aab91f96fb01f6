"""Seeded synthetic sequence tasks: copy, reverse, sort."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .model import FIRST_DATA_TOKEN

TASKS = ("copy", "reverse", "sort")

# Offsets keep the training, development and test streams disjoint.
TRAIN_STREAM, DEV_STREAM, TEST_STREAM = 0, 1_000_003, 2_000_003


def make_target(task: str, src) -> list[int]:
    src = list(src)
    if task == "copy":
        return src
    if task == "reverse":
        return src[::-1]
    if task == "sort":
        return sorted(src)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def generate_task_batch(task: str, seed: int, batch: int, length: int,
                        vocab_size: int = 32, counter: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Source and target token matrices, deterministic in (task, seed, counter)."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    rng = np.random.default_rng([seed, counter])
    src = rng.integers(FIRST_DATA_TOKEN, vocab_size, size=(batch, length))
    if task == "copy":
        tgt = src.copy()
    elif task == "reverse":
        tgt = src[:, ::-1].copy()
    else:
        tgt = np.sort(src, axis=1)
    return src, tgt


def stream(task: str, seed: int, batch: int, length: int, vocab_size: int,
           offset: int = TRAIN_STREAM, start: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    counter = start
    while True:
        yield generate_task_batch(task, seed, batch, length, vocab_size, offset + counter)
        counter += 1


def held_out(task: str, seed: int, n_batches: int, batch: int, length: int,
             vocab_size: int, offset: int = DEV_STREAM) -> list[tuple[np.ndarray, np.ndarray]]:
    return [generate_task_batch(task, seed, batch, length, vocab_size, offset + i)
            for i in range(n_batches)]
