"""Determinism controls shared by the trainers and the CLI."""

from __future__ import annotations

import numpy as np
import torch


def apply_determinism(deterministic: bool) -> None:
    """Single-threaded deterministic torch mode for reproducible runs."""
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def derive_seed(*parts: int) -> int:
    """Stable per-(run, epoch, sample) integer seed for the augment RNGs."""
    return int(np.random.SeedSequence(parts).generate_state(1, dtype=np.uint64)[0])
