"""Deterministic random-number substreams.

Every stochastic component of a run derives its own generator from the run
seed plus a structural key (stream tag, iteration, subject, component, ...).
Results are therefore independent of worker count and scheduling order:
a task's stream depends only on what the task is, never on when it runs.
"""

from __future__ import annotations

import numpy as np

# Stream tags keep substreams of different purposes disjoint even when the
# remaining key components collide.
STREAM_ESTEP = 1
STREAM_MSTEP = 2
STREAM_SIM = 3
STREAM_GMM = 4


def substream(*key: int) -> np.random.Generator:
    """Return a PCG64 generator keyed by the given tuple of non-negative ints."""
    parts = []
    for part in key:
        part = int(part)
        if part < 0:
            raise ValueError(f"substream key components must be non-negative, got {part}")
        parts.append(part)
    return np.random.default_rng(np.random.SeedSequence(tuple(parts)))
