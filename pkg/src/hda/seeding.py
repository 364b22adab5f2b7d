"""Deterministic, labelled random streams.

Every stochastic component draws from its own named stream so that
changing how often one consumer draws (say, metric snapshots) cannot
shift the values seen by another (say, the training batches).
"""
from __future__ import annotations

import zlib

import numpy as np

from .errors import ConfigError


def _label_keys(labels) -> tuple[int, ...]:
    return tuple(zlib.crc32(str(label).encode("utf8")) for label in labels)


def _sequence(seed: int, labels) -> np.random.SeedSequence:
    seed = int(seed)
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence((seed,) + _label_keys(labels))


def stream_rng(seed: int, *labels) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, labels)``."""
    return np.random.default_rng(_sequence(seed, labels))


def derive_seed(seed: int, *labels) -> int:
    """Stable integer seed derived from ``(seed, labels)``."""
    return int(_sequence(seed, labels).generate_state(1, np.uint64)[0])
