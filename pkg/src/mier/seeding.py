"""Named deterministic random streams, all derived from one run seed."""

from __future__ import annotations

import hashlib

import numpy as np

STREAM_NAMES = ("env", "model-init", "policy-init", "sampling")


def _stable_hash(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def named_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _stable_hash(name)]))


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    return {name: named_stream(seed, name) for name in STREAM_NAMES}
