"""Keyed random streams.

Every stream is numpy's PCG64 seeded through ``SeedSequence(seed,
spawn_key=(blake2b(stream), blake2b(key)))``, so a patient's draws depend only
on the seed, the stream name and the patient id, never on processing order.
"""

from __future__ import annotations

import hashlib

import numpy as np

GENERATOR_NAME = "numpy.PCG64/SeedSequence(seed, spawn_key=(blake2b64(stream), blake2b64(key)))"


def _word(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def keyed_rng(seed: int, stream: str, key: str = "") -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(_word(stream), _word(key)))
    return np.random.Generator(np.random.PCG64(ss))


def generator_info() -> dict:
    return {"generator": GENERATOR_NAME, "numpy": np.__version__}
