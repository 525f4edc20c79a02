"""Named random streams: every subcommand derives its generators from one
seed plus a stream name, so runs are independently reproducible."""

from __future__ import annotations

import zlib

import numpy as np


def named_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
