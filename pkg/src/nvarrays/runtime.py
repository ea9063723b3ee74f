"""Seeded random streams and order-preserving parallel execution.

Every stochastic unit of work (a write site, a photon stream, a decay curve)
draws from its own generator keyed by ``(master_seed, stage, index)``.  The
result of a unit therefore does not depend on which worker ran it, in what
order, or how many workers there were.

Streams are Philox generators: the key is hashed from ``(master_seed, stage)``
and the unit index occupies the third 64-bit counter word, leaving 2**128
draws per unit before two streams could overlap.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

# stable numeric ids; never renumber, outputs depend on them
STAGES = {
    "fabricate": 1,
    "nitrogen": 2,
    "rewrite": 3,
    "image": 4,
    "hbt": 5,
    "coherence": 6,
    "bootstrap": 7,
}


@lru_cache(maxsize=256)
def _stage_key(master_seed: int, stage_id: int) -> np.ndarray:
    return np.random.SeedSequence([master_seed, stage_id]).generate_state(2, np.uint64)


def stream(master_seed: int, stage: str | int, index: int = 0) -> np.random.Generator:
    stage_id = STAGES[stage] if isinstance(stage, str) else int(stage)
    if master_seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    key = _stage_key(int(master_seed), stage_id)
    return np.random.Generator(np.random.Philox(counter=[0, 0, int(index), 0], key=key))


def _apply_chunk(func: Callable, chunk: Sequence) -> list:
    return [func(item) for item in chunk]


def parallel_map(func: Callable[[T], R], items: Sequence[T], parallelism: int = 1,
                 chunk_size: int | None = None) -> list[R]:
    """``[func(x) for x in items]``, optionally spread over worker processes.

    ``func`` and the items must be picklable when ``parallelism > 1``.
    """
    items = list(items)
    if parallelism <= 1 or len(items) < 2:
        return [func(item) for item in items]
    if chunk_size is None:
        chunk_size = max(1, -(-len(items) // (4 * parallelism)))
    chunks = [items[i:i + chunk_size] for i in range(0, len(items), chunk_size)]
    out: list[R] = []
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        for part in pool.map(_apply_chunk, [func] * len(chunks), chunks):
            out.extend(part)
    return out
