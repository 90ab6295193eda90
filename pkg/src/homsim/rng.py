"""Deterministic random streams.

Every random draw in the simulator is addressed by ``(seed, stage, block)``
so that results do not depend on how the work is split between workers.
Block streams use numpy's Philox generator; per-photon phase paths use a
keyed splitmix64 hash so they can be evaluated for arbitrary subsets of
photons without materialising one generator per photon.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

BLOCK = 1 << 16

# stage identifiers, fixed forever: changing them changes every stream
EMIT = 1
BACKGROUND = 2
DIFFUSION = 3
ROUTE = 4
LOSS = 5
INTERFERE = 6
SINGLES = 7
DETECT = 8
JITTER = 9
PHASE_SEED = 10


def generator(seed: int, *key: int) -> np.random.Generator:
    """Philox generator for the stream ``(seed, *key)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in key]])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit child seed, e.g. for scan points."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in key]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def worker_count() -> int:
    env = os.environ.get("HOMSIM_THREADS")
    n = os.cpu_count() or 1
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            pass
    return n


def blocked(
    seed: int,
    stage: int,
    n: int,
    draw: Callable[[np.random.Generator, int], np.ndarray],
    *key: int,
    workers: int | None = None,
) -> np.ndarray:
    """Draw ``n`` variates as consecutive fixed-size blocks.

    Element ``i`` always comes from block ``i // BLOCK`` so the output is the
    same whatever ``workers`` is.
    """
    if n <= 0:
        return draw(generator(seed, stage, *key, 0), 0)
    nblocks = (n + BLOCK - 1) // BLOCK

    def one(b: int) -> np.ndarray:
        size = min(BLOCK, n - b * BLOCK)
        return draw(generator(seed, stage, *key, b), size)

    workers = worker_count() if workers is None else workers
    if workers > 1 and nblocks > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(one, range(nblocks)))
    else:
        parts = [one(b) for b in range(nblocks)]
    return np.concatenate(parts)


def uniform(seed: int, stage: int, n: int, *key: int) -> np.ndarray:
    return blocked(seed, stage, n, lambda g, k: g.random(k), *key)


def normal(seed: int, stage: int, n: int, *key: int) -> np.ndarray:
    return blocked(seed, stage, n, lambda g, k: g.standard_normal(k), *key)


def exponential(seed: int, stage: int, n: int, *key: int) -> np.ndarray:
    return blocked(seed, stage, n, lambda g, k: g.standard_exponential(k), *key)


def seeds64(seed: int, stage: int, n: int, *key: int) -> np.ndarray:
    return blocked(
        seed, stage, n,
        lambda g, k: g.integers(0, 2**63 - 1, size=k, dtype=np.int64).astype(np.uint64),
        *key,
    )


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def keyed_uniform(keys: np.ndarray, counter: int) -> np.ndarray:
    """Uniform(0,1) value number ``counter`` of each keyed stream."""
    keys = np.asarray(keys, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = _splitmix64(keys ^ _splitmix64(np.full_like(keys, np.uint64(counter))))
    # 53 high bits -> (0, 1)
    return ((x >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def keyed_normal(keys: np.ndarray, counter: int) -> np.ndarray:
    """Standard normal number ``counter`` of each keyed stream (Box-Muller)."""
    u1 = keyed_uniform(keys, 2 * counter)
    u2 = keyed_uniform(keys, 2 * counter + 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
