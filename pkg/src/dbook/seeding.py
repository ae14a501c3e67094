"""Master-seed fan-out.

Every random stream is ``SeedSequence(master, spawn_key=(stream, *path))``: the
stream id names the purpose and the path pins the member / epoch / episode.
Child streams therefore never depend on execution order, which is what keeps
serial and parallel runs (and resumed runs) identical.
"""

from __future__ import annotations

import numpy as np

INIT = 0
ENV = 1
ACTIONS = 2
SHUFFLE = 3
POOL = 4
EVAL = 5
EXPLAIN = 6


def child_seed(master: int, stream: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=(stream, *(int(p) for p in path)))


def child_rng(master: int, stream: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, stream, *path))


def episode_seeds(master: int, member: int, epoch: int, episodes: int) -> list[np.random.SeedSequence]:
    return [child_seed(master, ENV, member, epoch, e) for e in range(episodes)]


def eval_seeds(master: int, episodes: int) -> list[np.random.SeedSequence]:
    """Evaluation episodes are shared by every policy (common random numbers)."""
    return [child_seed(master, EVAL, e) for e in range(episodes)]
