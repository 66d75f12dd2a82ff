"""Counter-based seed derivation.

Every stochastic stage gets ``SeedSequence(master, spawn_key=(stage, *counters))``,
so seeds depend only on the master seed and the work item's coordinates,
never on execution order or the number of worker processes.
"""
import numpy as np

STAGE_DATA = 0
STAGE_PRETRAIN = 1
STAGE_ALIGN = 2
STAGE_EVAL = 3
STAGE_SWEEP = 4


def derive_seed(master: int, stage: int, *counters: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(stage, *counters))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derive_rng(master: int, stage: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=(stage, *counters)))
