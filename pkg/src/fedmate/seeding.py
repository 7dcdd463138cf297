"""Counter-based child seeds: every (stream, entity, round) gets its own
independent generator derived from the master seed, so changing who takes
part in a round never shifts anyone else's random stream."""

import numpy as np

STREAMS = {
    "global_init": 0,
    "client": 1,
    "discriminator": 2,
    "select": 3,
    "data": 4,
    "partition": 5,
    "finetune": 6,
    "server": 7,
}


def child_seed(master: int, stream: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(STREAMS[stream], *map(int, keys)))


def child_rng(master: int, stream: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, stream, *keys))


def child_int(master: int, stream: str, *keys: int) -> int:
    return int(child_seed(master, stream, *keys).generate_state(1, dtype=np.uint32)[0])
