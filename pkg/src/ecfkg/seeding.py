"""Named random streams derived from one root seed."""
import numpy as np

STREAMS = {"split": 1, "init": 2, "shuffle": 3, "negatives": 4, "significance": 5, "synth": 6}


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for ``stream`` under root ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[stream],)))
