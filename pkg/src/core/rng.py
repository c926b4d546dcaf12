import zlib

import numpy as np

DEFAULT_SEED = 5


class SeededStreams:
    """Per-purpose random substreams drawn from one counter-based generator family.

    Every stochastic choice (init, shuffling, rotations, permutations) asks for a
    named stream; the same (seed, purpose) pair always yields the same sequence,
    independent of the order in which other streams were consumed.
    """

    def __init__(self, seed: int = DEFAULT_SEED):
        self.seed = int(seed)

    def stream(self, purpose: str) -> np.random.Generator:
        key = zlib.crc32(purpose.encode("utf-8"))
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, key])))

    def child(self, purpose: str) -> "SeededStreams":
        key = zlib.crc32(purpose.encode("utf-8"))
        return SeededStreams(int(np.random.SeedSequence([self.seed, key]).generate_state(1)[0]))
