import numpy as np


class RngStream:
    """Seeded PCG64 stream. Same seed gives the same sequence on a given platform."""

    algorithm = "PCG64"

    def __init__(self, seed=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, scale=1.0, dtype=np.float32):
        return (self.gen.standard_normal(shape) * scale).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def spawn(self, n):
        """Independent child streams, e.g. one per sample."""
        seqs = np.random.SeedSequence(self.seed).spawn(n)
        return [RngStream(int(s.generate_state(1, np.uint64)[0])) for s in seqs]
