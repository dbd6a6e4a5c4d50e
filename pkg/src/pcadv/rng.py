"""Seed derivation.

Every random stream is keyed by ``(seed, *keys)`` through NumPy's
``SeedSequence``; data sampling uses PCG64 generators, network noise uses
torch's CPU (MT19937) generator seeded from the same derivation.
"""

import numpy as np
import torch


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(k) for k in keys)]).generate_state(1)[0])


def numpy_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(k) for k in keys)])))


def torch_rng(seed: int, *keys: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, *keys))
