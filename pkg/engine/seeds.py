"""Seed derivation and torch generator helpers."""

import hashlib
from contextlib import contextmanager

import torch


def derive_seed(base_seed: int, *parts) -> int:
    """Derive a child seed from a base seed and any labelling parts.

    seed = first 8 bytes of sha256("base|part1|part2...") mod 2**31, so the
    same (base, axis value, replicate) always maps to the same seed.
    """
    key = "|".join(str(p) for p in (base_seed, *parts))
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 31)


def make_generator(seed: int) -> torch.Generator:
    """CPU generator seeded for one logical draw sequence."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


@contextmanager
def seeded_init(seed: int):
    """Fork torch's global RNG so layer initialisation is reproducible."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield
