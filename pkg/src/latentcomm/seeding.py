"""Deterministic RNG stream derivation.

One master seed, many named streams. Every stochastic component draws
from its own stream, derived by hashing the master seed together with a
label path, so independent tasks (per-image transmissions, sweep points,
training epochs) never share RNG state and any subset of the work
reproduces bit-for-bit regardless of execution order.
"""

import hashlib

import numpy as np
import torch


def derive_seed(master_seed: int, *labels: object) -> int:
    """Hash (master_seed, labels...) into a 64-bit child seed."""
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "big")


def numpy_rng(master_seed: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *labels))


def torch_generator(master_seed: int, *labels: object) -> torch.Generator:
    g = torch.Generator()
    # torch seeds are signed 64-bit
    g.manual_seed(derive_seed(master_seed, *labels) & 0x7FFF_FFFF_FFFF_FFFF)
    return g


class Streams:
    """A family of named RNG streams hanging off one master seed.

    ``Streams(seed, "transmit", "img42").numpy("channel")`` always yields
    the same generator; child scopes refine the label path.
    """

    def __init__(self, master_seed: int, *scope: object):
        self.master_seed = int(master_seed)
        self.scope = tuple(str(s) for s in scope)

    def child(self, *labels: object) -> "Streams":
        return Streams(self.master_seed, *self.scope, *labels)

    def numpy(self, *labels: object) -> np.random.Generator:
        return numpy_rng(self.master_seed, *self.scope, *labels)

    def torch(self, *labels: object) -> torch.Generator:
        return torch_generator(self.master_seed, *self.scope, *labels)

    def __repr__(self) -> str:
        return f"Streams(seed={self.master_seed}, scope={'/'.join(self.scope)})"
