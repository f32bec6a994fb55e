"""Named, reproducible random substreams.

Every source of randomness in the pipeline is derived from a single root
seed plus a tuple of stream names (e.g. ``("scenes", "train", 17)``), so
stages can be rerun or reordered without perturbing each other's draws.
Derivation goes through SHA-256 rather than Python's ``hash`` so streams
are stable across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def substream_seed(root_seed: int, *names: object) -> int:
    """Derive a 64-bit seed from a root seed and a tuple of stream names."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little") & _MASK64


def np_rng(root_seed: int, *names: object) -> np.random.Generator:
    """NumPy generator for the named substream."""
    return np.random.Generator(np.random.PCG64(substream_seed(root_seed, *names)))


def torch_rng(root_seed: int, *names: object) -> torch.Generator:
    """Torch CPU generator for the named substream."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(substream_seed(root_seed, *names) & ((1 << 63) - 1))
    return gen


def fork_rng(gen: torch.Generator) -> torch.Generator:
    """Clone a torch generator, preserving its current state."""
    out = torch.Generator(device="cpu")
    out.set_state(gen.get_state().clone())
    return out
