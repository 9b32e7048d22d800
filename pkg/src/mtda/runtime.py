"""Precision and determinism switches.

``MTDA_DETERMINISTIC=1`` switches every network and tensor created by this
package to float64 and turns on torch's deterministic algorithms. The flag is
read at call time so tests can toggle it with ``monkeypatch.setenv``.
"""
import os
from contextlib import contextmanager

import numpy as np
import torch

ENV_FLAG = "MTDA_DETERMINISTIC"


def deterministic_mode() -> bool:
    return os.environ.get(ENV_FLAG, "0").strip().lower() in ("1", "true", "yes", "on")


def torch_dtype() -> torch.dtype:
    return torch.float64 if deterministic_mode() else torch.float32


def numpy_dtype():
    return np.float64 if deterministic_mode() else np.float32


def configure() -> None:
    """Apply the determinism flag to global torch state."""
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)


@contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def derive_seed(seed: int, *tags) -> int:
    """Stable child seed for ``(seed, *tags)``; tags may be ints or strings."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            entropy.extend(tag.encode("utf-8"))
        else:
            entropy.append(int(tag) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
