"""Deterministic seed derivation and explicit RNG streams.

Every stochastic operation in the package draws from a stream passed in by
the caller. A run has one root seed; named streams (``data``, ``init``,
``noise``, ``eval``, ...) are derived from it by hashing, so adding a new
stream never shifts the draws of an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root_seed: int, name: str) -> int:
    """Map (root seed, stream name) to a stable 63-bit seed."""
    digest = hashlib.blake2b(f"{root_seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


class TorchStream:
    """A named torch RNG stream (CPU generator) for noise draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = torch.Generator().manual_seed(self.seed)

    def randn(self, *shape: int) -> torch.Tensor:
        return torch.randn(*shape, generator=self.generator)

    def randn_like(self, x: torch.Tensor) -> torch.Tensor:
        return torch.randn(x.shape, dtype=x.dtype, generator=self.generator)

    def rand(self, *shape: int) -> torch.Tensor:
        return torch.rand(*shape, generator=self.generator)

    def randint(self, low: int, high: int, shape: tuple[int, ...]) -> torch.Tensor:
        return torch.randint(low, high, shape, generator=self.generator)


def torch_stream(root_seed: int, name: str) -> TorchStream:
    return TorchStream(derive_seed(root_seed, name))


def numpy_stream(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, name))


def init_module(module: torch.nn.Module, seed: int) -> torch.nn.Module:
    """Re-initialize all parameters of ``module`` from an explicit seed.

    Parameters are visited in sorted name order, so initialization does not
    depend on construction order or on any global RNG state. Weight matrices
    get Kaiming-uniform fan-in scaling; biases are zeroed; embedding tables
    get N(0, 0.02).
    """
    g = torch.Generator().manual_seed(int(seed))
    for name, p in sorted(module.named_parameters()):
        with torch.no_grad():
            if p.ndim == 1:
                if name.endswith("bias"):
                    p.zero_()
                else:  # norm scale
                    p.fill_(1.0)
            elif isinstance(_owner(module, name), torch.nn.Embedding):
                p.normal_(0.0, 0.02, generator=g)
            else:
                fan_in = p[0].numel()
                bound = (6.0 / fan_in) ** 0.5
                p.uniform_(-bound, bound, generator=g)
    return module


def _owner(module: torch.nn.Module, param_name: str) -> torch.nn.Module:
    parts = param_name.split(".")[:-1]
    for part in parts:
        module = getattr(module, part)
    return module
