"""Small torch building blocks shared by the classifier and the verifier."""

from __future__ import annotations

import contextlib
import hashlib

import numpy as np
import torch
from torch import nn

ACTIVATIONS = {"tanh": nn.Tanh, "relu": nn.ReLU, "softplus": nn.Softplus, "elu": nn.ELU}


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a private torch RNG state; the global state is restored."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2**63))
    return g


def mlp(sizes, activation: str = "tanh", zero_last: bool = False) -> nn.Sequential:
    """Fully connected stack ``sizes[0] -> ... -> sizes[-1]`` with no final activation."""
    act = ACTIVATIONS[activation]
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(act())
    if zero_last:
        last = layers[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
    return nn.Sequential(*layers).double()


def flat_parameters(module: nn.Module) -> np.ndarray:
    tensors = [t.detach().reshape(-1) for t in module.state_dict().values()]
    if not tensors:
        return np.zeros(0)
    return torch.cat(tensors).numpy().astype("<f8", copy=True)


def load_flat_parameters(module: nn.Module, flat: np.ndarray) -> None:
    state = module.state_dict()
    total = sum(t.numel() for t in state.values())
    if flat.size != total:
        raise ValueError(f"parameter count mismatch: file has {flat.size}, model needs {total}")
    offset = 0
    new_state = {}
    for name, t in state.items():
        n = t.numel()
        new_state[name] = torch.from_numpy(np.array(flat[offset:offset + n], dtype=np.float64)).reshape(t.shape)
        offset += n
    module.load_state_dict(new_state)


def parameter_hash(module: nn.Module) -> str:
    return hashlib.sha256(flat_parameters(module).tobytes()).hexdigest()


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))
