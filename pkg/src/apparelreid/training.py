"""Optimizer construction, seeding and minibatching shared by the trainers."""

import random
import zlib

import numpy as np
import torch

from .exceptions import ConfigurationError

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def resolve_dtype(dtype):
    if isinstance(dtype, torch.dtype):
        return dtype
    try:
        return DTYPES[dtype]
    except KeyError:
        raise ConfigurationError(f"unknown dtype {dtype!r}; choose from {sorted(DTYPES)}") from None


def make_optimizer(params, name="sgd", lr=0.01, momentum=0.9, weight_decay=5e-4):
    """SGD with momentum and weight decay, or Adam (betas 0.5/0.999) when asked."""
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, betas=(0.5, 0.999), weight_decay=weight_decay)
    raise ConfigurationError(f"unknown optimizer {name!r}; choose 'sgd' or 'adam'")


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def derive_seed(root_seed, *names):
    """Deterministic child seed from a root seed and stage/component names."""
    entropy = [int(root_seed)] + [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0] >> 1)


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def iterate_minibatches(n, batch_size, rng, shuffle=True):
    """Index arrays covering ``range(n)`` once, in ``batch_size`` chunks."""
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def sample_minibatch(n, batch_size, rng):
    if batch_size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch_size, replace=False))
