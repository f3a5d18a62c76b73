"""Building blocks shared by the networks."""

import hashlib
import zlib

import torch
from torch import nn

from .exceptions import NumericFault


def init_weights(module, std=0.02, generator=None):
    """Normal(0, 0.02) for convolutions and linear layers; BN scale ~ N(1, 0.02)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, std, generator=generator)
            nn.init.zeros_(m.bias)


def init_by_name(module, base_seed, std=0.02):
    """Initialise each direct child from its own generator keyed by the child's name.

    Swapping one child for a different architecture leaves every other
    child's initial weights untouched.
    """
    for name, child in module.named_children():
        if isinstance(child, nn.ModuleList):
            pairs = [(f"{name}.{i}", c) for i, c in enumerate(child)]
        else:
            pairs = [(name, child)]
        for key, c in pairs:
            g = torch.Generator().manual_seed((base_seed + zlib.crc32(key.encode())) % 2**63)
            init_weights(c, std, generator=g)


def down_block(c_in, c_out, kernel=4, stride=2, padding=1):
    """Conv -> LeakyReLU(0.2) -> BatchNorm."""
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride, padding),
        nn.LeakyReLU(0.2),
        nn.BatchNorm2d(c_out),
    )


def up_block(c_in, c_out):
    """TransConv -> ReLU -> BatchNorm, doubling the spatial size."""
    return nn.Sequential(
        nn.ConvTranspose2d(c_in, c_out, 4, 2, 1),
        nn.ReLU(),
        nn.BatchNorm2d(c_out),
    )


def disc_block(c_in, c_out, stride):
    """Conv -> BatchNorm -> LeakyReLU(0.2); the discriminators' ordering.

    BatchNorm always normalizes with batch statistics: running averages would
    blend the separate real and fake batches seen in training.
    """
    kernel, padding = (4, 1) if stride == 2 else (3, 1)
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride, padding),
        nn.BatchNorm2d(c_out, track_running_stats=False),
        nn.LeakyReLU(0.2),
    )


def run_checked(blocks, x, where):
    """Apply ``blocks`` in order, raising NumericFault at the first non-finite output."""
    for i, block in enumerate(blocks):
        x = block(x)
        if not torch.isfinite(x).all():
            raise NumericFault(f"non-finite activation after {where} block {i}")
    return x


def parameter_digest(module, buffers=False):
    """SHA-256 over the trainable parameters (and buffers if asked)."""
    h = hashlib.sha256()
    items = module.state_dict().items() if buffers else module.named_parameters()
    for name, t in sorted(items):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class eval_mode:
    """Context manager: put modules in eval mode, restore their flags on exit."""

    def __init__(self, *modules):
        self.modules = modules

    def __enter__(self):
        self.flags = [m.training for m in self.modules]
        for m in self.modules:
            m.eval()
        return self

    def __exit__(self, *exc):
        for m, flag in zip(self.modules, self.flags):
            m.train(flag)
        return False
