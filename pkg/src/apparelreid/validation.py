"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

import numpy as np
import torch

from .exceptions import ContractViolation

IMAGE_SIZE = (256, 128)
CODE_CHANNELS = 512
DOWNSAMPLE_FACTOR = 32


def _to_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x))
    if dtype is not None:
        t = t.to(dtype)
    elif not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    return t


def check_images(x, *, size=None, dtype=None, allow_single=True, check_range=True,
                 name="images"):
    """Validate a batch of images and return it as an ``(N, 3, H, W)`` tensor.

    Parameters
    ----------
    x : array-like or Tensor
        ``(N, 3, H, W)``, or ``(3, H, W)`` when ``allow_single`` is set.
    size : tuple of int, optional
        Required ``(H, W)``. When omitted any size divisible by 32 is accepted.
    dtype : torch.dtype, optional
        Cast to this dtype. Integer inputs are cast to the default dtype.
    check_range : bool
        Require every value to lie in ``[-1, 1]``.
    """
    t = _to_tensor(x, dtype)
    if t.dim() == 3 and allow_single:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[1] != 3:
        raise ContractViolation(
            f"{name}: expected shape (N, 3, H, W), got {tuple(t.shape)}")
    if t.shape[0] == 0:
        raise ContractViolation(f"{name}: empty batch")
    h, w = t.shape[-2:]
    if size is not None and (h, w) != tuple(size):
        raise ContractViolation(f"{name}: expected spatial size {tuple(size)}, got {(h, w)}")
    if size is None and (h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR):
        raise ContractViolation(
            f"{name}: spatial size {(h, w)} must be divisible by {DOWNSAMPLE_FACTOR}")
    if not torch.isfinite(t).all():
        raise ContractViolation(f"{name}: non-finite values")
    if check_range and (t.min() < -1 or t.max() > 1):
        raise ContractViolation(f"{name}: values outside [-1, 1]")
    return t


def check_masks(m, *, like=None, dtype=None, name="masks"):
    """Validate binary cloth masks, returned as ``(N, 1, H, W)``."""
    t = _to_tensor(m, dtype)
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        # (1, H, W) single mask or (N, H, W) batch; both become (N, 1, H, W)
        t = t.unsqueeze(1)
    if t.dim() != 4 or t.shape[1] != 1:
        raise ContractViolation(f"{name}: expected shape (N, 1, H, W), got {tuple(t.shape)}")
    if not ((t == 0) | (t == 1)).all():
        raise ContractViolation(f"{name}: entries must be exactly 0 or 1")
    if like is not None and t.shape[-2:] != like.shape[-2:]:
        raise ContractViolation(
            f"{name}: spatial size {tuple(t.shape[-2:])} does not match "
            f"image size {tuple(like.shape[-2:])}")
    return t


def check_codes(c, *, channels=None, spatial=None, name="cloth codes"):
    t = _to_tensor(c)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4:
        raise ContractViolation(f"{name}: expected shape (N, C, h, w), got {tuple(t.shape)}")
    if channels is not None and t.shape[1] != channels:
        raise ContractViolation(f"{name}: expected {channels} channels, got {t.shape[1]}")
    if spatial is not None and tuple(t.shape[-2:]) != tuple(spatial):
        raise ContractViolation(
            f"{name}: expected spatial size {tuple(spatial)}, got {tuple(t.shape[-2:])}")
    if not torch.isfinite(t).all():
        raise ContractViolation(f"{name}: non-finite values")
    return t


def check_same_shape(a, b, what="inputs"):
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def check_rng(seed):
    """Turn ``None``, an int or a Generator into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def torch_generator(rng):
    """A seeded ``torch.Generator`` drawn from a numpy Generator."""
    g = torch.Generator()
    g.manual_seed(int(check_rng(rng).integers(0, 2**63 - 1)))
    return g
