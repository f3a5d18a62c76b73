"""Apparel-invariant feature learning.

A transfer net (backbone encoder + transposed-convolution decoder) is trained
on (original, cloth-swapped) pairs: each pair is used twice per iteration,
once reconstructing the swapped image from the original and once the other
way round. A patch discriminator adds a small adversarial term. Only the
backbone is kept afterwards.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .asgan import bce_logits
from .backbones import SMALL_WIDTHS, build_backbone, normalized_embedding
from .encoder import l1_loss
from .exceptions import ConfigurationError, ContractViolation
from .imaging import load_and_normalize
from .layers import disc_block, eval_mode, init_weights
from .training import iterate_minibatches, make_optimizer, resolve_dtype, set_lr
from .validation import IMAGE_SIZE, check_images, check_rng, check_same_shape

logger = logging.getLogger(__name__)

DT_WIDTHS = (64, 128, 256, 512, 512, 512)
DT_STRIDES = (2, 2, 2, 2, 1, 1)

recon_loss = l1_loss


class TransferNet(nn.Module):
    """Backbone encoder followed by a decoder back to image space."""

    def __init__(self, backbone, min_channels=16):
        super().__init__()
        self.backbone = backbone
        c = backbone.feature_dim
        stages = []
        for _ in range(backbone.num_downsamples):
            nxt = max(c // 2, min_channels)
            stages += [nn.ConvTranspose2d(c, nxt, 4, 2, 1), nn.BatchNorm2d(nxt), nn.ReLU()]
            c = nxt
        stages += [nn.Conv2d(c, 3, 3, 1, 1), nn.Tanh()]
        self.decoder = nn.Sequential(*stages)
        init_weights(self.decoder)

    def forward(self, x):
        return self.decoder(self.backbone(x))


class PatchDiscriminatorT(nn.Module):
    """Six conv blocks and a 1x1 convolution producing a real/fake logit map."""

    def __init__(self, widths=DT_WIDTHS, strides=DT_STRIDES):
        super().__init__()
        self.widths = tuple(int(w) for w in widths)
        self.strides = tuple(int(s) for s in strides)
        if len(self.widths) != 6 or len(self.strides) != 6:
            raise ContractViolation("discriminator needs 6 widths and 6 strides")
        chans = (3,) + self.widths
        self.blocks = nn.Sequential(
            *(disc_block(a, b, s) for a, b, s in zip(chans[:-1], chans[1:], self.strides)))
        self.classifier = nn.Conv2d(self.widths[-1], 1, 1)
        init_weights(self)

    def architecture(self):
        return {"widths": list(self.widths), "strides": list(self.strides)}

    def forward(self, x):
        return self.classifier(self.blocks(x))


def transfer_forward(t, x):
    single = torch.is_tensor(x) and x.dim() == 3
    x = check_images(x, dtype=next(t.parameters()).dtype)
    with eval_mode(t), torch.no_grad():
        out = t(x)
    return out[0] if single else out


def dt_adversarial_losses(x_real, x_recon, disc):
    """Discriminator loss and the transfer net's adversarial term, averaged over map cells.

    ``loss_D`` treats ``x_real`` as real and the detached ``x_recon`` as fake;
    ``loss_G_term`` is the non-saturating ``BCE(D(x_recon), 1)``.
    """
    check_same_shape(x_real, x_recon, "discriminator inputs")
    loss_d = 0.5 * (bce_logits(disc(x_real), 1.0) + bce_logits(disc(x_recon.detach()), 0.0))
    loss_g = bce_logits(disc(x_recon), 1.0)
    return {"loss_D": loss_d, "loss_G_term": loss_g}


def _update_round(t, disc, x, target, opt_t, opt_d, lambda_dt):
    recon = t(x)
    if disc is not None:
        loss_d = 0.5 * (bce_logits(disc(x), 1.0) + bce_logits(disc(recon.detach()), 0.0))
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()
    rec = recon_loss(target, recon)
    if disc is not None and lambda_dt:
        adv = bce_logits(disc(recon), 1.0)
        joint = rec + lambda_dt * adv
    else:
        adv = None
        joint = rec
    opt_t.zero_grad()
    joint.backward()
    opt_t.step()
    return joint, rec, adv


def aifl_iteration(t, disc, original, synthetic, opt_t, opt_d=None, lambda_dt=0.001):
    """Two update rounds over a batch of pairs: (original -> synthetic), then reversed.

    Each round updates the discriminator (when ``disc`` is given) and then
    the transfer net on ``recon + lambda_dt * adversarial``. The input image
    of a round is the discriminator's real sample. Returns the joint losses
    and their parts, measured before each round's transfer-net step.
    """
    dtype = next(t.parameters()).dtype
    original = check_images(original, dtype=dtype, name="original images")
    synthetic = check_images(synthetic, dtype=dtype, name="synthetic images")
    check_same_shape(original, synthetic, "pair images")
    if disc is not None and opt_d is None:
        raise ConfigurationError("discriminator given without an optimizer")
    t.train()
    if disc is not None:
        disc.train()
    out = {}
    for step, (x, y) in enumerate(((original, synthetic), (synthetic, original)), 1):
        joint, rec, adv = _update_round(t, disc, x, y, opt_t, opt_d, lambda_dt)
        out[f"loss_step{step}"] = float(joint.detach())
        out[f"recon_step{step}"] = float(rec.detach())
        out[f"adv_step{step}"] = None if adv is None else float(adv.detach())
    return out


@dataclass
class AIFLSchedule:
    """Initialization schedule; the learning rate is multiplied by ``lr_decay`` every epoch."""

    epochs: int = 1
    lr: float = 0.1
    lr_decay: float = 0.1
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lambda_dt: float = 0.001
    use_discriminator: bool = True
    disc_widths: tuple = DT_WIDTHS
    optimizer: str = "sgd"

    def lr_at(self, epoch):
        return self.lr * self.lr_decay ** epoch


def load_pair_images(pairs, size=IMAGE_SIZE):
    """Stack originals and synthetics of a pair list; repeated originals are read once."""
    cache = {}

    def get(p):
        if p not in cache:
            cache[p] = load_and_normalize(p, size)
        return cache[p]

    originals = torch.stack([get(p.original) for p in pairs])
    synthetics = torch.stack([get(p.synthetic) for p in pairs])
    return originals, synthetics


def initialize_backbone(originals, synthetics, backbone, schedule=None, rng=None,
                        callback=None):
    """Train a transfer net around ``backbone`` on aligned pair tensors.

    One epoch is one shuffled pass over all pairs. Returns
    ``(backbone, transfer_net, discriminator, log)`` where ``log`` holds one
    ``{step, epoch, loss_step1, loss_step2, recon_step1, recon_step2, lr}``
    record per iteration.
    """
    schedule = schedule or AIFLSchedule()
    if len(originals) == 0:
        raise ConfigurationError("AIFL initialization needs at least one pair")
    if schedule.epochs < 1:
        raise ConfigurationError(f"epochs must be >= 1, got {schedule.epochs}")
    rng = check_rng(rng)
    dtype = next(backbone.parameters()).dtype
    torch.manual_seed(int(rng.integers(0, 2**31 - 1)))
    t = TransferNet(backbone).to(dtype)
    disc = PatchDiscriminatorT(schedule.disc_widths).to(dtype) if schedule.use_discriminator else None
    opt_t = make_optimizer(t.parameters(), schedule.optimizer, schedule.lr, schedule.momentum,
                           schedule.weight_decay)
    opt_d = None
    if disc is not None:
        opt_d = make_optimizer(disc.parameters(), schedule.optimizer, schedule.lr,
                               schedule.momentum, schedule.weight_decay)
    log = []
    step = 0
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        set_lr(opt_t, lr)
        if opt_d is not None:
            set_lr(opt_d, lr)
        for idx in iterate_minibatches(len(originals), schedule.batch_size, rng):
            res = aifl_iteration(t, disc, originals[idx], synthetics[idx], opt_t, opt_d,
                                 schedule.lambda_dt)
            rec = {"step": step, "epoch": epoch, "lr": lr,
                   **{k: res[k] for k in ("loss_step1", "loss_step2", "recon_step1",
                                          "recon_step2")}}
            log.append(rec)
            if callback is not None:
                callback(rec)
            step += 1
    backbone.eval()
    return backbone, t, disc, log


def embed_backbone(backbone, X, batch_size=256):
    """L2-normalised average-pooled backbone features as a numpy array."""
    X = check_images(X, dtype=next(backbone.parameters()).dtype)
    out = []
    with eval_mode(backbone), torch.no_grad():
        for s in range(0, len(X), batch_size):
            out.append(normalized_embedding(backbone, X[s:s + batch_size]))
    return torch.cat(out).cpu().numpy().astype(np.float64)


class AIFL(TransformerMixin, BaseEstimator):
    """Apparel-invariant backbone initializer.

    ``fit(X, X_swapped)`` trains on aligned (original, cloth-swapped) image
    pairs; ``transform(X)`` returns L2-normalised pooled backbone features.

    Parameters
    ----------
    backbone : {'small', 'resnet50', 'densenet161'}
    backbone_widths : tuple of int
        Stage widths of the ``small`` backbone.
    epochs : int
    lr : float
        Initial learning rate, multiplied by ``lr_decay`` after every epoch.
    lambda_dt : float
        Weight of the adversarial term.
    use_discriminator : bool
        ``False`` drops the discriminator entirely (ablation).
    """

    def __init__(self, backbone="small", backbone_widths=SMALL_WIDTHS, epochs=1, lr=0.1,
                 lr_decay=0.1, batch_size=128, momentum=0.9, weight_decay=5e-4,
                 lambda_dt=0.001, use_discriminator=True, disc_widths=DT_WIDTHS,
                 optimizer="sgd", random_state=None, dtype="float32"):
        self.backbone = backbone
        self.backbone_widths = backbone_widths
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lambda_dt = lambda_dt
        self.use_discriminator = use_discriminator
        self.disc_widths = disc_widths
        self.optimizer = optimizer
        self.random_state = random_state
        self.dtype = dtype

    def schedule(self):
        return AIFLSchedule(self.epochs, self.lr, self.lr_decay, self.batch_size,
                            self.momentum, self.weight_decay, self.lambda_dt,
                            self.use_discriminator, tuple(self.disc_widths), self.optimizer)

    def _new_backbone(self, rng):
        torch.manual_seed(int(rng.integers(0, 2**31 - 1)))
        kwargs = {"widths": self.backbone_widths} if self.backbone == "small" else {}
        return build_backbone(self.backbone, **kwargs).to(resolve_dtype(self.dtype))

    def fit(self, X, X_swapped):
        dtype = resolve_dtype(self.dtype)
        X = check_images(X, dtype=dtype)
        X_swapped = check_images(X_swapped, dtype=dtype)
        rng = check_rng(self.random_state)
        backbone = self._new_backbone(rng)
        self.backbone_, self.transfer_net_, self.discriminator_, self.log_ = \
            initialize_backbone(X, X_swapped, backbone, self.schedule(), rng)
        return self

    def transform(self, X):
        check_is_fitted(self, "backbone_")
        return embed_backbone(self.backbone_, X)

    def schedule_dict(self):
        return asdict(self.schedule())


__all__ = [
    "TransferNet", "PatchDiscriminatorT", "AIFL", "AIFLSchedule", "transfer_forward",
    "recon_loss", "dt_adversarial_losses", "aifl_iteration", "initialize_backbone",
    "load_pair_images", "embed_backbone",
]
