"""Cloth-swapping conditional GAN.

The generator sees a person image with its cloth region zeroed and a cloth
code, and paints the cloth back in. Training reconstructs each image from its
own (augmented) cloth code; generation swaps in the unaugmented code of a
randomly drawn donor image.
"""

import json
import logging
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .encoder import ApparelEncoder, encode_cloth, l1_loss
from .exceptions import ContractViolation, NoDonorError
from .imaging import (FileMaskProvider, PairRecord, augment_cloth, composite_mask,
                      load_and_normalize, save_image, write_pairs)
from .layers import disc_block, down_block, eval_mode, init_by_name, init_weights, up_block
from .training import make_optimizer, resolve_dtype, sample_minibatch
from .validation import (IMAGE_SIZE, check_codes, check_images, check_masks, check_rng,
                         check_same_shape)

logger = logging.getLogger(__name__)

GEN_WIDTHS = (96, 192, 256, 512, 512)
DISC_WIDTHS = (64, 128, 256, 512, 512, 512)
DG_STRIDES = (2, 2, 2, 2, 2, 1)


class RefinedBlock(nn.Module):
    """Three parallel stride-2 branches (1x1, 4x4, 7x7) over channel thirds.

    Each branch is conv -> LeakyReLU(0.2) -> BatchNorm; outputs are
    concatenated along channels.
    """

    KERNELS = ((1, 0), (4, 1), (7, 3))

    def __init__(self, c_in, c_out):
        super().__init__()
        if c_in % 3 or c_out % 3:
            raise ContractViolation(
                f"refined block needs channel counts divisible by 3, got {c_in} -> {c_out}")
        self.branches = nn.ModuleList(
            down_block(c_in // 3, c_out // 3, k, 2, p) for k, p in self.KERNELS)

    def forward(self, x):
        parts = torch.chunk(x, 3, dim=1)
        return torch.cat([b(p) for b, p in zip(self.branches, parts)], dim=1)


class GeneratorNet(nn.Module):
    """Encoder-decoder generator conditioned on a cloth code at the bottleneck.

    Five down-sampling blocks (the second one a :class:`RefinedBlock` unless
    ``refined=False``), concatenation of the cloth code, a 1x1 mixing
    convolution, then five transposed-convolution blocks with a tanh head.
    """

    def __init__(self, widths=GEN_WIDTHS, code_channels=512, refined=True):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) != 5:
            raise ContractViolation(f"generator needs 5 widths, got {len(widths)}")
        self.widths = widths
        self.code_channels = int(code_channels)
        self.refined = bool(refined)
        # one draw from the global stream whatever the variant, so the refined
        # and plain generators share every block except the second
        base = int(torch.randint(0, 2**62, (1,)))
        with torch.random.fork_rng(devices=[]):
            self._build(widths)
        init_by_name(self, base)

    def _build(self, widths):
        chans = (3,) + widths
        blocks = []
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            if i == 1 and self.refined:
                blocks.append(RefinedBlock(a, b))
            else:
                blocks.append(down_block(a, b))
        self.down = nn.ModuleList(blocks)
        self.mix = nn.Conv2d(widths[-1] + self.code_channels, widths[-1], 1)
        rev = widths[::-1]
        ups = [up_block(a, b) for a, b in zip(rev[:-1], rev[1:])]
        ups.append(nn.Sequential(nn.ConvTranspose2d(rev[-1], 3, 4, 2, 1), nn.Tanh()))
        self.up = nn.ModuleList(ups)

    def architecture(self):
        return {"widths": list(self.widths), "code_channels": self.code_channels,
                "refined": self.refined}

    def bottleneck(self, rest):
        x = rest
        for block in self.down:
            x = block(x)
        return x

    def forward(self, rest, code):
        x = self.bottleneck(rest)
        if code.shape[1] != self.code_channels:
            raise ContractViolation(
                f"cloth code has {code.shape[1]} channels, generator expects "
                f"{self.code_channels}")
        if code.shape[-2:] != x.shape[-2:] or code.shape[0] != x.shape[0]:
            raise ContractViolation(
                f"cloth code of shape {tuple(code.shape)} cannot be concatenated with "
                f"bottleneck of shape {tuple(x.shape)}")
        x = self.mix(torch.cat([x, code], dim=1))
        for block in self.up:
            x = block(x)
        return x


class PatchDiscriminatorG(nn.Module):
    """Six conv blocks and a linear layer scoring a whole image (raw logit)."""

    def __init__(self, widths=DISC_WIDTHS, image_size=IMAGE_SIZE, strides=DG_STRIDES):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        self.widths = widths
        self.image_size = tuple(int(s) for s in image_size)
        self.strides = tuple(int(s) for s in strides)
        if len(widths) != 6 or len(self.strides) != 6:
            raise ContractViolation("discriminator needs 6 widths and 6 strides")
        chans = (3,) + widths
        self.blocks = nn.Sequential(
            *(disc_block(a, b, s) for a, b, s in zip(chans[:-1], chans[1:], self.strides)))
        factor = int(np.prod(self.strides))
        h, w = self.image_size
        if h % factor or w % factor:
            raise ContractViolation(f"image size {self.image_size} not divisible by {factor}")
        self.fc = nn.Linear(widths[-1] * (h // factor) * (w // factor), 1)
        init_weights(self)

    def architecture(self):
        return {"widths": list(self.widths), "image_size": list(self.image_size),
                "strides": list(self.strides)}

    def forward(self, x):
        return self.fc(self.blocks(x).flatten(1)).squeeze(1)


def _dtype(net):
    return next(net.parameters()).dtype


def generate(gen, rest_image, cloth_code):
    """Synthesize image(s) from rest image(s) and cloth code(s), in inference mode."""
    single = torch.is_tensor(rest_image) and rest_image.dim() == 3
    rest = check_images(rest_image, dtype=_dtype(gen))
    code = check_codes(cloth_code).to(_dtype(gen))
    with eval_mode(gen), torch.no_grad():
        out = gen(rest, code)
    return out[0] if single else out


def dg_score(disc, image):
    """Raw discriminator logits, one per image; ``sigmoid`` gives P(real)."""
    x = check_images(image, dtype=_dtype(disc))
    with eval_mode(disc), torch.no_grad():
        return disc(x)


def bce_logits(logits, target):
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, float(target)))


def discriminator_loss(disc, real, fake):
    """Mean of the real->1 and fake->0 cross-entropies; ``fake`` is detached."""
    return 0.5 * (bce_logits(disc(real), 1.0) + bce_logits(disc(fake.detach()), 0.0))


def asgan_losses(real, rest, code, gen, disc, lambda_dg=0.001):
    """Generator and discriminator losses at the networks' current parameters.

    ``loss_G = L1(real, G(rest, code)) + lambda_dg * BCE(D(fake), 1)`` and
    ``loss_D = (BCE(D(real), 1) + BCE(D(fake), 0)) / 2``. Networks are run in
    whatever mode they are in.
    """
    check_same_shape(real, rest, "real and rest images")
    fake = gen(rest, code)
    l1 = l1_loss(real, fake)
    loss_d = discriminator_loss(disc, real, fake)
    if lambda_dg:
        adv = bce_logits(disc(fake), 1.0)
        loss_g = l1 + lambda_dg * adv
    else:
        adv = torch.zeros((), dtype=l1.dtype)
        loss_g = l1
    return {"loss_G": loss_g, "loss_D": loss_d, "l1": l1, "adv": adv}


def training_codes(encoder, cloth_images, rng):
    """Cloth codes of flipped/cropped cloth images from the frozen encoder."""
    return encode_cloth(encoder, augment_cloth(cloth_images, rng))


def train_asgan_step(gen, disc, encoder, images, masks, opt_g, opt_d, rng, lambda_dg=0.001):
    """One discriminator step followed by one generator step.

    ``loss_D`` is measured before the discriminator step; ``loss_G`` (and its
    ``l1``/``adv`` parts) with the pre-step generator against the updated
    discriminator, right before the generator step.
    """
    real = check_images(images, dtype=_dtype(gen))
    m = check_masks(masks, like=real).to(real.dtype)
    cloth, rest = composite_mask(real, m)
    code = training_codes(encoder, cloth, rng).to(real.dtype)
    gen.train()
    disc.train()

    fake = gen(rest, code)
    loss_d = discriminator_loss(disc, real, fake)
    opt_d.zero_grad()
    loss_d.backward()
    opt_d.step()

    l1 = l1_loss(real, fake)
    if lambda_dg:
        adv = bce_logits(disc(fake), 1.0)
        loss_g = l1 + lambda_dg * adv
    else:
        adv = torch.zeros(())
        loss_g = l1
    opt_g.zero_grad()
    loss_g.backward()
    opt_g.step()
    # the generator pass also left gradients on D; they are cleared next step
    return {"loss_G": float(loss_g.detach()), "loss_D": float(loss_d.detach()),
            "l1": float(l1.detach()), "adv": float(adv.detach())}


def _usable_records(manifest, mask_provider, size):
    usable, skipped = [], 0
    for i in range(len(manifest)):
        mask = mask_provider.mask_for(manifest, i, size)
        if mask is None:
            skipped += 1
            continue
        usable.append((i, mask))
    return usable, skipped


def synthesize_dataset(gen, encoder, manifest, num_sets, rng, out_dir, mask_provider=None,
                       size=IMAGE_SIZE, batch_size=64):
    """Write ``num_sets`` cloth-swapped copies of every manifest image.

    For every source image and set, a donor image (never the source itself)
    is drawn uniformly, its unaugmented cloth code extracted and combined
    with the source's rest image. Images go to ``out_dir/set<k>/``, the pair
    list to ``out_dir/pairs.jsonl`` and a small report (including the number
    of records skipped for lack of a mask) to ``out_dir/synthesis_report.json``.
    Returns the list of :class:`PairRecord`.
    """
    if num_sets < 1:
        raise ContractViolation(f"num_sets must be >= 1, got {num_sets}")
    rng = check_rng(rng)
    mask_provider = mask_provider or FileMaskProvider()
    out_dir = Path(out_dir)
    usable, skipped = _usable_records(manifest, mask_provider, size)
    if skipped:
        logger.warning("%d manifest records skipped: no usable cloth mask", skipped)
    if len(usable) < 2:
        raise NoDonorError(
            f"need at least 2 images with masks to draw a donor, have {len(usable)}")

    dtype = _dtype(gen)
    images = torch.stack([load_and_normalize(manifest.image_path(i), size)
                          for i, _ in usable]).to(dtype)
    masks = torch.stack([m for _, m in usable]).to(dtype)
    cloth, rest = composite_mask(images, masks)
    codes = torch.cat([encode_cloth(encoder, cloth[s:s + batch_size].to(_dtype(encoder)))
                       for s in range(0, len(cloth), batch_size)]).to(dtype)

    n = len(usable)
    pairs = []
    for set_index in range(num_sets):
        # donor offsets 1..n-1 keep every donor distinct from its source
        donors = (np.arange(n) + rng.integers(1, n, size=n)) % n
        set_dir = out_dir / f"set{set_index}"
        for s in range(0, n, batch_size):
            idx = np.arange(s, min(n, s + batch_size))
            out = generate(gen, rest[idx], codes[donors[idx]])
            for k, img in zip(idx, out):
                src = manifest.image_path(usable[k][0])
                dst = set_dir / f"{Path(src).stem}.png"
                save_image(img, dst)
                pairs.append(PairRecord(os.path.relpath(src, out_dir),
                                        os.path.relpath(dst, out_dir), set_index))
    write_pairs(pairs, out_dir / "pairs.jsonl")
    report = {"num_sources": n, "num_sets": num_sets, "num_pairs": len(pairs),
              "skipped_no_mask": skipped}
    (out_dir / "synthesis_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return pairs


class ASGAN(BaseEstimator):
    """Cloth-swapping GAN as an estimator.

    ``fit(X, masks)`` trains generator and discriminator against a frozen,
    already fitted apparel encoder. :meth:`swap` renders each image wearing
    another image's cloth.

    Parameters
    ----------
    encoder : ApparelEncoder or ApparelEncoderNet
        Fitted cloth encoder; never updated here.
    widths, disc_widths : tuple of int
    refined : bool
        Use the three-branch block as the second down-sampling block.
    image_size : (int, int)
    lambda_dg : float
        Weight of the adversarial term in the generator loss.
    n_steps, batch_size, optimizer, lr, momentum, weight_decay, random_state, dtype
        Training controls, as in :class:`~apparelreid.encoder.ApparelEncoder`.
    """

    def __init__(self, encoder=None, widths=GEN_WIDTHS, disc_widths=DISC_WIDTHS, refined=True,
                 image_size=IMAGE_SIZE, lambda_dg=0.001, n_steps=2000, batch_size=8,
                 optimizer="sgd", lr=0.01, momentum=0.9, weight_decay=5e-4,
                 random_state=None, dtype="float32"):
        self.encoder = encoder
        self.widths = widths
        self.disc_widths = disc_widths
        self.refined = refined
        self.image_size = image_size
        self.lambda_dg = lambda_dg
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.dtype = dtype

    def _encoder_net(self):
        enc = self.encoder
        if isinstance(enc, ApparelEncoder):
            check_is_fitted(enc, "net_")
            enc = enc.net_
        if enc is None:
            raise ContractViolation("ASGAN needs a fitted apparel encoder")
        return enc

    def fit(self, X, masks):
        dtype = resolve_dtype(self.dtype)
        X = check_images(X, dtype=dtype, size=self.image_size)
        masks = check_masks(masks, like=X).to(dtype)
        enc = self._encoder_net().to(dtype)
        rng = check_rng(self.random_state)
        torch.manual_seed(int(rng.integers(0, 2**31 - 1)))
        self.generator_ = GeneratorNet(self.widths, enc.code_channels, self.refined).to(dtype)
        self.discriminator_ = PatchDiscriminatorG(self.disc_widths, self.image_size).to(dtype)
        opt_g = make_optimizer(self.generator_.parameters(), self.optimizer, self.lr,
                               self.momentum, self.weight_decay)
        opt_d = make_optimizer(self.discriminator_.parameters(), self.optimizer, self.lr,
                               self.momentum, self.weight_decay)
        self.history_ = []
        for _ in range(self.n_steps):
            idx = sample_minibatch(len(X), self.batch_size, rng)
            self.history_.append(train_asgan_step(
                self.generator_, self.discriminator_, enc, X[idx], masks[idx],
                opt_g, opt_d, rng, self.lambda_dg))
        self.generator_.eval()
        self.discriminator_.eval()
        return self

    def reconstruct(self, X, masks):
        """Regenerate each image from its own unaugmented cloth code."""
        return self.swap(X, masks, X, masks)

    def swap(self, X, masks, donor_X, donor_masks):
        """Images of ``X`` wearing the cloth of the aligned ``donor_X`` images."""
        check_is_fitted(self, "generator_")
        dtype = _dtype(self.generator_)
        X = check_images(X, dtype=dtype)
        donor_X = check_images(donor_X, dtype=dtype)
        _, rest = composite_mask(X, check_masks(masks, like=X))
        donor_cloth, _ = composite_mask(donor_X, check_masks(donor_masks, like=donor_X))
        codes = encode_cloth(self._encoder_net(), donor_cloth)
        return generate(self.generator_, rest, codes)

    def score_images(self, X):
        """Discriminator probability-real per image."""
        check_is_fitted(self, "discriminator_")
        return torch.sigmoid(dg_score(self.discriminator_, X))


__all__ = [
    "RefinedBlock", "GeneratorNet", "PatchDiscriminatorG", "ASGAN", "generate", "dg_score",
    "asgan_losses", "discriminator_loss", "train_asgan_step", "synthesize_dataset",
    "bce_logits", "training_codes", "GEN_WIDTHS", "DISC_WIDTHS",
]
