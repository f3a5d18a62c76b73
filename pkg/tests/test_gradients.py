import torch

from apparelreid.aifl import PatchDiscriminatorT, TransferNet, dt_adversarial_losses, recon_loss
from apparelreid.asgan import GeneratorNet, PatchDiscriminatorG, asgan_losses
from apparelreid.backbones import SmallBackbone
from apparelreid.encoder import ApparelEncoderNet, ea_loss

from conftest import random_images
from gradcheck import check_gradients, max_relative_error

F64 = torch.float64


def test_apparel_encoder_gradients():
    torch.manual_seed(0)
    net = ApparelEncoderNet((4, 8, 8, 8, 8)).to(F64).train()
    x = random_images(2, dtype=F64)
    err = max_relative_error(lambda: ea_loss(x, net(x)), net.parameters(), seed=1)
    assert err < 1e-3


def test_generator_and_discriminator_gradients():
    torch.manual_seed(0)
    gen = GeneratorNet((6, 6, 8, 8, 8), code_channels=4).to(F64).train()
    disc = PatchDiscriminatorG((4, 4, 8, 8, 8, 8), image_size=(64, 32)).to(F64).train()
    real, rest = random_images(2, seed=1, dtype=F64), random_images(2, seed=2, dtype=F64)
    code = torch.randn(2, 4, 2, 1, dtype=F64)

    def loss_g():
        return asgan_losses(real, rest, code, gen, disc, lambda_dg=0.5)["loss_G"]

    def loss_d():
        return asgan_losses(real, rest, code, gen, disc)["loss_D"]

    assert max_relative_error(loss_g, gen.parameters(), seed=2) < 1e-3
    assert max_relative_error(loss_d, disc.parameters(), seed=3) < 1e-3


def test_transfer_net_and_patch_discriminator_gradients():
    torch.manual_seed(0)
    t = TransferNet(SmallBackbone((4, 8, 8, 8)), min_channels=4).to(F64).train()
    disc = PatchDiscriminatorT((4, 4, 8, 8, 8, 8)).to(F64).train()
    x, y = random_images(2, seed=1, dtype=F64), random_images(2, seed=2, dtype=F64)

    def joint():
        out = t(x)
        return recon_loss(y, out) + 0.5 * dt_adversarial_losses(x, out, disc)["loss_G_term"]

    def loss_d():
        return dt_adversarial_losses(x, t(x), disc)["loss_D"]

    assert max_relative_error(joint, t.parameters(), seed=4) < 1e-3
    assert max_relative_error(loss_d, disc.parameters(), seed=5) < 1e-3


class _SkewedGrad(torch.autograd.Function):
    """Identity forward, 1% too large backward."""

    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, g):
        return g * 1.01


def test_checker_detects_a_wrong_gradient():
    torch.manual_seed(0)
    net = ApparelEncoderNet((4, 8, 8, 8, 8)).to(F64).train()
    x = random_images(2, dtype=F64)
    err = max_relative_error(lambda: ea_loss(x, _SkewedGrad.apply(net(x))), net.parameters(),
                             seed=1)
    assert err > 5e-3


def test_kink_inside_step_uses_clean_side():
    w = torch.zeros(1, dtype=F64, requires_grad=True)
    res = check_gradients(lambda: (w - 3e-8).abs().sum(), [w], n=1, eps=1e-7)
    assert res.worst < 1e-9 and res.one_sided == 1
