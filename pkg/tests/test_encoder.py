import numpy as np
import pytest
import torch

from apparelreid.encoder import (ApparelEncoder, ApparelEncoderNet, decode_cloth, ea_loss,
                                 encode_cloth, train_ea_step)
from apparelreid.exceptions import ContractViolation, NumericFault
from apparelreid.layers import parameter_digest
from apparelreid.training import make_optimizer

from conftest import random_images

SMALL = (8, 8, 8, 8, 8)


@pytest.fixture(scope="module")
def full_net():
    torch.manual_seed(0)
    return ApparelEncoderNet()


def test_full_size_shapes(full_net):
    x = random_images(1, size=(256, 128))[0]
    code = encode_cloth(full_net, x)
    assert code.shape == (512, 8, 4)
    out = decode_cloth(full_net, code)
    assert out.shape == (3, 256, 128)
    assert out.abs().max() <= 1


def test_zero_input_and_zero_code_are_finite(full_net):
    assert torch.isfinite(encode_cloth(full_net, torch.zeros(3, 256, 128))).all()
    assert torch.isfinite(decode_cloth(full_net, torch.zeros(512, 8, 4))).all()


def test_identical_inputs_identical_codes():
    torch.manual_seed(0)
    net = ApparelEncoderNet(SMALL)
    x = random_images(1)
    z = encode_cloth(net, torch.cat([x, x]))
    assert torch.equal(z[0], z[1])


def test_batch_invariance_in_inference_mode():
    torch.manual_seed(0)
    net = ApparelEncoderNet(SMALL)
    train_ea_step(net, random_images(4, seed=1), make_optimizer(net.parameters(), lr=0.01))
    x = random_images(5, seed=2)
    batch = encode_cloth(net, x)
    for i in range(5):
        assert torch.allclose(encode_cloth(net, x[i]), batch[i], atol=1e-5)


def test_loss_examples():
    z, o = torch.zeros(2, 3, 4, 4), torch.ones(2, 3, 4, 4)
    assert float(ea_loss(z, z)) == 0.0
    assert float(ea_loss(z, o)) == 1.0
    x = random_images(2)
    assert float(ea_loss(x, x + 0.5)) == pytest.approx(0.5)
    with pytest.raises(ContractViolation):
        ea_loss(z, torch.zeros(1, 3, 4, 4))


def test_loss_symmetric_nonnegative():
    a, b = random_images(2, seed=1), random_images(2, seed=2)
    assert float(ea_loss(a, b)) == float(ea_loss(b, a)) > 0


def test_zero_lr_leaves_parameters():
    torch.manual_seed(0)
    net = ApparelEncoderNet(SMALL)
    before = parameter_digest(net)
    opt = make_optimizer(net.parameters(), lr=0.0, weight_decay=0.0)
    train_ea_step(net, random_images(4), opt)
    assert parameter_digest(net) == before


def test_step_returns_pre_step_loss():
    torch.manual_seed(0)
    net = ApparelEncoderNet(SMALL)
    x = random_images(4)
    net.train()
    with torch.no_grad():
        expected = float(ea_loss(x, net(x)))
    got = train_ea_step(net, x, make_optimizer(net.parameters(), lr=0.1))
    assert got == pytest.approx(expected, abs=1e-6)


def test_numeric_fault_names_block():
    torch.manual_seed(0)
    net = ApparelEncoderNet(SMALL)
    with torch.no_grad():
        net.encoder[2][0].weight.fill_(float("inf"))
    with pytest.raises(NumericFault, match="encoder block 2"):
        encode_cloth(net, random_images(1))


def test_estimator_fit_transform_reproducible():
    x = random_images(4)
    a = ApparelEncoder(widths=SMALL, n_steps=5, batch_size=2, random_state=3).fit(x)
    b = ApparelEncoder(widths=SMALL, n_steps=5, batch_size=2, random_state=3).fit(x)
    assert a.loss_curve_ == b.loss_curve_
    assert torch.equal(a.transform(x), b.transform(x))
    assert a.transform(x).shape == (4, 8, 2, 1)
    assert a.inverse_transform(a.transform(x)).shape == x.shape
    assert a.score(x) <= 0
    assert a.get_params()["widths"] == SMALL


def test_rejects_bad_inputs():
    net = ApparelEncoderNet(SMALL)
    with pytest.raises(ContractViolation, match="divisible"):
        encode_cloth(net, torch.zeros(1, 3, 60, 32))
    with pytest.raises(ContractViolation, match="outside"):
        encode_cloth(net, torch.full((1, 3, 64, 32), 2.0))
    with pytest.raises(ContractViolation, match="channels"):
        decode_cloth(net, torch.zeros(1, 4, 2, 1))
