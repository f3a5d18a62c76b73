import copy
import json
import math

import numpy as np
import pytest
import torch
from torch import nn

from apparelreid.asgan import (ASGAN, GeneratorNet, PatchDiscriminatorG, RefinedBlock,
                               asgan_losses, dg_score, discriminator_loss, generate,
                               synthesize_dataset, train_asgan_step, training_codes)
from apparelreid.encoder import ApparelEncoderNet, encode_cloth
from apparelreid.exceptions import ContractViolation, NoDonorError
from apparelreid.imaging import (DatasetManifest, ManifestRecord, composite_mask,
                                 load_and_normalize, load_mask)
from apparelreid.layers import down_block, parameter_digest
from apparelreid.training import make_optimizer

from conftest import random_images, random_masks

ENC = (8, 8, 8, 8, 8)
GEN = (6, 12, 8, 8, 8)
DISC = (4, 4, 8, 8, 8, 8)


def _nets(seed=0, dtype=torch.float32, refined=True):
    torch.manual_seed(seed)
    enc = ApparelEncoderNet(ENC).to(dtype)
    gen = GeneratorNet(GEN, code_channels=8, refined=refined).to(dtype)
    disc = PatchDiscriminatorG(DISC, image_size=(64, 32)).to(dtype)
    return enc, gen, disc


def test_full_size_bottleneck_and_output():
    torch.manual_seed(0)
    gen = GeneratorNet()
    rest = random_images(1, size=(256, 128))
    with torch.no_grad():
        assert gen.bottleneck(rest).shape == (1, 512, 8, 4)
    assert gen.mix.in_channels == 512 + 512
    out = generate(gen, rest[0], torch.zeros(512, 8, 4))
    assert out.shape == (3, 256, 128) and out.abs().max() <= 1


def test_refined_block_is_concatenation_of_branches():
    torch.manual_seed(0)
    block = RefinedBlock(6, 12).eval()
    x = torch.randn(2, 6, 16, 8)
    parts = torch.chunk(x, 3, dim=1)
    manual = torch.cat([block.branches[i](parts[i]) for i in range(3)], dim=1)
    assert torch.equal(block(x), manual)
    assert block(x).shape == (2, 12, 8, 4)
    kernels = [b[0].kernel_size for b in block.branches]
    assert kernels == [(1, 1), (4, 4), (7, 7)]


def test_normal_variant_uses_plain_block():
    gen = GeneratorNet(GEN, code_channels=8, refined=False)
    assert not isinstance(gen.down[1], RefinedBlock)
    assert gen.down[1][0].kernel_size == (4, 4)
    ref = down_block(6, 12)
    assert [type(m) for m in gen.down[1]] == [type(m) for m in ref]


def test_refined_block_requires_thirds():
    with pytest.raises(ContractViolation, match="divisible by 3"):
        RefinedBlock(64, 128)


def test_code_mismatch_is_reported():
    _, gen, _ = _nets()
    rest = random_images(1)
    with pytest.raises(ContractViolation, match="expects 8"):
        generate(gen, rest, torch.zeros(1, 4, 2, 1))
    with pytest.raises(ContractViolation, match="concatenated"):
        generate(gen, rest, torch.zeros(1, 8, 4, 2))


def test_generate_deterministic():
    _, gen, _ = _nets()
    rest, code = random_images(2), torch.randn(2, 8, 2, 1)
    assert torch.equal(generate(gen, rest, code), generate(gen, rest, code))


def test_dg_scores_one_per_image():
    _, _, disc = _nets()
    s = dg_score(disc, random_images(5))
    assert s.shape == (5,) and torch.isfinite(s).all()


class _Half(nn.Module):
    """Discriminator stand-in with constant zero logits (sigmoid 0.5)."""

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        return self.w * x.flatten(1).mean(1)


def test_loss_values_against_hand_oracles():
    enc, gen, _ = _nets()
    x, m = random_images(3), random_masks(3)
    cloth, rest = composite_mask(x, m)
    code = encode_cloth(enc, cloth)
    out = {k: v.detach() for k, v in asgan_losses(x, rest, code, gen, _Half(), 0.0).items()}
    assert float(out["loss_D"]) == pytest.approx(math.log(2), abs=1e-6)
    assert float(out["loss_G"]) == float(out["l1"])
    with torch.no_grad():
        plain = float((x - gen(rest, code)).abs().mean())
    assert float(out["l1"]) == pytest.approx(plain, abs=1e-6)
    weighted = {k: v.detach() for k, v in asgan_losses(x, rest, code, gen, _Half(), 0.5).items()}
    assert float(weighted["adv"]) == pytest.approx(math.log(2), abs=1e-6)


def test_perfect_generator_zero_loss():
    class Echo(nn.Module):
        def forward(self, rest, code):
            return self.target

    echo = Echo()
    x = random_images(2)
    echo.target = x
    out = asgan_losses(x, x * 0, torch.zeros(2, 8, 2, 1), echo, _Half(), lambda_dg=0.0)
    assert float(out["loss_G"]) == 0.0


def test_discriminator_loss_detaches_fake():
    _, gen, disc = _nets()
    rest, code = random_images(2), torch.randn(2, 8, 2, 1)
    fake = gen(rest, code)
    discriminator_loss(disc, random_images(2, seed=5), fake).backward()
    assert all(p.grad is None for p in gen.parameters())


def _step(enc, gen, disc, lr, seed=0):
    x, m = random_images(4, seed=seed), random_masks(4, seed=seed)
    opt_g = make_optimizer(gen.parameters(), lr=lr, weight_decay=0.0)
    opt_d = make_optimizer(disc.parameters(), lr=lr, weight_decay=0.0)
    return train_asgan_step(gen, disc, enc, x, m, opt_g, opt_d, np.random.default_rng(seed))


def test_zero_lr_leaves_all_parameters():
    enc, gen, disc = _nets()
    before = [parameter_digest(n) for n in (enc, gen, disc)]
    _step(enc, gen, disc, lr=0.0)
    assert [parameter_digest(n) for n in (enc, gen, disc)] == before


def test_step_losses_match_recomputation():
    enc, gen, disc = _nets(dtype=torch.float64)

    g0, d0 = copy.deepcopy(gen), copy.deepcopy(disc)
    x, m = random_images(4, dtype=torch.float64), random_masks(4, dtype=torch.float64)
    rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
    opt_g = make_optimizer(gen.parameters(), lr=0.05)
    opt_d = make_optimizer(disc.parameters(), lr=0.05)
    got = train_asgan_step(gen, disc, enc, x, m, opt_g, opt_d, rng_a)

    cloth, rest = composite_mask(x, m)
    code = training_codes(enc, cloth, rng_b)
    g0.train(), d0.train()
    pre = asgan_losses(x, rest, code, g0, d0)
    assert got["loss_D"] == pytest.approx(pre["loss_D"].item(), rel=1e-12)
    # the generator loss is taken against the discriminator after its step
    disc.train()
    post = asgan_losses(x, rest, code, g0, disc)
    assert got["l1"] == pytest.approx(post["l1"].item(), rel=1e-12)
    assert got["loss_G"] == pytest.approx(post["loss_G"].item(), rel=1e-12)


def test_each_step_updates_only_its_network():
    enc, gen, disc = _nets()
    x, m = random_images(4), random_masks(4)
    cloth, rest = composite_mask(x, m)
    code = encode_cloth(enc, cloth)
    opt_d = make_optimizer(disc.parameters(), lr=0.1)
    g_before, e_before = parameter_digest(gen), parameter_digest(enc)
    d_before = parameter_digest(disc)
    loss_d = discriminator_loss(disc, x, gen(rest, code))
    opt_d.zero_grad()
    loss_d.backward()
    opt_d.step()
    assert parameter_digest(gen) == g_before and parameter_digest(disc) != d_before
    d_mid = parameter_digest(disc)
    opt_g = make_optimizer(gen.parameters(), lr=0.1)
    loss_g = asgan_losses(x, rest, code, gen, disc)["loss_G"]
    opt_g.zero_grad()
    loss_g.backward()
    opt_g.step()
    assert parameter_digest(disc) == d_mid and parameter_digest(gen) != g_before
    assert parameter_digest(enc) == e_before


def test_full_step_keeps_encoder_frozen():
    enc, gen, disc = _nets()
    before = parameter_digest(enc, buffers=True)
    _step(enc, gen, disc, lr=0.1)
    assert parameter_digest(enc, buffers=True) == before


def test_synthesize_counts_and_determinism(tiny_corpus, tmp_path):
    enc, gen, _ = _nets()
    a = synthesize_dataset(gen, enc, tiny_corpus, 5, 1, tmp_path / "a", size=(64, 32))
    b = synthesize_dataset(gen, enc, tiny_corpus, 5, 1, tmp_path / "b", size=(64, 32))
    assert len(a) == 5 * len(tiny_corpus)
    assert [p.set_index for p in a].count(4) == len(tiny_corpus)
    assert [(p.original, p.synthetic) for p in a] == [(p.original, p.synthetic) for p in b]
    for p in a[:6]:
        assert (tmp_path / "a" / p.synthetic).read_bytes() == \
            (tmp_path / "b" / p.synthetic).read_bytes()
    report = json.loads((tmp_path / "a" / "synthesis_report.json").read_text())
    assert report["num_pairs"] == len(a) and report["skipped_no_mask"] == 0


def test_donor_is_never_the_source(tiny_corpus, tmp_path, monkeypatch):
    enc, gen, _ = _nets()
    import apparelreid.asgan as mod

    seen = []
    real_generate = mod.generate

    def spy(g, rest, codes):
        seen.append(codes.clone())
        return real_generate(g, rest, codes)

    monkeypatch.setattr(mod, "generate", spy)
    synthesize_dataset(gen, enc, tiny_corpus, 3, 0, tmp_path, size=(64, 32), batch_size=1000)
    x = torch.stack([load_and_normalize(tiny_corpus.image_path(i), (64, 32))
                     for i in range(len(tiny_corpus))])
    m = torch.stack([load_mask(tiny_corpus.mask_path(i), (64, 32))
                     for i in range(len(tiny_corpus))])
    own = encode_cloth(enc, composite_mask(x, m).cloth_image)
    for codes in seen:
        assert not any(torch.equal(codes[i], own[i]) for i in range(len(own)))


def test_no_donor_and_skipped_masks(tiny_corpus, tmp_path):
    enc, gen, _ = _nets()
    one = DatasetManifest(tiny_corpus.records[:1], tiny_corpus.root)
    with pytest.raises(NoDonorError):
        synthesize_dataset(gen, enc, one, 1, 0, tmp_path / "one", size=(64, 32))
    recs = list(tiny_corpus.records[:3]) + [ManifestRecord("x.png", 9, "g")]
    out = synthesize_dataset(gen, enc, DatasetManifest(recs, tiny_corpus.root), 2, 0,
                             tmp_path / "skip", size=(64, 32))
    assert len(out) == 6
    report = json.loads((tmp_path / "skip" / "synthesis_report.json").read_text())
    assert report["skipped_no_mask"] == 1


def test_estimator_swap_shapes():
    enc, _, _ = _nets()
    x, m = random_images(4), random_masks(4)
    est = ASGAN(enc, widths=GEN, disc_widths=DISC, image_size=(64, 32), n_steps=3,
                batch_size=2, random_state=0).fit(x, m)
    assert len(est.history_) == 3
    assert est.swap(x, m, x.flip(0), m.flip(0)).shape == x.shape
    assert est.reconstruct(x, m).shape == x.shape
    p = est.score_images(x)
    assert ((p > 0) & (p < 1)).all()


def test_variants_differ_only_in_second_block():
    torch.manual_seed(4)
    a = GeneratorNet(GEN, code_channels=8, refined=True)
    da = PatchDiscriminatorG(DISC, image_size=(64, 32))
    torch.manual_seed(4)
    b = GeneratorNet(GEN, code_channels=8, refined=False)
    db = PatchDiscriminatorG(DISC, image_size=(64, 32))
    sa, sb = a.state_dict(), b.state_dict()
    shared = [k for k in sa if not k.startswith("down.1.")]
    assert shared == [k for k in sb if not k.startswith("down.1.")]
    assert all(torch.equal(sa[k], sb[k]) for k in shared)
    assert set(k for k in sa if k.startswith("down.1.")) != \
        set(k for k in sb if k.startswith("down.1."))
    assert parameter_digest(da) == parameter_digest(db)
