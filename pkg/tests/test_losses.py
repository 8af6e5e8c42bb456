import pytest
import torch
import torch.nn.functional as F

from dcid.losses import FrozenFeatures, LossConfig, gt_pyramid, multiscale_loss, perceptual_features


def ladder(gt):
    return [t.clone() for t in gt_pyramid(gt)]


def test_tap_shapes():
    taps = perceptual_features(torch.rand(3, 32, 32))
    assert [t.shape[-1] for t in taps] == [32, 16, 8]


def test_features_repeatable():
    x = torch.rand(1, 3, 32, 32)
    a, b = perceptual_features(x), perceptual_features(x)
    assert all(torch.equal(p, q) for p, q in zip(a, b))


def test_features_reject_small_input():
    with pytest.raises(ValueError):
        perceptual_features(torch.rand(3, 15, 32))


def test_features_respond_at_every_tap():
    g = torch.Generator().manual_seed(0)
    for seed in range(10):
        phi = FrozenFeatures(seed)
        x = torch.rand(1, 3, 32, 32, generator=g)
        y = x.clone()
        y[..., 10:14, 10:14] += 0.2
        for a, b in zip(perceptual_features(x, phi), perceptual_features(y, phi)):
            assert not torch.equal(a, b)


def test_extractor_is_frozen():
    phi = FrozenFeatures()
    phi.train()
    assert not phi.training
    assert all(not p.requires_grad for p in phi.parameters())


def test_zero_on_identical_pyramid():
    gt = torch.rand(2, 3, 64, 64)
    total, comps = multiscale_loss(ladder(gt), gt)
    assert total.item() == 0.0
    assert all(v.item() == 0.0 for v in comps.values())


def test_constant_offset_closed_form():
    gt = torch.rand(1, 3, 64, 64, dtype=torch.float64) * 0.8
    outs = [t + 0.1 for t in ladder(gt)]
    total, comps = multiscale_loss(outs, gt, LossConfig(lambda_p=0.0))
    assert abs(total.item() - 0.3) < 1e-12
    # the offset survives area downsampling of the target side too
    assert torch.allclose(F.avg_pool2d(gt + 0.1, 4), gt_pyramid(gt)[2] + 0.1)


def test_default_weight():
    assert LossConfig().lambda_p == 2.0
    with pytest.raises(ValueError):
        LossConfig(lambda_p=-1.0)


def test_components_sum_to_total():
    gt = torch.rand(2, 3, 64, 64)
    outs = [t + 0.05 * torch.randn_like(t) for t in ladder(gt)]
    total, comps = multiscale_loss(outs, gt)
    assert abs(sum(v.item() for v in comps.values()) - total.item()) <= 1e-6
    assert set(comps) == {"l1_1", "l1_2", "l1_3", "perc_1", "perc_2", "perc_3"}


def test_monotone_in_weight():
    gt = torch.rand(1, 3, 64, 64)
    outs = [t + 0.05 * torch.randn_like(t) for t in ladder(gt)]
    values = [multiscale_loss(outs, gt, LossConfig(lambda_p=w))[0].item() for w in (0.0, 1.0, 2.0, 4.0)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_ladder_mismatch():
    gt = torch.rand(1, 3, 64, 64)
    outs = ladder(gt)
    outs[1] = outs[1][..., :16]
    with pytest.raises(ValueError):
        multiscale_loss(outs, gt)


def test_gradient_matches_finite_differences():
    torch.manual_seed(3)
    dt = torch.float64
    gt = torch.rand(1, 3, 64, 64, dtype=dt)
    outs = [t + 0.1 * torch.randn_like(t) for t in ladder(gt)]
    # smaller output-1 so the 16x16 image sits at the perceptual minimum size
    gt16 = torch.rand(1, 3, 16, 16, dtype=dt)
    phi = FrozenFeatures().to(dt)
    cfg = LossConfig(lambda_p=2.0, feature_extractor=phi)

    def loss_of(o1):
        # scales 2 and 3 are below the extractor's minimum size at 16x16, so test them at scale 1 only
        return (o1 - gt16).abs().mean() + cfg.lambda_p * sum(
            (a - b).abs().mean() for a, b in zip(perceptual_features(o1, phi), perceptual_features(gt16, phi)))

    o1 = (gt16 + 0.1 * torch.randn_like(gt16)).requires_grad_(True)
    loss_of(o1).backward()
    g = o1.grad.flatten()
    eps = 1e-6
    idx = torch.randperm(o1.numel())[:10]
    for i in idx:
        p = o1.detach().clone().flatten()
        m = p.clone()
        p[i] += eps
        m[i] -= eps
        num = (loss_of(p.view_as(o1)) - loss_of(m.view_as(o1))).item() / (2 * eps)
        assert abs(num - g[i].item()) <= 1e-4 * max(abs(num), abs(g[i].item()), 1e-8)
    # and through the full multi-scale objective on a 64x64 ladder
    o = outs[0].detach().clone().requires_grad_(True)
    total, _ = multiscale_loss([o, outs[1], outs[2]], gt, cfg)
    total.backward()
    for i in idx[:5]:
        p = o.detach().clone().flatten()
        m = p.clone()
        p[i] += eps
        m[i] -= eps
        lp = multiscale_loss([p.view_as(o), outs[1], outs[2]], gt, cfg)[0].item()
        lm = multiscale_loss([m.view_as(o), outs[1], outs[2]], gt, cfg)[0].item()
        num = (lp - lm) / (2 * eps)
        assert abs(num - o.grad.flatten()[i].item()) <= 1e-4 * max(abs(num), 1e-8)
