import math

import numpy as np
import pytest
import torch

from helpers import finite_difference_error
from ldpatch.core import RandomSource
from ldpatch.diffusion import (DiffusionConfig, DiffusionError, Denoiser, forward_sample,
                               load_diffusion, make_schedule, sample_chain, save_diffusion,
                               strided, train_step)


def test_two_step_schedule():
    s = make_schedule(2, 0.1, 0.1)
    assert s.alpha_bar.tolist() == pytest.approx([0.9, 0.81])
    assert s.timesteps.tolist() == [1, 2]


def test_reference_linear_schedule():
    s = make_schedule(100, 1e-4, 0.02)
    abar = s.alpha_bar.numpy()
    expected = np.cumprod(1 - np.linspace(1e-4, 0.02, 100))
    np.testing.assert_allclose(abar, expected, rtol=1e-12)
    assert abar[-1] < 0.37
    assert np.all(np.diff(abar) < 0)


def test_default_schedule_is_valid():
    s = DiffusionConfig().schedule()
    assert s.T == 100
    assert s.alpha_bar[-1].item() == pytest.approx(float(np.prod(1 - np.linspace(1e-4, 0.02, 100))))
    assert torch.all(s.beta > 0) and torch.all(s.beta < 1)
    assert torch.all(s.beta[1:] >= s.beta[:-1])


@pytest.mark.parametrize("args", [(100, 0.02, 1e-4), (1, 0.1, 0.1), (10, 0.0, 0.1), (10, 0.1, 1.0)])
def test_schedule_rejects_invalid(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_strided_schedule_keeps_alpha_bar():
    s = make_schedule(100, 1e-4, 0.2)
    sub = strided(s, 4)
    assert sub.T == 25
    assert sub.timesteps[-1].item() == 100 and sub.timesteps[0].item() == 4
    torch.testing.assert_close(sub.alpha_bar, s.alpha_bar[sub.timesteps - 1])
    assert strided(s, 1) is s


def test_forward_sample_closed_form():
    s = make_schedule(2, 0.1, 0.1)
    z0 = torch.randn(4, 2, 2)
    torch.testing.assert_close(forward_sample(s, z0, 1, torch.zeros_like(z0)),
                               math.sqrt(0.9) * z0)
    with pytest.raises(ValueError):
        forward_sample(s, z0, 3, z0)
    with pytest.raises(ValueError):
        forward_sample(s, z0, 0, z0)


def test_forward_sample_scalar_and_no_noise_limit():
    # abar = 0.25 after two steps of beta = 0.75 ... use a custom schedule through strided math
    s = make_schedule(2, 0.5, 0.5)
    z = forward_sample(s, torch.tensor([1.0]), 2, torch.tensor([0.0]))
    assert z.item() == pytest.approx(0.5)
    tiny = make_schedule(2, 1e-12, 1e-12)
    z0 = torch.randn(3, dtype=torch.float64)
    torch.testing.assert_close(forward_sample(tiny, z0, 1, torch.randn(3, dtype=torch.float64)), z0,
                               atol=1e-5, rtol=0)


def test_forward_marginal_at_T():
    s = DiffusionConfig().schedule()
    rng = RandomSource(0)
    z0 = rng.normal(10_000, dtype=torch.float64)
    zt = forward_sample(s, z0, s.T, rng.normal(10_000, dtype=torch.float64))
    assert abs(zt.mean().item()) < 0.05
    assert abs(zt.var().item() - 1) < 0.1


def _zero_net(channels, T):
    net = Denoiser(channels, T, width=8, emb_dim=8)
    with torch.no_grad():
        net.out.weight.zero_()
        net.out.bias.zero_()
    return net


def test_zero_network_loss_is_noise_energy():
    s = make_schedule(50, 1e-4, 0.2)
    net = _zero_net(4, 50)
    opt = torch.optim.SGD(net.parameters(), lr=0.0)
    rng = RandomSource(1)
    losses = [train_step(net, opt, s, torch.randn(256, 4, 4, 4), rng) for _ in range(5)]
    assert np.mean(losses) == pytest.approx(1.0, abs=0.02)


def test_train_step_loss_positive_and_rejects_empty():
    s = make_schedule(10, 1e-4, 0.2)
    net = Denoiser(2, 10, width=8, emb_dim=8)
    opt = torch.optim.Adam(net.parameters(), 1e-3)
    loss = train_step(net, opt, s, torch.randn(8, 2, 4, 4), RandomSource(0))
    assert math.isfinite(loss) and loss > 0
    with pytest.raises(ValueError):
        train_step(net, opt, s, torch.zeros(0, 2, 4, 4), RandomSource(0))


def _mixture(n, rng):
    comp = rng.np.integers(0, 2, n) * 2 - 1
    x = comp[:, None] * np.array([1.5, -1.0]) + 0.3 * rng.np.standard_normal((n, 2))
    return torch.tensor(x, dtype=torch.float32)[:, :, None, None]


def test_train_step_curve_halves_on_toy_mixture():
    data = _mixture(2000, RandomSource(4))
    s = make_schedule(100, 1e-4, 0.2)
    net = Denoiser(2, 100)
    opt = torch.optim.Adam(net.parameters(), 1e-3)
    rng = RandomSource(5)
    hist = []
    for _ in range(500):
        idx = torch.randint(0, len(data), (128,), generator=rng.torch)
        hist.append(train_step(net, opt, s, data[idx], rng))
    early = np.mean(hist[:10])
    late = np.mean(hist[-50:])
    assert late <= 0.5 * early


def test_single_step_chain_closed_form():
    s = make_schedule(2, 0.1, 0.3)
    one = type(s)(s.beta[:1], s.timesteps[:1])
    net = _zero_net(3, 2)
    z = torch.randn(3, 4, 4)
    out = sample_chain(net, one, z, "zero")
    torch.testing.assert_close(out, z / math.sqrt(0.9))


def test_frozen_chain_deterministic_fresh_not():
    s = make_schedule(10, 1e-4, 0.2)
    net = Denoiser(2, 10, width=8, emb_dim=8)
    z = torch.randn(2, 4, 4)
    with torch.no_grad():
        a = sample_chain(net, s, z, "frozen", RandomSource(3))
        b = sample_chain(net, s, z, "frozen", RandomSource(3))
        c = sample_chain(net, s, z, "frozen", RandomSource(4))
        rng = RandomSource(3)
        f1 = sample_chain(net, s, z, "fresh", rng)
        f2 = sample_chain(net, s, z, "fresh", rng)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert not torch.equal(f1, f2)
    with pytest.raises(ValueError):
        sample_chain(net, s, z, "bogus")


def test_chain_reports_non_finite_step():
    s = make_schedule(5, 1e-4, 0.2)
    net = Denoiser(2, 5, width=8, emb_dim=8)
    with torch.no_grad():
        net.out.bias.fill_(float("inf"))
    with pytest.raises(DiffusionError, match="step index 5"):
        sample_chain(net, s, torch.zeros(2, 4, 4), "zero")


def test_chain_gradient_frozen_mode():
    s = make_schedule(5, 1e-3, 0.2)
    torch.manual_seed(0)
    net = Denoiser(2, 5, width=8, emb_dim=8).double()
    zT = torch.randn(2, 4, 4, dtype=torch.float64)
    err = finite_difference_error(lambda z: sample_chain(net, s, z, "frozen", 11).sum(), zT)
    assert err < 1e-3


def test_artifact_roundtrip(tmp_path):
    cfg = DiffusionConfig(T=10, width=8, emb_dim=8, steps=1)
    net = Denoiser(2, 10, width=8, emb_dim=8)
    net.latent_scale.fill_(0.25)
    save_diffusion(net, cfg, tmp_path / "d.art")
    loaded, cfg2, meta = load_diffusion(tmp_path / "d.art")
    assert cfg2 == cfg
    assert loaded.latent_scale.item() == 0.25
    z = torch.randn(1, 2, 4, 4)
    t = torch.tensor([3])
    assert torch.equal(net(z, t), loaded(z, t))
