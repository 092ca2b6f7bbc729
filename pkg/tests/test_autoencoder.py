import numpy as np
import pytest
import torch

from helpers import finite_difference_error
from ldpatch.autoencoder import (AEConfig, Autoencoder, TrainingDiverged, decode, encode,
                                 load_autoencoder, reconstruction_mse, save_autoencoder,
                                 train_autoencoder)
from ldpatch.core import RandomSource, seeded_init
from ldpatch.synthetic import natural_corpus

TINY = AEConfig(image_size=16, downsample_factor=4, latent_depth=2, epochs=1, batch_size=8)


def _model(cfg=AEConfig(), seed=0, double=False):
    m = seeded_init(Autoencoder, cfg, seed=seed).eval()
    return m.double() if double else m


def test_default_shapes():
    ae = _model()
    x = torch.rand(3, 64, 64)
    z = encode(ae, x)
    assert z.shape == (8, 8, 8)
    assert decode(ae, z).shape == (3, 64, 64)
    assert encode(ae, torch.rand(5, 3, 64, 64)).shape == (5, 8, 8, 8)
    # shape law: H / h == f
    assert 64 // z.shape[-1] == AEConfig().downsample_factor


def test_shape_mismatch_is_explicit():
    ae = _model()
    with pytest.raises(ValueError, match="shape"):
        encode(ae, torch.rand(3, 32, 32))
    with pytest.raises(ValueError, match="shape"):
        decode(ae, torch.rand(8, 4, 4))


@pytest.mark.parametrize("kwargs", [dict(image_size=60), dict(downsample_factor=6),
                                    dict(image_size=16, downsample_factor=8),
                                    dict(latent_depth=0)])
def test_config_invariants(kwargs):
    with pytest.raises(ValueError):
        AEConfig(**kwargs)


def test_encode_deterministic():
    ae = _model()
    x = torch.rand(3, 64, 64)
    with torch.no_grad():
        assert torch.equal(encode(ae, x), encode(ae, x))


def test_decode_range_on_random_latents():
    ae = _model()
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        out = decode(ae, 10 * torch.randn(100, 8, 8, 8, generator=g))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_encode_gradient():
    ae = _model(TINY, double=True)
    x = torch.rand(3, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    assert finite_difference_error(lambda v: encode(ae, v).sum(), x, n_coords=64) < 1e-3


def test_decode_gradient():
    ae = _model(TINY, double=True)
    z = torch.randn(2, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    w = torch.rand(3, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    assert finite_difference_error(lambda v: (decode(ae, v) * w).sum(), z) < 1e-3


def test_constant_corpus_is_learned():
    data = [torch.full((3, 16, 16), 0.3)] * 256
    cfg = AEConfig(image_size=16, downsample_factor=4, latent_depth=2, epochs=40,
                   learning_rate=1e-3, batch_size=16)
    ae = train_autoencoder(data, cfg, RandomSource(0))
    assert reconstruction_mse(ae, data[:8]) < 1e-4


def test_same_seed_same_weights():
    data = natural_corpus(16, 16, RandomSource(4))
    a = train_autoencoder(data, TINY, RandomSource(5))
    b = train_autoencoder(data, TINY, RandomSource(5))
    c = train_autoencoder(data, TINY, RandomSource(6))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_history_is_logged_per_epoch():
    data = natural_corpus(16, 16, RandomSource(4))
    history = []
    train_autoencoder(data, AEConfig(image_size=16, downsample_factor=4, latent_depth=2,
                                     epochs=3, batch_size=8), RandomSource(0), history)
    assert len(history) == 3 and all(np.isfinite(history))


def test_divergence_is_reported():
    data = [torch.full((3, 16, 16), float("nan"))]
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train_autoencoder(data, TINY, RandomSource(0))


def test_rejects_bad_dataset():
    with pytest.raises(ValueError):
        train_autoencoder([], TINY, RandomSource(0))
    with pytest.raises(ValueError, match="shape"):
        train_autoencoder([torch.rand(3, 8, 8)], TINY, RandomSource(0))


def test_artifact_roundtrip(tmp_path):
    ae = _model(TINY)
    save_autoencoder(ae, tmp_path / "ae.art")
    back = load_autoencoder(tmp_path / "ae.art")
    assert back.cfg == TINY
    x = torch.rand(2, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(ae(x), back(x))
