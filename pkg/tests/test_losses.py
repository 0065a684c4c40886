import numpy as np
import pytest
import torch

from msvq.checkpoint import write_ntc
from msvq.errors import DimensionError, NonFiniteError, ValidationError
from msvq.losses import (LossWeights, ProxyExtractor, VGG16Extractor, perceptual_loss,
                         recon_loss, total_loss)


def naive_conv_relu(x, w, b):
    # x (C, H, W); 3x3 zero-padded convolution written as explicit sums
    cin, h, wd = x.shape
    pad = np.zeros((cin, h + 2, wd + 2))
    pad[:, 1:-1, 1:-1] = x
    out = np.zeros((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        for i in range(h):
            for j in range(wd):
                out[o, i, j] = b[o] + (w[o] * pad[:, i:i + 3, j:j + 3]).sum()
    return np.maximum(out, 0)


def naive_avgpool(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def naive_proxy_features(ext, frame):
    feats, h = [], frame
    for i, name in enumerate(ext.taps):
        conv = ext.stages[name][-2]
        if i:
            h = naive_avgpool(h)
        h = naive_conv_relu(h, conv.weight.double().numpy(), conv.bias.double().numpy())
        feats.append(h)
    return feats


def test_recon_examples():
    x = torch.rand(3, 2, 4, 4)
    assert recon_loss(x, x).item() == 0.0
    assert recon_loss(torch.zeros(3, 2, 4, 4), torch.ones(3, 2, 4, 4)).item() == 1.0
    assert recon_loss(torch.zeros(3, 2, 4, 4), torch.full((3, 2, 4, 4), 0.5)).item() == 0.25
    with pytest.raises(DimensionError):
        recon_loss(x, x[:, :1])


def test_perceptual_identical_is_zero():
    ext = ProxyExtractor()
    x = torch.rand(3, 4, 8, 8)
    assert perceptual_loss(x, x.clone(), ext, LossWeights()).item() == 0.0


def test_perceptual_matches_direct_evaluation():
    ext = ProxyExtractor().double()
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(3, 8, 8))
    b = rng.uniform(size=(3, 8, 8))
    lam = [1.0, 0.5, 2.0]
    got = perceptual_loss(torch.from_numpy(a)[:, None], torch.from_numpy(b)[:, None], ext, lam).item()
    fa, fb = naive_proxy_features(ext, a), naive_proxy_features(ext, b)
    expected = sum(w * np.abs(x - y).mean() for w, x, y in zip(lam, fa, fb))
    assert got == pytest.approx(expected, rel=1e-10)


def test_single_tap_is_mean_frame_distance():
    ext = ProxyExtractor().double()
    ext.taps = ["stage1"]
    x = torch.rand(3, 5, 8, 8, dtype=torch.float64)
    y = torch.rand(3, 5, 8, 8, dtype=torch.float64)
    got = perceptual_loss(x, y, ext, [1.0]).item()
    per_frame = [np.abs(naive_proxy_features(ext, x[:, t].numpy())[0]
                        - naive_proxy_features(ext, y[:, t].numpy())[0]).mean() for t in range(5)]
    assert got == pytest.approx(np.mean(per_frame), rel=1e-10)


def test_perceptual_symmetric_and_checked():
    ext = ProxyExtractor()
    x, y = torch.rand(2, 3, 2, 8, 8), torch.rand(2, 3, 2, 8, 8)
    assert perceptual_loss(x, y, ext, LossWeights()).item() == pytest.approx(
        perceptual_loss(y, x, ext, LossWeights()).item(), rel=1e-6)
    with pytest.raises(ValidationError):
        perceptual_loss(x, y, ext, [1.0, 1.0])
    with pytest.raises(DimensionError):
        perceptual_loss(x, y[:, :, :1], ext, LossWeights())


def test_proxy_is_deterministic_and_frozen():
    a, b = ProxyExtractor(), ProxyExtractor()
    x = torch.rand(2, 3, 8, 8)
    for fa, fb in zip(a(x), b(x)):
        assert torch.equal(fa, fb)
    assert not any(p.requires_grad for p in a.parameters())
    assert a.calls == 1


def test_perceptual_gradient_reaches_reconstruction():
    ext = ProxyExtractor()
    x = torch.rand(3, 2, 8, 8)
    y = torch.rand(3, 2, 8, 8, requires_grad=True)
    perceptual_loss(x, y, ext, LossWeights()).backward()
    assert y.grad.abs().sum() > 0


def test_total_loss_examples():
    w = LossWeights()
    assert (w.beta, w.gamma, w.layer_weights) == (1.0, 0.4, [1.0, 1.0, 1.0])
    assert float(total_loss(1.0, 0.25, 0.25, 0.25, w)) == pytest.approx(1.6)
    assert float(total_loss(0.7, 3.0, 2.0, 9.0, LossWeights(beta=0, gamma=0))) == 0.7
    for unit, coef in zip(np.eye(4), (1.0, 2.0, 2.0, 0.3)):
        wt = LossWeights(beta=2.0, gamma=0.3)
        assert float(total_loss(*unit, wt)) == pytest.approx(coef)


def test_total_loss_rejects_bad_components():
    with pytest.raises(NonFiniteError):
        total_loss(torch.tensor(float("nan")), 0.0, 0.0, 0.0, LossWeights())
    with pytest.raises(ValidationError):
        total_loss(-1.0, 0.0, 0.0, 0.0, LossWeights())
    with pytest.raises(ValidationError):
        LossWeights(gamma=-0.1)


def random_vgg_tensors(seed=0):
    rng = np.random.default_rng(seed)
    shapes = [(0, 3, 64), (2, 64, 64), (5, 64, 128), (7, 128, 128),
              (10, 128, 256), (12, 256, 256), (14, 256, 256)]
    out = {}
    for idx, cin, cout in shapes:
        out[f"features.{idx}.weight"] = (rng.normal(size=(cout, cin, 3, 3)) * 0.05).astype(np.float32)
        out[f"features.{idx}.bias"] = np.zeros(cout, np.float32)
    return out


def test_vgg_loads_from_checkpoint(tmp_path):
    tensors = random_vgg_tensors()
    write_ntc(tmp_path / "vgg.ntc", tensors)
    ext = VGG16Extractor.from_checkpoint(tmp_path / "vgg.ntc")
    feats = ext(torch.rand(2, 3, 16, 16))
    assert [tuple(f.shape) for f in feats] == [(2, 64, 16, 16), (2, 128, 8, 8), (2, 256, 4, 4)]
    np.testing.assert_array_equal(ext.stages["relu1_1"][-2].weight.detach().numpy(),
                                  tensors["features.0.weight"])
    # first tap against a direct two-layer evaluation
    x = torch.rand(1, 3, 8, 8)
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    h = ((x - mean) / std)[0].double().numpy()
    h = naive_conv_relu(h, tensors["features.0.weight"].astype(np.float64), tensors["features.0.bias"])
    h = naive_conv_relu(h, tensors["features.2.weight"].astype(np.float64), tensors["features.2.bias"])
    np.testing.assert_allclose(ext(x)[0][0].numpy(), h, atol=1e-4)


def test_vgg_rejects_bad_weights():
    tensors = random_vgg_tensors()
    del tensors["features.7.bias"]
    with pytest.raises(ValidationError):
        VGG16Extractor(tensors)
    with pytest.raises(ValidationError):
        VGG16Extractor(random_vgg_tensors(), taps=("relu9_9",))
