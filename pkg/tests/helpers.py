"""Shared routines and independent oracles for the test suite."""

import math

import numpy as np
import torch

from msvq.losses import recon_loss
from msvq.model import MSVQVAE, tiny_config


def gradient_check(n_coords: int = 200, seed: int = 0, step: float = 1e-6, config=None):
    """Relative errors between straight-through parameter gradients of the
    reconstruction loss and central finite differences.

    Finite differences run on the model linearized at the current codeword
    assignments (quantized value = latent + frozen offset), which is the
    function whose derivative the straight-through estimator claims to be.
    """
    torch.set_num_threads(1)
    model = MSVQVAE(config or tiny_config(), seed=seed).double()
    x = torch.from_numpy(np.random.default_rng(seed).uniform(size=(1, 3, 4, 8, 8)))

    out = model(x)
    residuals = {"bottom": (out.q_bottom - out.e_bottom).detach()}
    if out.q_top is not None:
        residuals["top"] = (out.q_top - out.e_top).detach()

    model.zero_grad()
    recon_loss(x, out.reconstruction).backward()
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed + 1)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.cumsum([0] + sizes)

    def linearized_loss():
        with torch.no_grad():
            return recon_loss(x, model(x, residuals=residuals).reconstruction).item()

    errors = []
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[k].data.view(-1)
        i = int(flat - offsets[k])
        analytic = params[k].grad.view(-1)[i].item()
        orig = p[i].item()
        p[i] = orig + step
        plus = linearized_loss()
        p[i] = orig - step
        minus = linearized_loss()
        p[i] = orig
        numeric = (plus - minus) / (2 * step)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10))
    return np.array(errors)


def naive_psnr(a, b, cap=100.0):
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    mse = sum((x - y) ** 2 for x, y in zip(a, b)) / a.size
    return cap if mse == 0 else min(cap, 10 * math.log10(255.0 ** 2 / mse))


def naive_ssim(a, b, size=11, sigma=1.5, L=255.0):
    """Direct windowed evaluation: weighted moments per window position."""
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    r = size // 2
    g = np.array([math.exp(-((i - r) ** 2) / (2 * sigma ** 2)) for i in range(size)])
    w2 = np.outer(g, g)
    w2 /= w2.sum()
    per_channel = []
    for ch in range(a.shape[0]):
        vals = []
        for y in range(a.shape[1] - size + 1):
            for x in range(a.shape[2] - size + 1):
                pa = a[ch, y:y + size, x:x + size]
                pb = b[ch, y:y + size, x:x + size]
                ma = (w2 * pa).sum()
                mb = (w2 * pb).sum()
                va = (w2 * (pa - ma) ** 2).sum()
                vb = (w2 * (pb - mb) ** 2).sum()
                cov = (w2 * (pa - ma) * (pb - mb)).sum()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                            / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


def brute_argmin(vectors, emb):
    out = []
    for v in vectors:
        best, best_d = 0, None
        for j, e in enumerate(emb):
            d = sum((a - b) ** 2 for a, b in zip(v, e))
            if best_d is None or d < best_d:
                best, best_d = j, d
        out.append(best)
    return np.array(out)
