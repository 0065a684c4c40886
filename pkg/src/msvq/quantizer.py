"""Codebooks, nearest-neighbour assignment, EMA maintenance and the
straight-through gradient path."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor, nn

from . import kernels
from .errors import DimensionError, ValidationError


class Codebook(nn.Module):
    """K x D embedding table maintained by exponential moving averages.

    ``ema_cluster_size`` holds the raw (unsmoothed) running counts; the
    Laplace-smoothed counts are recomputed on every update so that
    ``embeddings == ema_embed_sum / smoothed(ema_cluster_size)`` always holds.
    """

    def __init__(self, num_embeddings: int, dim: int, decay: float = 0.99,
                 laplace_eps: float = 1e-5, seed: int = 0):
        super().__init__()
        if num_embeddings < 1 or dim < 1:
            raise ValidationError(f"codebook needs K >= 1 and D >= 1, got K={num_embeddings}, D={dim}")
        if not 0.0 <= decay <= 1.0:
            raise ValidationError(f"decay must lie in [0, 1], got {decay}")
        if laplace_eps <= 0:
            raise ValidationError("laplace_eps must be positive")
        self.num_embeddings = num_embeddings
        self.dim = dim
        self.decay = decay
        self.laplace_eps = laplace_eps

        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / num_embeddings
        init = (torch.rand(num_embeddings, dim, generator=gen, dtype=torch.float64) * 2 - 1) * bound
        self.register_buffer("embeddings", init.float())
        self.register_buffer("ema_cluster_size", torch.ones(num_embeddings))
        self.register_buffer("ema_embed_sum", init.float().clone())
        # diagnostic only; not persisted
        self.lookups = 0
        self.updates = 0

    def extra_repr(self) -> str:
        return f"K={self.num_embeddings}, D={self.dim}, decay={self.decay}"


def quantize(vectors: Tensor, codebook: Codebook) -> tuple[Tensor, Tensor]:
    """Assign each row of ``vectors`` (N x D) to its nearest codeword.

    Returns ``(indices, quantized)`` where ``quantized[i]`` is exactly
    ``codebook.embeddings[indices[i]]``.  Ties go to the lowest index.
    """
    if vectors.dim() != 2 or vectors.shape[1] != codebook.dim:
        raise DimensionError(
            f"expected vectors of shape (N, {codebook.dim}), got {tuple(vectors.shape)}")
    codebook.lookups += 1
    emb = codebook.embeddings
    idx = kernels.nearest_codeword(vectors.detach().cpu().numpy(), emb.detach().cpu().numpy())
    indices = torch.from_numpy(idx).to(vectors.device)
    return indices, emb[indices].to(vectors.dtype)


def lookup(indices: Tensor, codebook: Codebook) -> Tensor:
    """Codewords for an integer index tensor of any shape (appends a D axis)."""
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= codebook.num_embeddings):
        raise ValidationError(f"index out of range for K={codebook.num_embeddings}")
    codebook.lookups += 1
    return codebook.embeddings[indices.long()]


@torch.no_grad()
def ema_update(codebook: Codebook, vectors: Tensor, indices: Tensor) -> Codebook:
    """One EMA step of counts, sums and the smoothed embeddings (in place)."""
    k = codebook.num_embeddings
    idx = indices.detach().reshape(-1).cpu().numpy().astype(np.int64)
    vec = vectors.detach().reshape(-1, codebook.dim).cpu().numpy()
    if idx.shape[0] != vec.shape[0]:
        raise DimensionError("one index per vector required")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ValidationError(f"index out of range for K={k}")
    counts, sums = kernels.assignment_stats(vec, idx, k)

    decay = codebook.decay
    n = codebook.ema_cluster_size.detach().cpu().numpy().astype(np.float64)
    m = codebook.ema_embed_sum.detach().cpu().numpy().astype(np.float64)
    n = decay * n + (1.0 - decay) * counts
    m = decay * m + (1.0 - decay) * sums
    total = n.sum()
    eps = codebook.laplace_eps
    smoothed = (n + eps) / (total + k * eps) * total
    emb = m / smoothed[:, None]

    dtype = codebook.embeddings.dtype
    codebook.ema_cluster_size.copy_(torch.from_numpy(n).to(dtype))
    codebook.ema_embed_sum.copy_(torch.from_numpy(m).to(dtype))
    codebook.embeddings.copy_(torch.from_numpy(emb).to(dtype))
    codebook.updates += 1
    return codebook


def commitment_loss(vectors: Tensor, quantized: Tensor) -> Tensor:
    """mean ||v - stopgrad(q)||^2 over all elements; gradient reaches v only."""
    if vectors.shape != quantized.shape:
        raise DimensionError(f"shape mismatch {tuple(vectors.shape)} vs {tuple(quantized.shape)}")
    return torch.mean((vectors - quantized.detach()) ** 2)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, vectors, quantized):
        return quantized.detach().clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def straight_through(vectors: Tensor, quantized: Tensor) -> Tensor:
    """Forward value is exactly ``quantized``; the Jacobian w.r.t. ``vectors``
    is the identity."""
    if vectors.shape != quantized.shape:
        raise DimensionError(f"shape mismatch {tuple(vectors.shape)} vs {tuple(quantized.shape)}")
    return _StraightThrough.apply(vectors, quantized)


def perplexity(indices, num_embeddings: int) -> float:
    idx = np.asarray(indices.detach().cpu() if isinstance(indices, Tensor) else indices).reshape(-1)
    if idx.size == 0:
        raise ValidationError("perplexity of an empty index set is undefined")
    if idx.min() < 0 or idx.max() >= num_embeddings:
        raise ValidationError(f"index out of range for K={num_embeddings}")
    p = np.bincount(idx.astype(np.int64), minlength=num_embeddings) / idx.size
    p = p[p > 0]
    return float(math.exp(-np.sum(p * np.log(p))))
