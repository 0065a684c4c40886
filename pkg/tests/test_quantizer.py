import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import brute_argmin
from msvq import kernels
from msvq.errors import DimensionError, ValidationError
from msvq.quantizer import (Codebook, commitment_loss, ema_update, perplexity, quantize,
                            straight_through)


def make_codebook(emb, decay=0.99, eps=1e-5):
    emb = torch.as_tensor(emb, dtype=torch.float64)
    cb = Codebook(emb.shape[0], emb.shape[1], decay=decay, laplace_eps=eps).double()
    cb.embeddings.copy_(emb)
    cb.ema_embed_sum.copy_(emb)
    cb.ema_cluster_size.fill_(1.0)
    return cb


# --- quantize ---------------------------------------------------------------

def test_quantize_nearest_example():
    cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
    idx, q = quantize(torch.tensor([[0.1, 0.2]], dtype=torch.float64), cb)
    assert idx.tolist() == [0]
    assert q.tolist() == [[0.0, 0.0]]


def test_quantize_exact_codeword():
    cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
    v = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
    idx, q = quantize(v, cb)
    assert idx.tolist() == [1]
    assert torch.equal(q, v)


def test_quantize_tie_goes_to_lowest_index():
    cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
    idx, _ = quantize(torch.tensor([[0.5, 0.5]], dtype=torch.float64), cb)
    assert idx.tolist() == [0]


def test_quantize_dimension_mismatch():
    cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(DimensionError):
        quantize(torch.zeros(3, 3, dtype=torch.float64), cb)


@pytest.mark.parametrize("impl", [kernels.nearest_codeword_numba, kernels.nearest_codeword_numpy])
def test_kernel_paths_match_oracle(impl):
    rng = np.random.default_rng(3)
    for _ in range(20):
        k, d, n = rng.integers(1, 33), rng.integers(1, 9), rng.integers(1, 65)
        emb = rng.normal(size=(k, d))
        v = rng.normal(size=(n, d))
        np.testing.assert_array_equal(impl(v, emb), brute_argmin(v, emb))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 32), st.integers(1, 8), st.integers(1, 64), st.integers(0, 2**31))
def test_quantize_matches_exhaustive_oracle(k, d, n, seed):
    rng = np.random.default_rng(seed)
    # small integer grid forces frequent exact ties
    emb = rng.integers(-2, 3, size=(k, d)).astype(np.float64)
    v = rng.integers(-2, 3, size=(n, d)) / 2.0
    cb = make_codebook(emb)
    idx, q = quantize(torch.from_numpy(v), cb)
    np.testing.assert_array_equal(idx.numpy(), brute_argmin(v, emb))
    np.testing.assert_array_equal(q.numpy(), emb[idx.numpy()])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 32), st.integers(1, 8), st.integers(0, 2**31))
def test_quantize_idempotent(k, d, seed):
    rng = np.random.default_rng(seed)
    cb = make_codebook(rng.normal(size=(k, d)))
    idx, q = quantize(torch.from_numpy(rng.normal(size=(50, d))), cb)
    idx2, q2 = quantize(q, cb)
    # duplicate codewords would legitimately map back to the lowest copy
    np.testing.assert_array_equal(q2.numpy(), q.numpy())
    assert torch.equal(cb.embeddings[idx2], cb.embeddings[idx])


# --- EMA --------------------------------------------------------------------

def test_ema_hand_example():
    cb = make_codebook([[1.0, 0.0]], decay=0.9)
    v = torch.tensor([[1.0, 1.0], [3.0, 3.0]], dtype=torch.float64)
    ema_update(cb, v, torch.tensor([0, 0]))
    assert cb.ema_cluster_size.item() == pytest.approx(1.1, abs=1e-12)
    np.testing.assert_allclose(cb.ema_embed_sum.numpy(), [[1.3, 0.4]], atol=1e-12)
    # K=1: smoothed count (n + eps) / (N + eps) * N equals n
    np.testing.assert_allclose(cb.embeddings.numpy(), [[1.3 / 1.1, 0.4 / 1.1]], rtol=1e-12)


def test_ema_decay_zero_gives_batch_means():
    cb = make_codebook([[0.0, 0.0], [5.0, 5.0]], decay=0.0, eps=1e-12)
    v = torch.tensor([[0.1, 0.3], [0.3, 0.1], [5.0, 6.0]], dtype=torch.float64)
    ema_update(cb, v, torch.tensor([0, 0, 1]))
    np.testing.assert_allclose(cb.embeddings.numpy(), [[0.2, 0.2], [5.0, 6.0]], rtol=1e-9)


def test_ema_decay_one_leaves_codebook():
    cb = make_codebook([[0.0, 1.0], [2.0, 3.0]], decay=1.0)
    before = cb.embeddings.clone()
    ema_update(cb, torch.ones(4, 2, dtype=torch.float64), torch.tensor([0, 1, 1, 0]))
    np.testing.assert_allclose(cb.embeddings.numpy(), before.numpy(), rtol=1e-12)


def test_ema_invariant_and_dead_codes_stay_finite():
    cb = make_codebook(np.random.default_rng(0).normal(size=(8, 3)), decay=0.99)
    rng = np.random.default_rng(1)
    for _ in range(2000):
        v = torch.from_numpy(rng.normal(size=(16, 3)))
        ema_update(cb, v, torch.zeros(16, dtype=torch.long))  # codes 1..7 never assigned
        n = cb.ema_cluster_size.numpy()
        assert (n >= 0).all()
        total = n.sum()
        smoothed = (n + cb.laplace_eps) / (total + 8 * cb.laplace_eps) * total
        np.testing.assert_allclose(cb.embeddings.numpy(),
                                   cb.ema_embed_sum.numpy() / smoothed[:, None], rtol=1e-12)
        assert (smoothed > 0).all()
    assert np.isfinite(cb.embeddings.numpy()).all()


def test_ema_index_out_of_range():
    cb = make_codebook([[0.0], [1.0]])
    with pytest.raises(ValidationError):
        ema_update(cb, torch.zeros(1, 1, dtype=torch.float64), torch.tensor([2]))


@pytest.mark.parametrize("impl", [kernels.assignment_stats_numba, kernels.assignment_stats_numpy])
def test_assignment_stats_paths(impl):
    rng = np.random.default_rng(0)
    v = rng.normal(size=(100, 4))
    idx = rng.integers(0, 7, 100)
    counts, sums = impl(v, idx, 9)
    assert counts.sum() == 100 and counts[7] == counts[8] == 0
    for j in range(9):
        np.testing.assert_allclose(sums[j], v[idx == j].sum(axis=0), atol=1e-12)


# --- commitment / straight-through -------------------------------------------

def test_commitment_loss_examples():
    v = torch.tensor([[1.0, 1.0]])
    assert commitment_loss(v, torch.zeros(1, 2)).item() == pytest.approx(1.0)
    assert commitment_loss(v, v.clone()).item() == 0.0
    q = torch.tensor([[0.3, -0.2]])
    base = commitment_loss(v, q).item()
    doubled = commitment_loss(q + 2 * (v - q), q).item()
    assert doubled == pytest.approx(4 * base, rel=1e-6)


def test_commitment_gradient_reaches_vectors_only():
    v = torch.tensor([[1.0, 2.0]], requires_grad=True)
    q = torch.tensor([[0.0, 0.0]], requires_grad=True)
    commitment_loss(v, q).backward()
    assert q.grad is None or torch.all(q.grad == 0)
    np.testing.assert_allclose(v.grad.numpy(), [[1.0, 2.0]])


def test_straight_through_contract():
    v = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    q = torch.randn(5, 3, dtype=torch.float64)
    out = straight_through(v, q)
    assert torch.equal(out, q)
    out.sum().backward()
    np.testing.assert_array_equal(v.grad.numpy(), np.ones((5, 3)))

    v.grad = None
    out = straight_through(v, q)
    (out ** 2).sum().backward()
    np.testing.assert_allclose(v.grad.numpy(), 2 * q.numpy())


def test_straight_through_shape_mismatch():
    with pytest.raises(DimensionError):
        straight_through(torch.zeros(2, 3), torch.zeros(3, 2))


def test_straight_through_finite_difference_identity():
    # with assignments held fixed, out(v) = v + (q - v)|_{v0}; its Jacobian is the identity
    rng = np.random.default_rng(0)
    v0 = torch.from_numpy(rng.normal(size=(4, 3)))
    q = torch.from_numpy(rng.normal(size=(4, 3)))
    offset = q - v0
    h = 1e-6
    jac = np.zeros((12, 12))
    for i in range(12):
        e = torch.zeros(12, dtype=torch.float64)
        e[i] = h
        plus = (v0.reshape(-1) + e) + offset.reshape(-1)
        minus = (v0.reshape(-1) - e) + offset.reshape(-1)
        jac[:, i] = ((plus - minus) / (2 * h)).numpy()
    np.testing.assert_allclose(jac, np.eye(12), atol=1e-9)

    vv = v0.clone().requires_grad_(True)
    g = torch.from_numpy(rng.normal(size=(4, 3)))
    (straight_through(vv, q) * g).sum().backward()
    np.testing.assert_allclose(vv.grad.numpy(), (g.reshape(-1) @ torch.from_numpy(jac)).reshape(4, 3).numpy(),
                               atol=1e-9)


# --- perplexity ---------------------------------------------------------------

def test_perplexity_examples():
    assert perplexity(np.zeros(10, dtype=int), 8) == pytest.approx(1.0)
    assert perplexity(np.arange(4), 4) == pytest.approx(4.0)
    h = -0.75 * math.log(0.75) - 0.25 * math.log(0.25)
    assert perplexity(np.array([0, 0, 0, 1]), 2) == pytest.approx(math.exp(h))
    assert perplexity(np.array([0, 0, 0, 1]), 2) == pytest.approx(1.7548, abs=1e-4)


def test_perplexity_empty_rejected():
    with pytest.raises(ValidationError):
        perplexity(np.array([], dtype=int), 4)
