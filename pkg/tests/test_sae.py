import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from functok.errors import ChecksumError, DomainError
from functok.lm import TransformerConfig, init_model
from functok.sae import (FiringTracker, SAEConfig, SAEModel, SAETrainConfig, SparseCode, count_unique_features,
                         detect_dead_features, identity_sae, init_sae, jumprelu, load_sae, reconstruction_score,
                         sae_decode, sae_encode, sae_loss, save_sae, score_from_losses, step, train_sae, tune_lambda)

from .helpers import fd_relative_errors


def random_sae(d=8, mult=4, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    m = SAEModel(SAEConfig(d, mult)).to(dtype)
    with torch.no_grad():
        m.W_enc.copy_(torch.randn(m.n, d, generator=g, dtype=dtype))
        m.b_enc.copy_(0.1 * torch.randn(m.n, generator=g, dtype=dtype))
        m.W_dec.copy_(torch.randn(d, m.n, generator=g, dtype=dtype))
        m.normalize_decoder()
        m.b_dec.copy_(0.1 * torch.randn(d, generator=g, dtype=dtype))
        m.log_threshold.fill_(math.log(0.3))
    return m


# --- jumprelu ------------------------------------------------------------------

def test_jumprelu_examples():
    th = torch.tensor([0.3])
    assert jumprelu(torch.tensor([0.5]), th).item() == 0.5
    assert jumprelu(torch.tensor([0.2]), th).item() == 0.0
    assert jumprelu(torch.tensor([0.3]), th).item() == 0.0


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=20))
def test_jumprelu_zero_threshold_is_relu(xs):
    x = torch.tensor(xs, dtype=torch.float64)
    assert torch.equal(jumprelu(x, torch.zeros(len(xs), dtype=torch.float64)), torch.relu(x))


def test_threshold_pseudo_gradients():
    bw = 0.02
    pre = torch.tensor([[0.305, 0.35, 0.295, 0.1]], dtype=torch.float64)
    theta = torch.full((4,), 0.3, dtype=torch.float64, requires_grad=True)
    jumprelu(pre, theta, bw).sum().backward()
    # rectangle kernel is 1 only within half a bandwidth of the threshold
    assert torch.allclose(theta.grad, torch.tensor([-0.3 / bw, 0.0, -0.3 / bw, 0.0], dtype=torch.float64))
    theta.grad = None
    step(pre, theta, bw).sum().backward()
    assert torch.allclose(theta.grad, torch.tensor([-1 / bw, 0.0, -1 / bw, 0.0], dtype=torch.float64))
    p = pre.clone().requires_grad_(True)
    step(p, theta, bw).sum().backward()
    assert torch.count_nonzero(p.grad) == 0


# --- encode / decode -------------------------------------------------------------

def test_decode_single_pair_and_empty():
    m = random_sae()
    col = m.W_dec[:, 5].detach()
    assert torch.allclose(sae_decode(m, SparseCode([5], [1.7])), m.b_dec.detach() + 1.7 * col, atol=0)
    assert torch.equal(sae_decode(m, SparseCode([], [])), m.b_dec.detach())


def test_sparse_and_dense_paths_agree():
    m = random_sae(d=8, mult=4, seed=3)
    g = torch.Generator().manual_seed(1)
    for _ in range(10):
        x = torch.randn(8, generator=g, dtype=torch.float64)
        code = sae_encode(m, x)
        z = m.encode_dense(x)
        assert len(code) == int(torch.count_nonzero(z))
        dense = m.decode_dense(z)
        # oracle: recompute the dense product from scratch
        zz = torch.relu(x @ m.W_enc.T + m.b_enc)
        zz = torch.where(x @ m.W_enc.T + m.b_enc > m.theta, zz, torch.zeros_like(zz))
        oracle = m.W_dec @ zz + m.b_dec
        assert torch.allclose(sae_decode(m, code), dense, atol=1e-12, rtol=0)
        assert torch.allclose(dense, oracle, atol=1e-12, rtol=0)


def test_decode_rejects_bad_feature_id():
    m = random_sae()
    with pytest.raises(DomainError):
        sae_decode(m, SparseCode([m.n], [1.0]))
    with pytest.raises(DomainError):
        SparseCode([1, 1], [1.0, 2.0])
    with pytest.raises(DomainError):
        SparseCode([1], [0.0])


# --- loss ----------------------------------------------------------------------

def test_loss_perfect_sparse_reconstruction_is_zero():
    m = SAEModel(SAEConfig(3, 2)).double()
    x = torch.tensor([0.4, -1.0, 2.0], dtype=torch.float64)
    with torch.no_grad():
        m.b_dec.copy_(x)
        m.log_threshold.fill_(math.log(0.01))
    total, recon, sparsity = sae_loss(m, x, SAETrainConfig(lam=5.0))
    assert total.item() == 0.0 and sparsity.item() == 0.0


def test_loss_arithmetic():
    m = SAEModel(SAEConfig(2, 2)).double()
    with torch.no_grad():
        m.b_enc.copy_(torch.tensor([1.0, 1.0, 1.0, 0.0]))
        m.W_dec.copy_(torch.tensor([[1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]]))
        m.b_dec.copy_(torch.tensor([0.0, math.sqrt(0.5) - 1.0], dtype=torch.float64))
        m.log_threshold.fill_(math.log(0.01))
    x = torch.zeros(2, dtype=torch.float64)
    total, recon, sparsity = sae_loss(m, x, SAETrainConfig(lam=2.0))
    assert recon.item() == pytest.approx(0.5, abs=1e-12)
    assert sparsity.item() == 6.0
    assert total.item() == pytest.approx(6.5, abs=1e-12)
    total0, recon0, _ = sae_loss(m, x, SAETrainConfig(lam=0.0))
    assert total0.item() == recon0.item()


def test_recon_gradients_match_central_differences():
    m = random_sae(d=6, mult=3, seed=5)
    x = torch.randn(16, 6, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    cfg = SAETrainConfig(lam=0.0)
    # keep every pre-activation well away from the frozen threshold
    pre = m.pre_activations(x).detach()
    assert ((pre - m.theta.detach()).abs() > 1e-4).all()

    def recon():
        return sae_loss(m, x, cfg)[1]

    errs = fd_relative_errors([(n, getattr(m, n)) for n in ("W_enc", "b_enc", "W_dec", "b_dec")], recon)
    assert max(errs.values()) < 1e-4, errs


# --- training ---------------------------------------------------------------------

def _low_rank(n=1000, d=16, rank=4, seed=0):
    rng = np.random.default_rng(seed)
    basis = rng.standard_normal((rank, d))
    coef = rng.standard_normal((n, rank))
    return (coef @ basis).astype(np.float32)


def test_lambda_zero_learns_low_rank_signal():
    acts = _low_rank()
    cfg = SAEConfig(16, 4)
    tcfg = SAETrainConfig(lam=0.0, steps=600, batch_size=256, lr=3e-3, lambda_warmup=0)
    res = train_sae(acts, cfg, tcfg)
    first, last = res.history[0].recon, np.mean([m.recon for m in res.history[-20:]])
    assert last < 0.01 * first


def test_training_is_deterministic():
    acts = _low_rank(n=300)
    tcfg = SAETrainConfig(lam=1.0, steps=20, batch_size=64)
    a = train_sae(acts, SAEConfig(16, 2), tcfg).model
    b = train_sae(acts, SAEConfig(16, 2), tcfg).model
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n


def test_decoder_columns_unit_after_step():
    acts = _low_rank(n=200)
    res = train_sae(acts, SAEConfig(16, 2), SAETrainConfig(lam=1.0, steps=3, batch_size=32))
    norms = res.model.W_dec.norm(dim=0)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)


def test_input_scale_normalises_mean_square_norm():
    acts = _low_rank(n=500) * 7.0
    m = init_sae(SAEConfig(16, 2), SAETrainConfig(), torch.from_numpy(acts))
    sq = float(((torch.from_numpy(acts).double() * m.input_scale) ** 2).sum(-1).mean())
    assert sq == pytest.approx(16.0, rel=1e-6)


# --- dead features ------------------------------------------------------------------

def test_dead_feature_window_boundary():
    log = np.zeros((10, 3), dtype=np.int64)
    log[10 - 4, 0] = 1  # fired at t - window + 1 with window 4
    log[10 - 5, 1] = 1  # just outside the window
    assert detect_dead_features(log, 4) == {1, 2}
    with pytest.raises(DomainError):
        detect_dead_features(log, 11)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.integers(1, 30))
def test_dead_features_match_scan_and_tracker(seed, window):
    rng = np.random.default_rng(seed)
    steps, n = 40, 12
    log = (rng.random((steps, n)) < rng.random(n) * 0.1).astype(np.int64)
    expected = {j for j in range(n) if all(log[t, j] == 0 for t in range(steps - window, steps))}
    assert detect_dead_features(log, window) == expected
    tr = FiringTracker(n, window)
    for t in range(steps):
        tr.update(t, np.nonzero(log[t])[0])
    assert tr.dead() == expected


# --- reconstruction score ------------------------------------------------------------

def _lm():
    cfg = TransformerConfig(n_layers=2, d_model=8, d_ffn=16, n_heads=2, vocab_size=16, max_seq_len=16)
    m = init_model(cfg, 0)
    with torch.no_grad():
        torch.nn.init.normal_(m.unembed, std=1.0)
        for p in m.parameters():
            if p.dim() == 2:
                p.mul_(20)
    return m


def _tokens():
    return torch.randint(0, 16, (6, 12), generator=torch.Generator().manual_seed(0))


def test_identity_and_zero_sae_scores_exact():
    lm = _lm()
    ident = identity_sae(8)
    ident.config = SAEConfig(8, 2, host_layer=1)
    assert reconstruction_score(lm, ident, _tokens()).score == 1.0
    zero = SAEModel(SAEConfig(8, 2, host_layer=1))
    r = reconstruction_score(lm, zero, _tokens())
    assert r.score == 0.0 and r.h_star == r.h_zero


def test_score_undefined_when_ablation_is_neutral():
    lm = init_model(TransformerConfig(n_layers=1, d_model=8, d_ffn=16, n_heads=2, vocab_size=16, max_seq_len=16), 0)
    with pytest.raises(DomainError):
        reconstruction_score(lm, identity_sae(8), _tokens())


@given(st.floats(0, 5), st.floats(0.01, 5), st.floats(0, 5), st.floats(0, 5))
def test_score_monotone_in_h_star(h_orig, gap, a, b):
    h_zero = h_orig + gap
    lo, hi = sorted((h_orig + a, h_orig + b))
    assert score_from_losses(h_orig, hi, h_zero).score <= score_from_losses(h_orig, lo, h_zero).score


def test_out_of_range_flagged_not_clamped():
    r = score_from_losses(1.0, 3.5, 3.0)
    assert not r.in_range and r.score < 0


# --- counting ------------------------------------------------------------------------

def test_huge_threshold_counts_nothing():
    m = random_sae(seed=1)
    with torch.no_grad():
        m.log_threshold.fill_(100.0)
    assert count_unique_features(m, torch.randn(50, 8, dtype=torch.float64)) == 0


def test_identity_counts_distinct_basis_vectors():
    d = 6
    m = SAEModel(SAEConfig(d, 1))
    with torch.no_grad():
        m.W_enc.copy_(torch.eye(d))
        m.W_dec.copy_(torch.eye(d))
        m.log_threshold.fill_(math.log(0.5))
    acts = torch.eye(d)[[0, 3, 3, 5, 0]]
    assert count_unique_features(m, acts) == 3


@settings(max_examples=30)
@given(st.integers(0, 1000), st.integers(1, 40), st.integers(0, 40))
def test_count_monotone_in_sample(seed, n1, n2):
    m = random_sae(seed=2, dtype=torch.float32)
    acts = torch.randn(n1 + n2, 8, generator=torch.Generator().manual_seed(seed))
    assert count_unique_features(m, acts[:n1]) <= count_unique_features(m, acts)


def test_tune_lambda_converges_on_monotone_score():
    def score_of(lam):
        return 1.0 / (1.0 + 0.1 * lam)

    lam, s = tune_lambda(score_of, 1.0, target=0.5, tol=0.01, max_iter=20)
    assert abs(s - 0.5) <= 0.01


# --- persistence ---------------------------------------------------------------------

def test_sae_save_load_roundtrip(tmp_path):
    acts = _low_rank(n=100)
    tcfg = SAETrainConfig(lam=1.0, steps=2, batch_size=16)
    m = train_sae(acts, SAEConfig(16, 2, host_layer=1, host_step=500), tcfg).model
    p = save_sae(tmp_path / "a.ftsae", m, tcfg, meta={"note": 1})
    back, header = load_sae(p)
    assert header["host_step"] == 500 and header["lambda"] == 1.0
    assert back.input_scale == m.input_scale
    q = save_sae(tmp_path / "b.ftsae", back, tcfg, meta={"note": 1})
    assert p.read_bytes() == q.read_bytes()
    (tmp_path / "c.ftsae").write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ChecksumError):
        load_sae(tmp_path / "c.ftsae")
