import math

import numpy as np
import pytest
import torch

from functok.errors import ChecksumError, ConfigError, DomainError, NonFiniteLossError
from functok.lm import (PRESETS, FfnParams, GroupStats, TrainConfig, TokenStream, TransformerConfig,
                        TransitionGroup, classify_transition, ffn_apply, init_model, load_checkpoint, lr_at,
                        save_checkpoint, train, train_step)
from functok.lm.activations import ActivationShard, extract_activations
from functok.lm.generate import greedy_generate, prediction_table
from functok.lm.train import LossGroupTrace, make_optimizer, token_losses, transition_groups

from .helpers import fd_relative_errors

TINY = PRESETS["tiny"]


def small_cfg(**kw):
    base = dict(n_layers=2, d_model=16, d_ffn=32, n_heads=2, vocab_size=16, max_seq_len=16)
    base.update(kw)
    return TransformerConfig(**base)


# --- FFN -------------------------------------------------------------------

def test_ffn_matrix_equals_slot_loop():
    g = torch.Generator().manual_seed(0)
    p = FfnParams(torch.randn(8, 4, generator=g, dtype=torch.float64), torch.randn(8, 4, generator=g, dtype=torch.float64))
    x = torch.randn(5, 4, generator=g, dtype=torch.float64)
    # independent oracle: explicit python loop over slots and coordinates
    expected = np.zeros((5, 4))
    Wk, Wv, xn = p.W_k.numpy(), p.W_v.numpy(), x.numpy()
    for r in range(5):
        for i in range(8):
            z = max(0.0, float(sum(xn[r, j] * Wk[i, j] for j in range(4))))
            expected[r] += z * Wv[i]
    assert np.allclose(ffn_apply(p, x, "matrix").numpy(), expected, atol=1e-12, rtol=0)
    assert torch.allclose(ffn_apply(p, x, "matrix"), ffn_apply(p, x, "kv"), atol=1e-12, rtol=0)


def test_ffn_relu_kills_everything():
    keys = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    p = FfnParams(keys, torch.ones(3, 2))
    assert torch.equal(ffn_apply(p, torch.tensor([-1.0, -2.0])), torch.zeros(2))


def test_ffn_single_slot():
    u = torch.tensor([0.5, -1.0, 3.0])
    p = FfnParams(torch.tensor([[2.0, 0.0, 0.0]]), u.unsqueeze(0))
    assert torch.equal(ffn_apply(p, torch.tensor([1.0, 7.0, -4.0])), 2 * u)


def test_ffn_shape_mismatch():
    with pytest.raises(ValueError):
        ffn_apply(FfnParams(torch.zeros(3, 2), torch.zeros(3, 2)), torch.zeros(4))


# --- init / forward --------------------------------------------------------

def test_init_deterministic():
    a, b = init_model(TINY, 7), init_model(TINY, 7)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = init_model(TINY, 8)
    assert not torch.equal(a.embed.weight, c.embed.weight)


def test_init_truncation_and_zero_unembedding():
    m = init_model(PRESETS["desk"], 0)
    assert m.embed.weight.abs().max() <= 0.04
    assert torch.count_nonzero(m.unembed) == 0
    logits = m(torch.arange(10))
    assert torch.count_nonzero(logits) == 0


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        TransformerConfig(d_model=8, n_heads=3, d_ffn=16).validate()
    with pytest.raises(ConfigError):
        init_model(TransformerConfig(d_model=8, n_heads=3, d_ffn=16), 0)


def test_forward_shape_and_taps():
    cfg = small_cfg(max_seq_len=4)
    m = init_model(cfg, 0)
    logits, taps = m(torch.tensor([1, 2, 3, 4]), return_taps=True)
    assert logits.shape == (4, 16)
    assert taps.shape == (2, 4, 16)
    assert taps.shape[0] * taps.shape[1] == cfg.n_layers * 4


def test_forward_rejects_overlong():
    m = init_model(small_cfg(max_seq_len=4), 0)
    with pytest.raises(DomainError):
        m(torch.arange(5))


def test_causality():
    m = init_model(small_cfg(), 3)
    torch.nn.init.normal_(m.unembed, std=0.5)
    a = torch.tensor([1, 5, 2, 7, 3, 9])
    b = a.clone()
    b[3] = 11
    la, lb = m(a), m(b)
    assert torch.equal(la[:3], lb[:3])
    assert not torch.equal(la[3:], lb[3:])


def test_tap_is_post_ffn_residual():
    m = init_model(small_cfg(), 1)
    toks = torch.tensor([[3, 1, 4, 1, 5]])
    _, taps = m(toks, return_taps=True)
    x = m.embed(toks)
    for l, blk in enumerate(m.blocks):
        x = x + blk.attn(blk.ln1(x))
        x = x + blk.ffn(blk.ln2(x))
        assert torch.allclose(taps[l], x, atol=1e-6)


# --- transitions ------------------------------------------------------------

def test_classify_transition():
    assert classify_transition(True, False) is TransitionGroup.FC
    assert classify_transition(False, False) is TransitionGroup.CC
    assert classify_transition(True, True) is TransitionGroup.FF
    assert classify_transition(False, True) is TransitionGroup.CF
    mask = np.zeros(4, dtype=bool)
    mask[[0, 3]] = True  # the=0, cat=1, sat=2, on=3
    assert transition_groups([0, 1, 2, 3], mask) == [TransitionGroup.FC, TransitionGroup.CC, TransitionGroup.CF]


# --- training ---------------------------------------------------------------

def _fmask(V, fn=(0, 1, 2, 3)):
    m = torch.zeros(V, dtype=torch.bool)
    m[list(fn)] = True
    return m


def test_cold_start_every_group_is_ln_v():
    m = init_model(small_cfg(), 0)
    batch = torch.randint(0, 16, (4, 12), generator=torch.Generator().manual_seed(0))
    res = train_step(m, make_optimizer(m, TrainConfig()), batch, _fmask(16), 1e-3, 0)
    means = res.stats.means()
    assert (res.stats.count > 0).all()
    assert np.allclose(means, math.log(16), rtol=0, atol=1e-6)
    assert res.loss == pytest.approx(math.log(16), abs=1e-6)


def test_group_recombination():
    m = init_model(small_cfg(), 0)
    torch.nn.init.normal_(m.unembed, std=0.3)
    batch = torch.randint(0, 16, (4, 12), generator=torch.Generator().manual_seed(1))
    res = train_step(m, make_optimizer(m, TrainConfig()), batch, _fmask(16), 1e-3, 0)
    st = res.stats
    weighted = float((st.means() * st.count).sum() / st.count.sum())
    assert weighted == pytest.approx(res.loss, abs=1e-6)
    assert st.overall() == pytest.approx(res.loss, abs=1e-6)


def test_eot_predictions_excluded():
    m = init_model(small_cfg(), 0)
    batch = torch.tensor([[1, 2, 15, 3, 4]])
    _, valid, _ = token_losses(m, batch, _fmask(16), eot_id=15)
    assert valid.tolist() == [True, False, False, True]


def test_overfit_single_batch():
    torch.manual_seed(0)
    m = init_model(small_cfg(), 0)
    batch = torch.randint(0, 16, (2, 16), generator=torch.Generator().manual_seed(2))
    cfg = TrainConfig(peak_lr=1e-2, warmup=20, steps=500, floor_lr=1e-3, weight_decay=0.0)
    opt = make_optimizer(m, cfg)
    for s in range(500):
        res = train_step(m, opt, batch, _fmask(16), lr_at(s + 1, cfg), s)
    assert res.loss < 0.05


def test_non_finite_loss_aborts():
    m = init_model(small_cfg(), 0)
    with torch.no_grad():
        m.unembed.fill_(float("nan"))
    batch = torch.randint(0, 16, (2, 8))
    with pytest.raises(NonFiniteLossError, match="step 17.*lr=.*grad_norm"):
        train_step(m, make_optimizer(m, TrainConfig()), batch, _fmask(16), 1e-3, 17)


def test_lr_schedule():
    cfg = TrainConfig(warmup=100, steps=1000, peak_lr=1e-3, floor_lr=1e-5)
    assert lr_at(100, cfg) == 1e-3
    assert lr_at(0, cfg) == 0.0
    assert lr_at(50, cfg) == pytest.approx(5e-4)
    assert lr_at(1000, cfg) == pytest.approx(1e-5)
    mid = 100 + 450
    assert lr_at(mid, cfg) == pytest.approx(1e-5 + 0.5 * (1e-3 - 1e-5))
    vals = [lr_at(s, cfg) for s in range(100, 1001)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_gradients_match_central_differences():
    torch.manual_seed(0)
    m = init_model(TINY, 0, dtype=torch.float64)
    with torch.no_grad():
        torch.nn.init.normal_(m.unembed, std=0.5)
        for blk in m.blocks:
            torch.nn.init.normal_(blk.ffn.W_k, std=0.5)
            torch.nn.init.normal_(blk.ffn.W_v, std=0.5)
            torch.nn.init.normal_(blk.attn.qkv.weight, std=0.5)
            blk.ln1.weight.add_(0.1 * torch.randn(8, dtype=torch.float64))
            blk.ln2.bias.add_(0.1 * torch.randn(8, dtype=torch.float64))
    batch = torch.randint(0, 16, (2, 8), generator=torch.Generator().manual_seed(3))
    fmask = _fmask(16)

    def loss_fn():
        losses, valid, _ = token_losses(m, batch, fmask)
        return losses[valid].mean()

    errs = fd_relative_errors(m.named_parameters(), loss_fn)
    assert max(errs.values()) < 1e-4, errs


def _stream():
    rng = np.random.default_rng(0)
    docs = [rng.integers(0, 15, size=rng.integers(5, 40)) for _ in range(30)]
    return TokenStream(docs, eot_id=15)


def test_batches_depend_only_on_seed_and_step():
    s = _stream()
    assert torch.equal(s.batch(5, 3, 8, 1), s.batch(5, 3, 8, 1))
    assert not torch.equal(s.batch(5, 3, 8, 1), s.batch(6, 3, 8, 1))
    assert s.batch(0, 3, 8, 1).shape == (3, 9)


def test_deterministic_trajectory(tmp_path):
    cfg = TrainConfig(batch_size=2, seq_len=8, steps=12, warmup=3, log_every=1, peak_lr=3e-3)
    runs = []
    for i in range(2):
        m = init_model(small_cfg(), 0)
        tr = LossGroupTrace(tmp_path / f"t{i}.csv")
        train(m, _stream(), _fmask(16).numpy(), cfg, trace=tr)
        runs.append((tmp_path / f"t{i}.csv").read_bytes())
    assert runs[0] == runs[1]
    rows = LossGroupTrace.read(tmp_path / "t0.csv")
    assert len(rows) == 12
    r = rows[-1]
    counts = [r[f"count_{g}"] for g in ("FF", "FC", "CF", "CC")]
    losses = [r[f"loss_{g}"] for g in ("FF", "FC", "CF", "CC")]
    weighted = sum(c * l for c, l in zip(counts, losses) if c) / sum(counts)
    assert weighted == pytest.approx(r["loss_all"], abs=1e-6)


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_roundtrip_idempotent(tmp_path):
    cfg = TrainConfig(batch_size=2, seq_len=8, steps=6, warmup=2, log_every=4)
    m = init_model(small_cfg(), 0)
    res = train(m, _stream(), _fmask(16).numpy(), cfg, checkpoint_steps=[5], checkpoint_dir=tmp_path)
    p1 = res.checkpoints[5]
    ck = load_checkpoint(p1)
    assert ck.step == 5 and ck.data_cursor == 5
    p2 = save_checkpoint(tmp_path / "again.ftck", ck.model, ck.optimizer, ck.step, ck.train_config,
                         pending=ck.pending, meta=ck.meta)
    ck2 = load_checkpoint(p2)
    p3 = save_checkpoint(tmp_path / "third.ftck", ck2.model, ck2.optimizer, ck2.step, ck2.train_config,
                         pending=ck2.pending, meta=ck2.meta)
    assert p2.read_bytes() == p3.read_bytes()
    assert p1.read_bytes() == p2.read_bytes()


def test_resume_matches_straight_run(tmp_path):
    cfg = TrainConfig(batch_size=2, seq_len=8, steps=10, warmup=3, log_every=1)
    fm = _fmask(16).numpy()
    straight = LossGroupTrace()
    m = init_model(small_cfg(), 0)
    res = train(m, _stream(), fm, cfg, trace=straight, checkpoint_steps=[6], checkpoint_dir=tmp_path)
    ck = load_checkpoint(res.checkpoints[6])
    resumed = LossGroupTrace()
    train(ck.model, _stream(), fm, ck.train_config, optimizer=ck.optimizer, start_step=ck.step,
          trace=resumed, pending=ck.pending)
    a = [e.row() for e in straight.entries[6:]]
    b = [e.row() for e in resumed.entries]
    assert a == b


def test_truncated_checkpoint_fails(tmp_path):
    m = init_model(small_cfg(), 0)
    p = save_checkpoint(tmp_path / "c.ftck", m, make_optimizer(m, TrainConfig()), 0, TrainConfig())
    blob = p.read_bytes()
    (tmp_path / "cut.ftck").write_bytes(blob[:-10])
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "cut.ftck")
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    (tmp_path / "flip.ftck").write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "flip.ftck")
    with pytest.raises(DomainError):
        load_checkpoint(tmp_path / "missing.ftck")


# --- activations -------------------------------------------------------------

def _docs():
    rng = np.random.default_rng(1)
    return [(i, rng.integers(0, 16, size=rng.integers(3, 300))) for i in range(25)]


def test_extract_bound_and_recompute(tmp_path):
    m = init_model(small_cfg(max_seq_len=128), 0)
    shard = extract_activations(m, _docs(), layers=[1], n_docs=10, max_tokens=128, seed=4)
    assert 0 < len(shard) <= 1280
    assert set(shard.records["layer"]) == {1}
    docs = dict(_docs())
    for doc_id in set(shard.records["doc_id"].tolist()):
        rec = shard.records[shard.records["doc_id"] == doc_id]
        ids = torch.from_numpy(np.asarray(docs[doc_id][: len(rec)], dtype=np.int64))
        assert np.array_equal(rec["token_id"], ids.numpy())
        _, taps = m(ids, return_taps=True)
        assert np.allclose(rec["vector"], taps[1].detach().numpy(), atol=1e-6)


def test_extract_byte_identical(tmp_path):
    m = init_model(small_cfg(max_seq_len=128), 0)
    paths = []
    for i in range(2):
        sh = extract_activations(m, _docs(), layers=[0, 1], n_docs=5, max_tokens=64, seed=9, meta={"step": 0})
        paths.append(sh.write(tmp_path / f"s{i}.acts"))
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert (tmp_path / "s0.acts.json").read_bytes() == (tmp_path / "s1.acts.json").read_bytes()
    back = ActivationShard.read(paths[0])
    assert back.meta["step"] == 0 and back.meta["sample_seed"] == 9
    assert back.records.tobytes() == sh.records.tobytes()


def test_extract_rejects_bad_layer():
    with pytest.raises(DomainError):
        extract_activations(init_model(small_cfg(), 0), _docs(), layers=[2], n_docs=1, max_tokens=4, seed=0)


# --- prediction table ----------------------------------------------------------

def test_prediction_table_untrained_is_zero():
    m = init_model(small_cfg(), 0)
    steps, table = prediction_table([(0, m), (10, m)], [5, 3, 9, 1])
    assert steps == [0, 10]
    assert table.shape == (2, 4)
    assert (table == 0).all()


def test_prediction_table_memorized_sequence():
    torch.manual_seed(0)
    m = init_model(small_cfg(), 0)
    seq = torch.tensor([[3, 7, 1, 12, 5, 9, 2, 14, 6]])
    cfg = TrainConfig(peak_lr=1e-2, warmup=10, steps=300, weight_decay=0.0)
    opt = make_optimizer(m, cfg)
    for s in range(300):
        train_step(m, opt, seq, _fmask(16), lr_at(s + 1, cfg), s)
    _, table = prediction_table([(300, m)], seq[0, :-1].tolist())
    assert table[0].tolist() == seq[0, 1:].tolist()
    assert greedy_generate(m, [3], 8) == seq[0, 1:].tolist()
