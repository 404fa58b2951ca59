import logging
import math

import numpy as np
import pytest
import torch

from functok.errors import ConfigError, DomainError
from functok.lm import TransformerConfig, init_model
from functok.sae import SAEConfig, SAEModel
from functok.steer import (Evaluator, Judge, SteerVector, TraitSpec, apply_steering, decompose_steer_vector,
                           extract_steer_vector, find_informative_layer, find_minimal_feature_set, injection_site,
                           make_feature_steering_vector, steering_hooks)

V = 16
FMASK = np.zeros(V, dtype=bool)
FMASK[[0, 1, 2]] = True  # 2 plays the newline


def lm(seed=0):
    m = init_model(TransformerConfig(n_layers=2, d_model=16, d_ffn=32, n_heads=2, vocab_size=V, max_seq_len=24), seed)
    with torch.no_grad():
        torch.nn.init.normal_(m.unembed, std=1.0)
    return m


def random_sae(d=16, mult=4, layer=0, seed=0):
    g = torch.Generator().manual_seed(seed)
    m = SAEModel(SAEConfig(d, mult, host_layer=layer))
    with torch.no_grad():
        m.W_dec.copy_(torch.randn(d, m.n, generator=g))
        m.normalize_decoder()
        m.W_enc.copy_(m.W_dec.T)
        m.log_threshold.fill_(math.log(0.05))
    return m


# --- specs ----------------------------------------------------------------------

def test_trait_spec_json_roundtrip(tmp_path):
    spec = TraitSpec("q", "a b ?\n", ("x ?\n", "y ?\n"), Judge("starts_with", {"prefix": "q"}), ("z ?\n",))
    p = tmp_path / "t.json"
    p.write_text(__import__("json").dumps(spec.to_json()))
    assert TraitSpec.load(p) == spec
    with pytest.raises(ConfigError):
        TraitSpec.from_json({"name": "x"})
    with pytest.raises(ConfigError):
        TraitSpec("x", "p", (), Judge("constant", {"value": True}))


def test_judges_are_pure():
    j = Judge("starts_with", {"prefix": "q"})
    assert j([1], " qa") and j([1], " qa") and not j([1], "aq")
    assert Judge("first_token_in", {"token_ids": [3, 4]})([4, 1], "")
    assert Judge("contains", {"substring": "zz"})([], "a zz b")
    with pytest.raises(ConfigError):
        Judge("oracle")([], "")


# --- extraction and injection ------------------------------------------------------

def test_site_is_last_function_token():
    assert injection_site([5, 0, 7, 9, 2], FMASK) == 4
    assert injection_site([5, 1, 7, 9], FMASK) == 1
    with pytest.raises(DomainError, match="no injection site"):
        injection_site([5, 7, 9], FMASK)


def test_extract_matches_forward_tap():
    m = lm()
    prompt = [5, 0, 7, 9, 2]
    v1 = extract_steer_vector(m, prompt, 1, FMASK)
    v2 = extract_steer_vector(m, prompt, 1, FMASK)
    assert torch.equal(v1.vector, v2.vector)
    _, taps = m(torch.tensor(prompt), return_taps=True)
    assert torch.equal(v1.vector, taps[1, 4])
    with pytest.raises(DomainError):
        extract_steer_vector(m, [5, 7], 0, FMASK)


def test_zero_steering_is_identity():
    m = lm()
    prompt = [5, 0, 7, 9, 2]
    base = apply_steering(m, prompt, None, FMASK, 8)
    zero = SteerVector(0, torch.zeros(16), "raw_activation")
    assert apply_steering(m, prompt, zero, FMASK, 8) == base
    sv = SteerVector(1, torch.randn(16, generator=torch.Generator().manual_seed(0)) * 5, "raw_activation")
    assert apply_steering(m, prompt, sv, FMASK, 8) == apply_steering(m, prompt, sv, FMASK, 8)


def test_injection_locality():
    m = lm()
    prompt = torch.tensor([5, 0, 7, 1, 9, 4])
    site = injection_site(prompt.tolist(), FMASK)
    sv = SteerVector(0, torch.ones(16) * 3, "raw_activation")
    plain = m(prompt)
    steered = m(prompt, hooks=steering_hooks(sv, site))
    assert torch.equal(plain[:site], steered[:site])
    assert not torch.equal(plain[site:], steered[site:])


def test_overlong_generation_rejected():
    with pytest.raises(DomainError):
        apply_steering(lm(), [0] * 20, None, FMASK, 8)


# --- layer search --------------------------------------------------------------------

def _evaluator(judge):
    return Evaluator(lm(), encode=lambda s: [int(t) for t in s.split()], decode=lambda ids: " ".join(map(str, ids)),
                     function_mask=FMASK, judge=judge, max_new_tokens=3)


def _trait(judge):
    return TraitSpec("t", "5 0 7 2", ("6 0 8 2", "9 1 4 2"), judge)


def test_layer_search_constant_judges(caplog):
    yes = Judge("constant", {"value": True})
    r = find_informative_layer(_evaluator(yes), _trait(yes))
    assert r.rates == [1.0, 1.0] and r.chosen_layer == 0
    no = Judge("constant", {"value": False})
    with caplog.at_level(logging.WARNING):
        r = find_informative_layer(_evaluator(no), _trait(no))
    assert r.rates == [0.0, 0.0] and "no layer" in caplog.text


# --- decomposition --------------------------------------------------------------------

def test_scaled_column_ranks_first():
    sae = random_sae()
    for i in (0, 17, 63):
        v = SteerVector(0, 3.0 * sae.W_dec[:, i].detach(), "raw_activation")
        ranked = decompose_steer_vector(sae, v)
        assert ranked[0][0] == i
        strengths = [s for _, s in ranked]
        assert all(s > 0 for s in strengths)
        assert all(a >= b for a, b in zip(strengths, strengths[1:]))


def test_decomposition_tie_break_and_errors():
    sae = SAEModel(SAEConfig(4, 1))
    with torch.no_grad():
        sae.W_enc.copy_(torch.eye(4))
        sae.W_dec.copy_(torch.eye(4))
        sae.log_threshold.fill_(math.log(0.1))
    ranked = decompose_steer_vector(sae, SteerVector(0, torch.tensor([0.0, 1.0, 0.0, 1.0]), "raw_activation"))
    assert [i for i, _ in ranked] == [1, 3]
    with pytest.raises(DomainError, match="outside dictionary support"):
        decompose_steer_vector(sae, SteerVector(0, torch.zeros(4), "raw_activation"))
    with pytest.raises(DomainError):
        decompose_steer_vector(sae, SteerVector(1, torch.ones(4), "raw_activation"))


# --- minimal set ------------------------------------------------------------------------

def test_minimal_set_matches_exhaustive_scan():
    ranked = [4, 11, 7, 2, 9, 30]
    calls = []

    def success(feats):
        calls.append(len(feats))
        return 7 in feats

    res = find_minimal_feature_set(ranked, success)
    oracle = next(k for k in range(1, len(ranked) + 1) if success(ranked[:k]))
    assert res.k == oracle == 3 and res.features == [4, 11, 7]
    assert not res.linear_fallback


@pytest.mark.parametrize("n", range(1, 9))
def test_minimal_set_all_boundaries(n):
    for target in range(1, n + 1):
        res = find_minimal_feature_set(list(range(n)), lambda f: len(f) >= target)
        assert res.k == target


def test_minimal_set_boundaries_and_errors():
    assert find_minimal_feature_set([3, 1], lambda f: True).k == 1
    with pytest.raises(DomainError, match="unreachable"):
        find_minimal_feature_set([3, 1], lambda f: False)


def test_minimal_set_falls_back_when_verification_disagrees():
    # the judge changes its mind after the four calls the search makes
    calls = []

    def flaky(feats):
        calls.append(len(feats))
        return len(feats) >= (4 if len(calls) <= 4 else 2)

    res = find_minimal_feature_set(list(range(6)), flaky)
    assert res.linear_fallback and res.k == 2


# --- feature vectors ---------------------------------------------------------------------

def test_feature_steering_vectors():
    sae = random_sae()
    assert torch.count_nonzero(make_feature_steering_vector(sae, [3], 0.0).vector) == 0
    assert torch.equal(make_feature_steering_vector(sae, [5], 2.5).vector, 2.5 * sae.W_dec[:, 5].detach())
    pair = make_feature_steering_vector(sae, [5, 9], 1.5).vector
    loop = torch.zeros(16)
    for i in (5, 9):
        loop += sae.W_dec[:, i].detach()
    assert torch.allclose(pair, 1.5 * loop, atol=1e-6)
    for feats in ([1], [2, 40], list(range(10))):
        a = make_feature_steering_vector(sae, feats, 1.3).vector.double()
        b = make_feature_steering_vector(sae, feats, 2.6).vector.double()
        assert torch.allclose(b, 2 * a, atol=1e-12, rtol=0)
    with pytest.raises(DomainError):
        make_feature_steering_vector(sae, [], 1.0)
    with pytest.raises(DomainError):
        make_feature_steering_vector(sae, [sae.n], 1.0)
