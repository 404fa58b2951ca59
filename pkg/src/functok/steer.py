"""Steering a language model through function-token activations.

A steer vector is read from (or added to) the tap activation at the last
function token of a prompt. Given an SAE for the chosen layer, the raw steer
vector is decomposed into features and the smallest top-k feature set that
still induces the trait is found by binary search.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DomainError
from .lm.generate import greedy_generate
from .lm.model import TransformerModel
from .sae import SAEModel, sae_encode

log = logging.getLogger(__name__)

ALPHA_GRID = (1.0, 2.0, 4.0, 8.0)


# --- judges ---------------------------------------------------------------------

@dataclass(frozen=True)
class Judge:
    """Pure predicate on a generation. ``kind`` is one of ``starts_with``,
    ``contains``, ``first_token_in`` or ``constant``."""

    kind: str
    params: dict = field(default_factory=dict)

    def __call__(self, ids: Sequence[int], text: str) -> bool:
        if self.kind == "starts_with":
            return text.lstrip().startswith(self.params["prefix"])
        if self.kind == "contains":
            return self.params["substring"] in text
        if self.kind == "first_token_in":
            return bool(ids) and int(ids[0]) in set(self.params["token_ids"])
        if self.kind == "constant":
            return bool(self.params["value"])
        raise ConfigError(f"unknown judge type {self.kind!r}")

    def to_json(self) -> dict:
        return {"type": self.kind, "params": self.params}


@dataclass(frozen=True)
class TraitSpec:
    name: str
    trait_prompt: str
    test_prompts: tuple[str, ...]
    judge: Judge
    heldout_prompts: tuple[str, ...] = ()
    max_new_tokens: int = 4
    success_rate: float = 0.8

    def __post_init__(self):
        if not self.test_prompts:
            raise ConfigError("trait needs at least one test prompt")

    def to_json(self) -> dict:
        return {"name": self.name, "trait_prompt": self.trait_prompt, "test_prompts": list(self.test_prompts),
                "heldout_prompts": list(self.heldout_prompts), "judge": self.judge.to_json(),
                "max_new_tokens": self.max_new_tokens, "success_rate": self.success_rate}

    @classmethod
    def from_json(cls, obj: dict) -> "TraitSpec":
        try:
            judge = Judge(obj["judge"]["type"], dict(obj["judge"].get("params", {})))
            return cls(obj["name"], obj["trait_prompt"], tuple(obj["test_prompts"]), judge,
                       tuple(obj.get("heldout_prompts", ())), int(obj.get("max_new_tokens", 4)),
                       float(obj.get("success_rate", 0.8)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed trait spec: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "TraitSpec":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"trait spec not found: {path}")
        return cls.from_json(json.loads(path.read_text()))


# --- vectors and injection --------------------------------------------------------

@dataclass
class SteerVector:
    layer: int
    vector: torch.Tensor
    source: str  # raw_activation | feature_set | single_feature
    alpha: float = 1.0
    feature_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if not torch.isfinite(self.vector).all():
            raise DomainError("steer vector is not finite")

    def scaled(self, alpha: float) -> "SteerVector":
        return SteerVector(self.layer, self.vector * alpha, self.source, self.alpha * alpha, self.feature_ids)


def injection_site(prompt: Sequence[int], function_mask: np.ndarray) -> int:
    """Index of the last function token in ``prompt``."""
    hits = [i for i, t in enumerate(prompt) if function_mask[int(t)]]
    if not hits:
        raise DomainError("no injection site: prompt contains no function token")
    return hits[-1]


@torch.no_grad()
def extract_steer_vector(model: TransformerModel, prompt: Sequence[int], layer: int,
                         function_mask: np.ndarray) -> SteerVector:
    if not 0 <= layer < model.config.n_layers:
        raise DomainError(f"layer {layer} outside model")
    site = injection_site(prompt, function_mask)
    model.eval()
    _, taps = model(torch.tensor(list(prompt), dtype=torch.long), return_taps=True)
    return SteerVector(layer, taps[layer, site].clone(), "raw_activation")


def steering_hooks(steer: SteerVector, site: int):
    v = steer.vector

    def hook(x: torch.Tensor) -> torch.Tensor:
        x = x.clone()
        x[..., site, :] = x[..., site, :] + v.to(x.dtype)
        return x

    return {steer.layer: hook}


def apply_steering(model: TransformerModel, prompt: Sequence[int], steer: SteerVector | None,
                   function_mask: np.ndarray, max_new_tokens: int) -> list[int]:
    """Greedy continuation with ``steer`` added to the tap activation at the
    prompt's last function token in every forward pass."""
    site = injection_site(prompt, function_mask)
    if len(prompt) + max_new_tokens > model.config.max_seq_len:
        raise DomainError("prompt plus generation exceeds the model context")
    if steer is not None and not 0 <= steer.layer < model.config.n_layers:
        raise DomainError(f"steer layer {steer.layer} outside model")
    hooks = steering_hooks(steer, site) if steer is not None else None
    return greedy_generate(model, prompt, max_new_tokens, hooks)


def make_feature_steering_vector(sae: SAEModel, features: Sequence[int], alpha: float) -> SteerVector:
    """``alpha`` times the sum of the selected decoder columns, in host units."""
    features = [int(i) for i in features]
    if not features:
        raise DomainError("empty feature set")
    if max(features) >= sae.n or min(features) < 0:
        raise DomainError(f"feature id outside dictionary of width {sae.n}")
    with torch.no_grad():
        cols = sae.W_dec[:, features].sum(1) / sae.input_scale
        v = alpha * cols
    source = "single_feature" if len(features) == 1 else "feature_set"
    return SteerVector(sae.config.host_layer, v.detach().clone(), source, alpha, tuple(features))


def decompose_steer_vector(sae: SAEModel, steer: SteerVector) -> list[tuple[int, float]]:
    """Active features of the steer vector, strongest first (ties by id)."""
    if steer.layer != sae.config.host_layer:
        raise DomainError(f"SAE is for layer {sae.config.host_layer}, steer vector for layer {steer.layer}")
    code = sae_encode(sae, steer.vector.to(sae.W_enc.dtype))
    if len(code) == 0:
        raise DomainError("vector outside dictionary support: no feature fires")
    return sorted(code.pairs(), key=lambda p: (-p[1], p[0]))


# --- protocol -------------------------------------------------------------------

@dataclass
class Evaluator:
    """Generates and judges continuations for text prompts."""

    model: TransformerModel
    encode: Callable[[str], Sequence[int]]
    decode: Callable[[Sequence[int]], str]
    function_mask: np.ndarray
    judge: Judge
    max_new_tokens: int = 4

    def run(self, prompt: str, steer: SteerVector | None) -> tuple[list[int], str, bool]:
        ids = list(self.encode(prompt))
        out = apply_steering(self.model, ids, steer, self.function_mask, self.max_new_tokens)
        text = self.decode(out)
        return out, text, self.judge(out, text)

    def rate(self, prompts: Sequence[str], steer: SteerVector | None) -> float:
        return float(np.mean([self.run(p, steer)[2] for p in prompts]))


@dataclass
class LayerSearchResult:
    rates: list[float]
    chosen_layer: int


def find_informative_layer(ev: Evaluator, trait: TraitSpec, alpha: float = 1.0) -> LayerSearchResult:
    """Inject the raw steer vector of the trait prompt at each layer in turn;
    pick the highest success rate, lowest layer on ties."""
    trait_ids = list(ev.encode(trait.trait_prompt))
    rates = []
    for layer in range(ev.model.config.n_layers):
        v = extract_steer_vector(ev.model, trait_ids, layer, ev.function_mask).scaled(alpha)
        rates.append(ev.rate(trait.test_prompts, v))
    if max(rates) == 0:
        log.warning("trait %s: steering succeeded at no layer", trait.name)
    return LayerSearchResult(rates, int(np.argmax(rates)))


@dataclass
class MinimalSetResult:
    k: int
    features: list[int]
    evaluations: dict[int, bool]
    linear_fallback: bool


def find_minimal_feature_set(ranked: Sequence[int], success: Callable[[Sequence[int]], bool]) -> MinimalSetResult:
    """Smallest ``k`` such that ``success(ranked[:k])`` holds, by binary search
    under an assumed monotone success; the boundary is verified afterwards
    and a linear scan takes over if monotonicity is violated."""
    ranked = list(ranked)
    if not ranked:
        raise DomainError("no ranked features to search")
    cache: dict[int, bool] = {}

    def ok(k: int) -> bool:
        if k not in cache:
            cache[k] = bool(success(ranked[:k]))
        return cache[k]

    if not ok(len(ranked)):
        raise DomainError("trait unreachable: the full feature set does not succeed")
    lo, hi = 1, len(ranked)
    while lo < hi:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid + 1
    k = lo

    def boundary(j: int) -> bool:
        # fresh evaluations, independent of what the search cached
        return bool(success(ranked[:j])) and (j == 1 or not bool(success(ranked[: j - 1])))

    fallback = not boundary(k)
    if fallback:
        log.warning("search boundary failed re-verification; falling back to a linear scan")
        cache.clear()
        k = next((j for j in range(1, len(ranked) + 1) if ok(j)), None)
        if k is None or not boundary(k):
            raise DomainError("success is not reproducible; no verified minimal feature set")
    return MinimalSetResult(k, ranked[:k], dict(sorted(cache.items())), fallback)


@dataclass
class SteeringReport:
    trait: str
    chosen_layer: int
    rates: list[float]
    k: int
    features: list[int]
    alpha: float
    ranked: list[tuple[int, float]]
    per_prompt: list[dict]
    flip_rate: float
    linear_fallback: bool
    evaluations: dict[str, dict[int, bool]]

    def to_json(self) -> dict:
        return {"trait": self.trait, "chosen_layer": self.chosen_layer, "rates": self.rates, "k": self.k,
                "S_k": self.features, "alpha": self.alpha,
                "ranked": [[i, round(s, 6)] for i, s in self.ranked],
                "per_prompt_results": self.per_prompt, "heldout_flip_rate": self.flip_rate,
                "linear_fallback": self.linear_fallback,
                "search_evaluations": {a: {str(k): v for k, v in ev.items()} for a, ev in self.evaluations.items()}}


def run_steering(ev: Evaluator, trait: TraitSpec, saes: dict[int, SAEModel],
                 alphas: Sequence[float] = ALPHA_GRID, raw_alpha: float = 1.0) -> SteeringReport:
    """Layer search with the raw steer vector, SAE decomposition at the chosen
    layer, then for each alpha in order a minimal top-k search; the first
    alpha whose full ranked set succeeds is kept. Held-out prompts (or the
    test prompts if none) measure how often the verdict flips."""
    layers = find_informative_layer(ev, trait, raw_alpha)
    layer = layers.chosen_layer
    if layer not in saes:
        raise DomainError(f"no SAE for chosen layer {layer}")
    sae = saes[layer]
    raw = extract_steer_vector(ev.model, list(ev.encode(trait.trait_prompt)), layer, ev.function_mask)
    ranked = decompose_steer_vector(sae, raw)
    ids = [i for i, _ in ranked]
    evaluations: dict[str, dict[int, bool]] = {}
    result, chosen_alpha = None, None
    for alpha in alphas:
        def success(feats, alpha=alpha):
            v = make_feature_steering_vector(sae, feats, alpha)
            return ev.rate(trait.test_prompts, v) >= trait.success_rate

        try:
            result = find_minimal_feature_set(ids, success)
        except DomainError:
            evaluations[str(alpha)] = {len(ids): False}
            continue
        evaluations[str(alpha)] = result.evaluations
        chosen_alpha = alpha
        break
    if result is None:
        raise DomainError(f"trait {trait.name} unreachable for alphas {list(alphas)}")
    steer = make_feature_steering_vector(sae, result.features, chosen_alpha)
    per_prompt = []
    for p in trait.heldout_prompts or trait.test_prompts:
        b_ids, b_text, b_ok = ev.run(p, None)
        s_ids, s_text, s_ok = ev.run(p, steer)
        per_prompt.append({"prompt": p, "baseline": b_text, "steered": s_text, "baseline_verdict": b_ok,
                           "steered_verdict": s_ok, "flipped": (not b_ok) and s_ok})
    flip = float(np.mean([r["flipped"] for r in per_prompt]))
    return SteeringReport(trait.name, layer, layers.rates, result.k, result.features, chosen_alpha, ranked,
                          per_prompt, flip, result.linear_fallback, evaluations)
