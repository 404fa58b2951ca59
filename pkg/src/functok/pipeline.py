"""Pipeline stages shared by the command line and the acceptance suite.

Every stage reads its inputs from, and writes its outputs to, a fixed layout
under one output root, and embeds the package version and the resolved
configuration in what it writes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import corpus as C
from . import graph as G
from . import reference as R
from . import sae as S
from . import steer as ST
from . import synth
from .config import preamble, provenance, sub_seed
from .errors import ConfigError, DomainError
from .lm import PRESETS, LossGroupTrace, TokenStream, TrainConfig, init_model, load_checkpoint, load_model, train
from .lm.activations import ActivationShard, extract_activations
from .lm.generate import prediction_table
from .lm.train import configure_determinism
from .reports import float_cell, write_csv, write_json
from .tokenizer import TokenizerSpec, display, load_tokenizer, save_tokenizer, train_tokenizer

log = logging.getLogger(__name__)

BUNDLED_CORPUS = "bundled:toy1000"
STAGES = ("early", "intermediate", "late")


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("functok").joinpath("data", "toy1000.jsonl.gz")))


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def corpus(self) -> Path:
        return self.root / "corpus.jsonl.gz"

    @property
    def trait(self) -> Path:
        return self.root / "trait.json"

    @property
    def tokenizer(self) -> Path:
        return self.root / "tokenizer.json"

    @property
    def token_stats(self) -> Path:
        return self.root / "token_stats.csv"

    @property
    def zipf(self) -> Path:
        return self.root / "zipf.json"

    @property
    def function_tokens(self) -> Path:
        return self.root / "function_tokens.json"

    @property
    def trace(self) -> Path:
        return self.root / "lm" / "loss_trace.csv"

    def burstiness(self, rank: int) -> Path:
        return self.root / "burstiness" / f"rank_{rank:05d}.csv"

    def checkpoint(self, step: int) -> Path:
        return self.root / "lm" / f"step_{step:07d}.ftck"

    def acts(self, step: int) -> Path:
        return self.root / "acts" / f"step_{step:07d}.acts"

    def sae(self, step: int, layer: int) -> Path:
        return self.root / "sae" / f"step_{step:07d}_layer{layer}.ftsa"

    def recon(self, step: int, layer: int) -> Path:
        return self.root / "recon" / f"step_{step:07d}_layer{layer}.json"

    def graph(self, step: int, layer: int) -> Path:
        return self.root / "graph" / f"step_{step:07d}_layer{layer}.ftgr"

    def coverage(self, step: int, layer: int) -> Path:
        return self.root / "coverage" / f"step_{step:07d}_layer{layer}.csv"

    def coverage_summary(self, step: int, layer: int) -> Path:
        return self.root / "coverage" / f"step_{step:07d}_layer{layer}.json"

    def feature_counts(self, layer: int) -> Path:
        return self.root / f"feature_counts_layer{layer}.csv"

    def degree(self, layer: int) -> Path:
        return self.root / f"degree_layer{layer}.csv"

    @property
    def steering(self) -> Path:
        return self.root / "steering_report.json"

    @property
    def prediction(self) -> Path:
        return self.root / "prediction_table.csv"

    @property
    def compare(self) -> Path:
        return self.root / "compare_paper.csv"


# --- shared loading ------------------------------------------------------------------

def corpus_path(cfg: dict, lay: Layout) -> Path:
    p = cfg["corpus"]["path"]
    if p == BUNDLED_CORPUS:
        return bundled_corpus_path()
    path = Path(p) if p else lay.corpus
    if not path.exists():
        raise ConfigError(f"corpus not found at {path}; run make-corpus or set corpus.path")
    return path


def load_documents(cfg: dict, lay: Layout) -> list[C.Document]:
    return list(C.read_corpus(corpus_path(cfg, lay)))


def _need(path: Path, what: str, stage: str) -> Path:
    if not path.exists():
        raise DomainError(f"{what} not found at {path}; run {stage} first")
    return path


def load_tok(lay: Layout):
    return load_tokenizer(_need(lay.tokenizer, "tokenizer", "train-tokenizer"))


def load_stream(cfg: dict, lay: Layout) -> tuple[object, list[tuple[int, np.ndarray]]]:
    docs = load_documents(cfg, lay)
    tok = load_tok(lay)
    return tok, list(C.tokenize_stream(docs, tok))


def load_function_tokens(lay: Layout) -> C.FunctionTokenSet:
    obj = json.loads(_need(lay.function_tokens, "function-token set", "classify-tokens").read_text())
    return C.FunctionTokenSet.from_json(obj)


def load_table(lay: Layout) -> C.TokenTable:
    return C.TokenTable.from_csv(_need(lay.token_stats, "token statistics", "corpus-stats"))


def checkpoint_steps(cfg: dict, lay: Layout, steps: list[int] | None = None) -> list[int]:
    steps = list(steps) if steps else list(cfg["train"]["checkpoints"])
    for s in steps:
        _need(lay.checkpoint(s), f"checkpoint for step {s}", "train-lm")
    return steps


def stage_of(step: int, schedule: list[int]) -> str:
    """Early for the first scheduled checkpoint, late for the last, otherwise
    intermediate."""
    if step == schedule[0]:
        return "early"
    if step == schedule[-1]:
        return "late"
    return "intermediate"


def _meta(cfg: dict, **extra) -> dict:
    return {**provenance(cfg), **extra}


def _write_json(path: Path, cfg: dict, body: dict) -> Path:
    return write_json(path, {**body, "provenance": provenance(cfg)})


# --- corpus stages ------------------------------------------------------------------

def make_corpus(cfg: dict, lay: Layout, kind: str | None = None, n_docs: int | None = None) -> list[Path]:
    kind = kind or cfg["corpus"]["kind"]
    n = n_docs or cfg["corpus"]["n_docs"]
    seed = cfg["seed"]
    if kind == "toy":
        return [C.write_jsonl(synth.toy_english(n, seed=seed), lay.corpus)]
    if kind == "trait":
        world = synth.trait_world(seed)
        out = [C.write_jsonl(synth.trait_corpus(n, seed=seed, world=world), lay.corpus)]
        out.append(write_json(lay.trait, synth.trait_spec(world, seed)))
        return out
    raise ConfigError(f"unknown corpus kind {kind!r}; expected toy or trait")


def make_tokenizer(cfg: dict, lay: Layout) -> Path:
    t = cfg["corpus"]["tokenizer"]
    spec = TokenizerSpec(t["mode"], int(t["vocab_size"]))
    tok = train_tokenizer((d.text for d in load_documents(cfg, lay)), spec)
    return save_tokenizer(tok, lay.tokenizer)


def corpus_stats(cfg: dict, lay: Layout) -> dict:
    tok, stream = load_stream(cfg, lay)
    table = C.compute_token_stats(stream, tok.vocab_size, tok)
    table.to_csv(lay.token_stats, preamble(cfg, n_docs=table.n_docs, total_tokens=table.total))
    fr = cfg["corpus"]["zipf_fit_range"]
    fit = C.fit_zipf(table, tuple(fr) if fr else None)
    _write_json(lay.zipf, cfg, {"alpha": fit.alpha, "intercept": fit.intercept, "r_squared": fit.r_squared,
                                "fit_range": list(fit.fit_range), "n_docs": table.n_docs, "total": table.total})
    ranks = cfg["corpus"]["burstiness_tokens"] or [1, min(len(table), 200)]
    bins = cfg["corpus"]["burstiness_bins"]
    for rank in ranks:
        if not 1 <= rank <= len(table):
            raise DomainError(f"burstiness rank {rank} outside 1..{len(table)}")
        token_id = int(table.token_ids[rank - 1])
        hist = C.compute_burstiness(token_id, stream, bins)
        write_csv(lay.burstiness(rank), ["bin", "count"], [[b, int(c)] for b, c in enumerate(hist.bins)],
                  preamble(cfg, token_id=token_id, token=table.surfaces[rank - 1]))
    return {"table": table, "zipf": fit}


def classify_tokens(cfg: dict, lay: Layout) -> C.FunctionTokenSet:
    fs = C.classify_function_tokens(load_table(lay), cfg["corpus"]["threshold"])
    _write_json(lay.function_tokens, cfg, fs.to_json())
    return fs


# --- language model stages -------------------------------------------------------------

def model_config(cfg: dict, vocab_size: int):
    name = cfg["model"]["preset"]
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; expected one of {sorted(PRESETS)}")
    return replace(PRESETS[name], vocab_size=vocab_size).validate()


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    keys = ("batch_size", "seq_len", "steps", "warmup", "peak_lr", "floor_lr", "weight_decay", "grad_clip", "log_every")
    return TrainConfig(**{k: t[k] for k in keys}, seed=sub_seed(cfg["seed"], "batches")).validate()


def _truncate_trace(path: Path, step: int) -> None:
    """Drop trace rows logged at or after ``step`` so a resumed run appends
    exactly the rows a straight run would have written."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines(keepends=True):
        head = line.split(",", 1)[0]
        if head.isdigit() and int(head) >= step:
            continue
        keep.append(line)
    path.write_text("".join(keep))


def train_lm(cfg: dict, lay: Layout, resume: bool = False, progress: bool = False) -> dict[int, Path]:
    configure_determinism(cfg["threads"], cfg["deterministic"])
    tok, stream = load_stream(cfg, lay)
    fmask = load_function_tokens(lay).mask(tok.vocab_size)
    tcfg = train_config(cfg)
    mcfg = model_config(cfg, tok.vocab_size)
    if tcfg.seq_len > mcfg.max_seq_len:
        raise ConfigError(f"train.seq_len {tcfg.seq_len} exceeds model context {mcfg.max_seq_len}")
    ts = TokenStream([ids for _, ids in stream], tok.eot_id)
    kwargs = dict(checkpoint_steps=cfg["train"]["checkpoints"], checkpoint_dir=lay.checkpoint(0).parent,
                  checkpoint_meta=_meta(cfg), progress=progress)
    done = [s for s in cfg["train"]["checkpoints"] if lay.checkpoint(s).exists()] if resume else []
    if done:
        ck = load_checkpoint(lay.checkpoint(done[-1]))
        if ck.train_config != tcfg:
            raise ConfigError("cannot resume: training configuration differs from the checkpoint")
        _truncate_trace(lay.trace, ck.step)
        trace = LossGroupTrace(lay.trace, preamble(cfg))
        res = train(ck.model, ts, fmask, tcfg, optimizer=ck.optimizer, start_step=ck.step, trace=trace,
                    pending=ck.pending, **kwargs)
    else:
        lay.trace.unlink(missing_ok=True)
        trace = LossGroupTrace(lay.trace, preamble(cfg))
        # checkpoints record the global generator, so fix it for byte-identical reruns
        torch.manual_seed(sub_seed(cfg["seed"], "torch"))
        model = init_model(mcfg, sub_seed(cfg["seed"], "init"))
        res = train(model, ts, fmask, tcfg, trace=trace, **kwargs)
    return res.checkpoints


def extract_acts(cfg: dict, lay: Layout, steps: list[int] | None = None) -> list[Path]:
    configure_determinism(cfg["threads"], cfg["deterministic"])
    _, stream = load_stream(cfg, lay)
    a = cfg["acts"]
    out = []
    for step in checkpoint_steps(cfg, lay, steps):
        model, _ = load_model(lay.checkpoint(step))
        shard = extract_activations(model, stream, a["layers"], a["n_docs"], a["max_tokens"],
                                    sub_seed(cfg["seed"], "acts"), meta=_meta(cfg, checkpoint_step=step))
        out.append(shard.write(lay.acts(step)))
    return out


def load_shard(lay: Layout, step: int) -> ActivationShard:
    return ActivationShard.read(_need(lay.acts(step), f"activations for step {step}", "extract-acts"))


def eval_tokens(cfg: dict, stream, length: int) -> torch.Tensor:
    """Fixed evaluation batch: the first ``sae.eval_docs`` documents (in a
    seeded order) long enough to give ``length`` tokens."""
    order = np.random.default_rng(sub_seed(cfg["seed"], "eval")).permutation(len(stream))
    rows = []
    for i in order:
        ids = stream[i][1]
        if len(ids) >= length:
            rows.append(np.asarray(ids[:length], dtype=np.int64))
            if len(rows) == cfg["sae"]["eval_docs"]:
                break
    if not rows:
        raise DomainError(f"no evaluation document has {length} tokens")
    return torch.from_numpy(np.stack(rows))


# --- SAE stages -------------------------------------------------------------------------

def sae_train_config(cfg: dict, lam: float, step: int, layer: int) -> S.SAETrainConfig:
    s = cfg["sae"]
    return S.SAETrainConfig(lam=float(lam), bandwidth=s["bandwidth"], lr=s["lr"], batch_size=s["batch_size"],
                            steps=s["steps"], dead_window=s["dead_window"], theta_init=s["theta_init"],
                            lambda_warmup=s["lambda_warmup"], penalty=s["penalty"], threshold_lr=s["threshold_lr"],
                            seed=sub_seed(cfg["seed"], f"sae-{step}-{layer}"))


def preset_lambda(cfg: dict, stage: str, d: int) -> float:
    """Stage preset rescaled from the reference host width to width ``d``:
    with inputs normalised to mean squared norm d the reconstruction term
    grows linearly in d, so the coefficient must too."""
    s = cfg["sae"]
    return float(s["lambda"][stage]) * d / float(s["lambda_reference_width"])


@dataclass
class SAEOutcome:
    step: int
    layer: int
    lam: float
    model: S.SAEModel
    score: S.ReconScore
    mean_l0: float
    path: Path | None = None


class _SAEContext:
    """Shared state for training and scoring SAEs on one output root."""

    def __init__(self, cfg: dict, lay: Layout):
        self.cfg, self.lay = cfg, lay
        self.tok, self.stream = load_stream(cfg, lay)
        self._eval: dict[int, torch.Tensor] = {}

    def tokens_for(self, model) -> torch.Tensor:
        length = min(model.config.max_seq_len, self.cfg["acts"]["max_tokens"]) + 1
        if length not in self._eval:
            self._eval[length] = eval_tokens(self.cfg, self.stream, length)
        return self._eval[length]

    def fit(self, step: int, layer: int, lam: float) -> SAEOutcome:
        model, _ = load_model(self.lay.checkpoint(step))
        shard = load_shard(self.lay, step)
        if layer not in shard.meta.get("layers", []):
            raise DomainError(f"activations for step {step} do not include layer {layer}")
        x = shard.layer(layer)["vector"]
        res = S.train_sae(x, S.SAEConfig(d=shard.d, width_multiplier=self.cfg["sae"]["width_multiplier"],
                                         host_layer=layer, host_step=step),
                          sae_train_config(self.cfg, lam, step, layer))
        score = S.reconstruction_score(model, res.model, self.tokens_for(model), self.tok.eot_id, layer)
        return SAEOutcome(step, layer, float(lam), res.model, score, S.mean_l0(res.model, x))

    def save(self, o: SAEOutcome) -> SAEOutcome:
        info = {"h_orig": o.score.h_orig, "h_star": o.score.h_star, "h_zero": o.score.h_zero,
                "score": o.score.score, "in_range": o.score.in_range}
        o.path = S.save_sae(self.lay.sae(o.step, o.layer), o.model, sae_train_config(self.cfg, o.lam, o.step, o.layer),
                            _meta(self.cfg, checkpoint_step=o.step, recon=info, mean_l0=o.mean_l0))
        _write_json(self.lay.recon(o.step, o.layer), self.cfg,
                    {"checkpoint_step": o.step, "layer": o.layer, "lambda": o.lam, "mean_l0": o.mean_l0, **info})
        return o


def _tuned(ctx: _SAEContext, step: int, layer: int, lam0: float, target: float, tol: float,
           first: SAEOutcome | None = None) -> SAEOutcome:
    cache: dict[float, SAEOutcome] = {lam0: first} if first else {}

    def score_of(lam: float) -> float:
        if lam not in cache:
            cache[lam] = ctx.fit(step, layer, lam)
        return cache[lam].score.score

    lam, _ = S.tune_lambda(score_of, lam0, target, tol)
    return cache[lam]


def train_sae(cfg: dict, lay: Layout, step: int, layer: int | None = None, lam: float | None = None,
              match_score: float | None = None) -> SAEOutcome:
    """Train one SAE; with ``match_score`` the sparsity coefficient is tuned
    until the reconstruction score lies within half the match tolerance."""
    configure_determinism(cfg["threads"], cfg["deterministic"])
    layer = cfg["sae"]["layer"] if layer is None else layer
    checkpoint_steps(cfg, lay, [step])
    if lam is None:
        lam = preset_lambda(cfg, stage_of(step, cfg["train"]["checkpoints"]), load_shard(lay, step).d)
    ctx = _SAEContext(cfg, lay)
    out = ctx.fit(step, layer, lam)
    if match_score is not None:
        out = _tuned(ctx, step, layer, lam, match_score, cfg["sae"]["match_tolerance"] / 2, out)
    return ctx.save(out)


def train_matched_saes(cfg: dict, lay: Layout, layer: int | None = None) -> list[SAEOutcome]:
    """One SAE per scheduled checkpoint with the stage's preset coefficient.
    If the reconstruction scores spread wider than the match tolerance, the
    early and late coefficients are re-tuned to the intermediate score."""
    configure_determinism(cfg["threads"], cfg["deterministic"])
    layer = cfg["sae"]["layer"] if layer is None else layer
    steps = checkpoint_steps(cfg, lay)
    ctx = _SAEContext(cfg, lay)
    outs = [ctx.fit(s, layer, preset_lambda(cfg, stage_of(s, steps), load_shard(lay, s).d)) for s in steps]
    tol = cfg["sae"]["match_tolerance"]
    scores = [o.score.score for o in outs]
    if len(outs) > 1 and max(scores) - min(scores) > tol:
        ref = outs[len(outs) // 2]
        target = ref.score.score
        outs = [o if o is ref or abs(o.score.score - target) <= tol / 2
                else _tuned(ctx, o.step, layer, o.lam, target, tol / 2, o) for o in outs]
    return [ctx.save(o) for o in outs]


def load_sae_for(lay: Layout, step: int, layer: int) -> tuple[S.SAEModel, dict]:
    return S.load_sae(_need(lay.sae(step, layer), f"SAE for step {step} layer {layer}", "train-sae"))


def recon_score(cfg: dict, lay: Layout, step: int, layer: int | None = None) -> S.ReconScore:
    layer = cfg["sae"]["layer"] if layer is None else layer
    ctx = _SAEContext(cfg, lay)
    model, _ = load_model(_need(lay.checkpoint(step), f"checkpoint for step {step}", "train-lm"))
    sae, _ = load_sae_for(lay, step, layer)
    sc = S.reconstruction_score(model, sae, ctx.tokens_for(model), ctx.tok.eot_id, layer)
    _write_json(lay.recon(step, layer), cfg, {"checkpoint_step": step, "layer": layer, "h_orig": sc.h_orig,
                                              "h_star": sc.h_star, "h_zero": sc.h_zero, "score": sc.score,
                                              "in_range": sc.in_range})
    return sc


def count_features(cfg: dict, lay: Layout, layer: int | None = None,
                   steps: list[int] | None = None) -> list[S.FeatureCountRow]:
    layer = cfg["sae"]["layer"] if layer is None else layer
    rows = []
    for step in checkpoint_steps(cfg, lay, steps):
        sae, header = load_sae_for(lay, step, layer)
        x = load_shard(lay, step).layer(layer)["vector"]
        unique = S.count_unique_features(sae, x)
        score = header["meta"].get("recon", {}).get("score", float("nan"))
        rows.append(S.FeatureCountRow(step, header["lambda"], score, unique, sae.n - unique))
    write_csv(lay.feature_counts(layer), S.FEATURE_COUNT_COLUMNS, [r.cells() for r in rows],
              preamble(cfg, layer=layer, sample_records=len(x) if rows else 0))
    return rows


# --- graph stages ------------------------------------------------------------------------

def build_graph(cfg: dict, lay: Layout, layer: int | None = None, steps: list[int] | None = None) -> list[Path]:
    layer = cfg["sae"]["layer"] if layer is None else layer
    vocab = load_tok(lay).vocab_size
    out = []
    for step in checkpoint_steps(cfg, lay, steps):
        sae, _ = load_sae_for(lay, step, layer)
        shard = load_shard(lay, step)
        g = G.build_bipartite([shard], sae, vocab_size=vocab)
        g.provenance.update(_meta(cfg, checkpoint_step=step, layer=layer))
        out.append(g.save(lay.graph(step, layer)))
    return out


def load_graph(lay: Layout, step: int, layer: int) -> G.BipartiteGraph:
    return G.BipartiteGraph.load(_need(lay.graph(step, layer), f"graph for step {step} layer {layer}", "build-graph"))


@dataclass(frozen=True)
class CoverageSummary:
    top_k: int
    top_coverage: float
    random_mean: float
    random_std: float
    ratio: float
    pool_size: int


def random_subset_coverage(graph: G.BipartiteGraph, pool: np.ndarray, k: int, n_subsets: int,
                           seed: int) -> np.ndarray:
    """Coverage of ``n_subsets`` random ``k``-token subsets drawn from ``pool``."""
    if len(pool) < k:
        raise DomainError(f"only {len(pool)} candidate tokens for {k}-token subsets")
    rng = np.random.default_rng(seed)
    return np.array([G.cumulative_feature_coverage(graph, rng.choice(pool, size=k, replace=False).tolist(), k)
                     for _ in range(n_subsets)])


def coverage_report(cfg: dict, lay: Layout, layer: int | None = None,
                    steps: list[int] | None = None) -> dict[int, CoverageSummary]:
    layer = cfg["sae"]["layer"] if layer is None else layer
    table = load_table(lay)
    fs = load_function_tokens(lay)
    ranking = [int(t) for t in table.token_ids]
    k, n_sub = cfg["graph"]["top_k"], cfg["graph"]["random_subsets"]
    out = {}
    for step in checkpoint_steps(cfg, lay, steps):
        g = load_graph(lay, step, layer)
        write_csv(lay.coverage(step, layer), G.COVERAGE_COLUMNS, G.coverage_rows(g, ranking, table.surfaces),
                  preamble(cfg, checkpoint_step=step, layer=layer))
        # content tokens that occur in the activation sample
        pool = np.array([t for t in g.token_nodes.tolist() if t not in fs], dtype=np.int64)
        rand = random_subset_coverage(g, pool, k, n_sub, sub_seed(cfg["seed"], f"subsets-{step}-{layer}"))
        top = G.cumulative_feature_coverage(g, ranking, k)
        mean = float(rand.mean())
        s = CoverageSummary(k, top, mean, float(rand.std()), top / mean if mean > 0 else float("inf"), len(pool))
        rate = G.activation_rate(g, g.provenance["dictionary_width"])
        _write_json(lay.coverage_summary(step, layer), cfg,
                    {"checkpoint_step": step, "layer": layer, **s.__dict__, "activation_rate": rate})
        out[step] = s
    return out


def degree_report(cfg: dict, lay: Layout, layer: int | None = None, steps: list[int] | None = None) -> Path:
    layer = cfg["sae"]["layer"] if layer is None else layer
    table = load_table(lay)
    steps = checkpoint_steps(cfg, lay, steps)
    graphs = {s: load_graph(lay, s, layer) for s in steps}
    ranking = [int(t) for t in table.token_ids]
    got, degrees = G.degree_by_checkpoint(graphs, ranking)
    cols = ["rank", "token"] + [f"degree_step_{s}" for s in got]
    rows = [[r + 1, table.surfaces[r]] + [int(degrees[r, j]) for j in range(len(got))] for r in range(len(ranking))]
    return write_csv(lay.degree(layer), cols, rows, preamble(cfg, layer=layer))


# --- steering and reporting -----------------------------------------------------------

def steer(cfg: dict, lay: Layout, trait_path: str | Path | None = None, step: int | None = None) -> ST.SteeringReport:
    configure_determinism(cfg["threads"], cfg["deterministic"])
    trait = ST.TraitSpec.load(trait_path or cfg["steer"]["trait"] or lay.trait)
    step = step or cfg["train"]["checkpoints"][-1]
    model, _ = load_model(_need(lay.checkpoint(step), f"checkpoint for step {step}", "train-lm"))
    tok = load_tok(lay)
    fmask = load_function_tokens(lay).mask(tok.vocab_size)
    saes = {l: load_sae_for(lay, step, l)[0] for l in range(model.config.n_layers) if lay.sae(step, l).exists()}
    if not saes:
        raise DomainError(f"no SAEs for step {step}; run train-sae for each layer first")
    ev = ST.Evaluator(model, lambda s: tok.encode(s.encode("utf-8")).tolist(),
                      lambda ids: tok.decode(ids).decode("utf-8", "replace"), fmask, trait.judge, trait.max_new_tokens)
    report = ST.run_steering(ev, trait, saes, cfg["steer"]["alphas"], cfg["steer"]["raw_alpha"])
    _write_json(lay.steering, cfg, {**report.to_json(), "checkpoint_step": step})
    return report


def prediction_report(cfg: dict, lay: Layout, steps: list[int] | None = None, prompt: str | None = None) -> Path:
    tok = load_tok(lay)
    text = prompt or cfg["prediction"]["prompt"]
    if text:
        ids = tok.encode(text.encode("utf-8")).tolist()
    else:
        ids = next(iter(C.tokenize_stream(load_documents(cfg, lay)[:1], tok)))[1][:16].tolist()
    models = [(s, load_model(lay.checkpoint(s))[0]) for s in checkpoint_steps(cfg, lay, steps)]
    if len(ids) > min(m.config.max_seq_len for _, m in models):
        raise DomainError("prompt longer than the model context")
    got, table = prediction_table(models, ids)
    cols = ["step"] + [f"{i}:{display(tok.token_bytes(t))}" for i, t in enumerate(ids)]
    rows = [[s] + [display(tok.token_bytes(int(t))) for t in table[i]] for i, s in enumerate(got)]
    return write_csv(lay.prediction, cols, rows, preamble(cfg))


COMPARE_COLUMNS = ["quantity", "reference", "unit", "source", "measured"]


def local_measurements(cfg: dict, lay: Layout) -> list[tuple[str, str, str]]:
    """(quantity, value, unit) for whatever local artifacts exist."""
    out: list[tuple[str, str, str]] = []
    if lay.function_tokens.exists():
        fs = load_function_tokens(lay)
        out += [("local.function_tokens.count", str(len(fs.token_ids)), "count"),
                ("local.function_tokens.achieved_fraction", float_cell(100 * fs.achieved_fraction, 2), "%")]
    if lay.trace.exists():
        rows = LossGroupTrace.read(lay.trace)
        if rows:
            for g in ("FF", "FC", "CF", "CC"):
                out.append((f"local.loss_{g}[final]", float_cell(rows[-1][f"loss_{g}"], 4), "nats"))
    layer = cfg["sae"]["layer"]
    for step in cfg["train"]["checkpoints"]:
        p = lay.coverage_summary(step, layer)
        if p.exists():
            s = json.loads(p.read_text())
            out += [(f"local.top{s['top_k']}_coverage[step {step}]", float_cell(100 * s["top_coverage"], 2), "%"),
                    (f"local.random_content_coverage[step {step}]", float_cell(100 * s["random_mean"], 2), "%")]
    return out


def compare_paper(cfg: dict, lay: Layout) -> Path:
    rows = [[q, str(v.value), v.unit, v.source, ""] for q, v in R.reference_rows()]
    rows += [[q, "", unit, "local run", val] for q, val, unit in local_measurements(cfg, lay)]
    return write_csv(lay.compare, COMPARE_COLUMNS, rows, preamble(cfg))
