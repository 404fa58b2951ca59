"""Command-line entry point: ``functok <subcommand> [options]``.

Exit status is 0 on success, 1 on a domain error (bad data, missing or
corrupt artifact) and 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, pipeline as P
from .config import output_root, resolve
from .errors import ConfigError, DomainError, FunctokError
from .plots import KINDS, emit_plot

log = logging.getLogger("functok")


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (dotted path; value parsed as JSON)")
    p.add_argument("--out", help="output root (default: $FUNCTOK_OUT or ./functok_out)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, help="torch intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _steps(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=_ints, help="checkpoint steps (default: train.checkpoints)")


def _layer(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layer", type=int, help="host layer (default: sae.layer)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="functok", description="Function-token analysis toolkit")
    ap.add_argument("--version", action="version", version=f"functok {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        _common(p)
        return p

    p = add("make-corpus", "generate a synthetic corpus (and a trait spec for the trait corpus)")
    p.add_argument("--kind", choices=["toy", "trait"])
    p.add_argument("--n-docs", type=int)
    add("train-tokenizer", "train the tokenizer on the corpus")
    add("corpus-stats", "token table, Zipf fit and burstiness histograms")
    p = add("classify-tokens", "select function tokens by cumulative frequency")
    p.add_argument("--threshold", type=float)
    p = add("train-lm", "train the language model, saving the scheduled checkpoints")
    p.add_argument("--resume", action="store_true", help="continue from the latest saved checkpoint")
    p = add("extract-acts", "record tap activations at each checkpoint")
    _steps(p)
    p = add("train-sae", "train sparse autoencoders")
    p.add_argument("--step", type=int, help="train one SAE for this checkpoint")
    _layer(p)
    p.add_argument("--lambda", dest="lam", type=float, help="sparsity coefficient (default: stage preset)")
    p.add_argument("--match-score", type=float, help="tune lambda to this reconstruction score")
    p.add_argument("--all", action="store_true",
                   help="one SAE per scheduled checkpoint with matched reconstruction scores")
    p = add("recon-score", "reconstruction score of a trained SAE")
    p.add_argument("--step", type=int, required=True)
    _layer(p)
    p = add("count-features", "unique active features per checkpoint")
    _layer(p)
    _steps(p)
    p = add("build-graph", "token-feature bipartite graphs")
    _layer(p)
    _steps(p)
    p = add("coverage-report", "cumulative feature coverage over the frequency ranking")
    _layer(p)
    _steps(p)
    p = add("degree-report", "token degrees per checkpoint")
    _layer(p)
    _steps(p)
    p = add("steer", "find a layer and minimal feature set that induce a trait")
    p.add_argument("--trait", help="trait spec JSON (default: steer.trait or <out>/trait.json)")
    p.add_argument("--step", type=int, help="checkpoint (default: last scheduled)")
    p = add("prediction-table", "top-1 predictions for a prompt at each checkpoint")
    _steps(p)
    p.add_argument("--prompt")
    add("compare-paper", "bundled reference values beside local measurements")
    p = add("plot", "render a report CSV as SVG")
    p.add_argument("csv")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--output", help="SVG path (default: CSV path with .svg)")
    p.add_argument("--title")
    return ap


def run(args: argparse.Namespace) -> list[Path]:
    flags = {"seed": args.seed, "threads": args.threads}
    if args.command == "classify-tokens":
        flags["corpus.threshold"] = args.threshold
    cfg = resolve(args.config, args.set, flags)
    lay = P.Layout(output_root(args.out))
    lay.root.mkdir(parents=True, exist_ok=True)
    c = args.command
    layer = getattr(args, "layer", None)
    steps = getattr(args, "steps", None)
    if c == "make-corpus":
        return P.make_corpus(cfg, lay, args.kind, args.n_docs)
    if c == "train-tokenizer":
        return [P.make_tokenizer(cfg, lay)]
    if c == "corpus-stats":
        P.corpus_stats(cfg, lay)
        return [lay.token_stats, lay.zipf]
    if c == "classify-tokens":
        fs = P.classify_tokens(cfg, lay)
        log.info("%d function tokens cover %.4f of occurrences", len(fs.token_ids), fs.achieved_fraction)
        return [lay.function_tokens]
    if c == "train-lm":
        return list(P.train_lm(cfg, lay, resume=args.resume, progress=args.verbose).values()) + [lay.trace]
    if c == "extract-acts":
        return P.extract_acts(cfg, lay, steps)
    if c == "train-sae":
        if args.all == (args.step is not None):
            raise ConfigError("train-sae needs exactly one of --step or --all")
        if args.all:
            if args.lam is not None or args.match_score is not None:
                raise ConfigError("--all chooses lambda itself; drop --lambda/--match-score")
            outs = P.train_matched_saes(cfg, lay, layer)
        else:
            outs = [P.train_sae(cfg, lay, args.step, layer, args.lam, args.match_score)]
        for o in outs:
            log.info("step %d layer %d lambda %.4g score %.4f L0 %.2f", o.step, o.layer, o.lam, o.score.score, o.mean_l0)
        return [o.path for o in outs]
    if c == "recon-score":
        sc = P.recon_score(cfg, lay, args.step, layer)
        print(json.dumps({"score": sc.score, "h_orig": sc.h_orig, "h_star": sc.h_star, "h_zero": sc.h_zero}))
        return [lay.recon(args.step, cfg["sae"]["layer"] if layer is None else layer)]
    if c == "count-features":
        P.count_features(cfg, lay, layer, steps)
        return [lay.feature_counts(cfg["sae"]["layer"] if layer is None else layer)]
    if c == "build-graph":
        return P.build_graph(cfg, lay, layer, steps)
    if c == "coverage-report":
        summary = P.coverage_report(cfg, lay, layer, steps)
        for step, s in summary.items():
            log.info("step %d: top-%d coverage %.4f, random content mean %.4f (x%.2f)",
                     step, s.top_k, s.top_coverage, s.random_mean, s.ratio)
        return [lay.coverage(s, cfg["sae"]["layer"] if layer is None else layer) for s in summary]
    if c == "degree-report":
        return [P.degree_report(cfg, lay, layer, steps)]
    if c == "steer":
        rep = P.steer(cfg, lay, args.trait, args.step)
        log.info("layer %d, k=%d, alpha %g, held-out flip rate %.2f", rep.chosen_layer, rep.k, rep.alpha,
                 rep.flip_rate)
        return [lay.steering]
    if c == "prediction-table":
        return [P.prediction_report(cfg, lay, steps, args.prompt)]
    if c == "compare-paper":
        return [P.compare_paper(cfg, lay)]
    if c == "plot":
        out = Path(args.output) if args.output else Path(args.csv).with_suffix(".svg")
        return [emit_plot(args.csv, args.kind, out, args.title).path]
    raise ConfigError(f"unknown command {c!r}")  # pragma: no cover


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        for path in run(args):
            print(path)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, FunctokError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
