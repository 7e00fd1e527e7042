"""Command-line entry point: ``epikv run | synth | profile``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..allocation import calibration_tokens, measure_sensitivity
from ..blockprefill import BoundViolationError
from ..episodic import calibration_sink
from ..scoring import ScorerKind
from .config import ConfigError, ExperimentConfig, load_config
from .corpus import synth_corpus
from .embed_client import EmbeddingError
from .runner import make_model, run

def _alpha(text: str) -> Optional[float] | str:
    if text.lower() in ("none", "null", "uniform"):
        return "none"
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epikv", description="Episodic KV-cache experiments on a toy transformer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="build episodic caches, serve the queries and write metrics")
    p_run.add_argument("--config", help="JSON or key=value config file (defaults apply when omitted)")
    p_run.add_argument("--out", help="output directory (overrides output_dir)")
    p_run.add_argument("--m", type=int, help="per-head cache budget M")
    p_run.add_argument("--m-block", type=int, help="prefill block size M_block")
    p_run.add_argument("--episodes", type=int, help="number of episodes E")
    p_run.add_argument("--alpha", type=_alpha, help="allocation sharpness, or 'none' for uniform budgets")
    p_run.add_argument("--scorer", choices=[k.value for k in ScorerKind])

    p_synth = sub.add_parser("synth", help="write a topic-blocked synthetic conversation")
    p_synth.add_argument("--topics", type=int, default=4)
    p_synth.add_argument("--turns", type=int, default=40, help="turns per topic")
    p_synth.add_argument("--queries", type=int, default=12, help="queries per topic")
    p_synth.add_argument("--seed", type=int, default=1)
    p_synth.add_argument("--interleave", action="store_true", help="cycle queries through topics")
    p_synth.add_argument("-o", "--output", required=True)

    p_prof = sub.add_parser("profile", help="measure per-layer key sensitivity and write sensitivity.json")
    p_prof.add_argument("--model-seed", type=int, default=7)
    p_prof.add_argument("--m", type=int, default=64, help="calibration budget M_cal")
    p_prof.add_argument("--length", type=int, help="calibration length (default 4 * M_cal)")
    p_prof.add_argument("--calibration-seed", type=int, default=0)
    p_prof.add_argument("-o", "--output", required=True)
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = cfg.with_overrides(m=args.m, m_block=args.m_block, episodes=args.episodes, alpha=args.alpha, scorer=args.scorer)
    out = Path(args.out or cfg.output_dir)
    report = run(cfg, out)
    print(
        f"wrote {out}: peak {report.peak_per_layer} <= bound {report.bound_per_layer}, "
        f"{report.switches} switches over {len(report.routes)} queries"
    )
    return 0


def _cmd_synth(args) -> int:
    conv = synth_corpus(args.topics, args.turns, args.queries, args.seed, interleave_queries=args.interleave)
    Path(args.output).write_text(conv.dumps(), encoding="utf-8")
    print(f"wrote {args.output}: {len(conv.history)} turns, {len(conv.queries)} queries")
    return 0


def _cmd_profile(args) -> int:
    model = make_model(ExperimentConfig(model_seed=args.model_seed))
    length = args.length or 4 * args.m
    tokens = calibration_tokens(length, args.calibration_seed, model.config.vocab)
    sink = calibration_sink(args.m)
    profile = measure_sensitivity(model, tokens, args.m, sink, input_id=f"synthetic:{args.calibration_seed}:{length}")
    profile.save(args.output)
    print(json.dumps({"layers": list(profile.similarities)}))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    handlers = {"run": _cmd_run, "synth": _cmd_synth, "profile": _cmd_profile}
    try:
        return handlers[args.command](args)
    except (ConfigError, EmbeddingError, FileNotFoundError, ValueError) as exc:
        print(f"epikv: error: {exc}", file=sys.stderr)
        return 2
    except BoundViolationError as exc:
        print(f"epikv: bound violated: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
