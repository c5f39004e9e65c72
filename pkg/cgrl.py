#!/usr/bin/env python3
"""
Command-line entry point
========================

    cgrl split  --triples kg.tsv --out streams/kg
    cgrl split  --nodes nodes.tsv --edges edges.tsv --out streams/cora
    cgrl split  --synthetic --out streams/toy
    cgrl train  --stream streams/kg --strategy dicgrl --out runs/dicgrl [--config run.cfg] [--K 8 ...]
    cgrl eval   --run runs/dicgrl [--stream streams/kg] [--part 2]
    cgrl report --runs runs

Flags of ``train`` mirror the experiment and model settings and override
values from ``--config``. Exit codes: 0 success, 2 config error, 3 data
error, 4 training divergence, 1 anything else.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from typing import Dict, List, Optional

from dotenv import load_dotenv

from errors import CGRLError, ConfigError
from graph_store import Vocabulary, load_citation_graph, load_triple_file, save_stream
from model import ModelConfig
from pipeline import (STRATEGIES, ExperimentSpec, SplitSpec, apply_settings, emit_report,
                      evaluate_checkpoint, read_config_file, run_experiment, split_stream,
                      synthetic_cluster_stream)

logger = logging.getLogger("cgrl")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(output_dir: Optional[str] = None):
    """Stream handler always; ``<output_dir>/cgrl.log`` when a directory is known"""
    name = os.getenv("CGRL_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise ConfigError(f"CGRL_LOG_LEVEL must be a logging level name, got {name!r}")
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(output_dir, "cgrl.log")))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def _ratios(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"ratios must be comma-separated numbers, got {text!r}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgrl", description="Continual graph representation learning")
    commands = parser.add_subparsers(dest="command", required=True)

    split = commands.add_parser("split", help="cut a graph into a stream of parts")
    source = split.add_mutually_exclusive_group(required=True)
    source.add_argument("--triples", help="head<TAB>relation<TAB>tail file")
    source.add_argument("--nodes", help="id<TAB>label<TAB>f1,f2,... file (needs --edges)")
    source.add_argument("--synthetic", action="store_true", help="two-cluster toy stream")
    split.add_argument("--edges", help="id<TAB>id citation file")
    split.add_argument("--parts", default="0.8,0.05,0.05,0.05,0.05", help="part ratios")
    split.add_argument("--within", default="0.8,0.1,0.1", help="train,validation,query ratios")
    split.add_argument("--seed", type=int, default=0)
    split.add_argument("--out", required=True, help="stream directory to write")

    train = commands.add_parser("train", help="run one strategy over a stream")
    train.add_argument("--config", help="key = value settings file")
    train.add_argument("--stream", dest="dataset", help="stream directory")
    train.add_argument("--strategy", choices=STRATEGIES)
    train.add_argument("--out", dest="output_dir", help="run output directory")
    train.add_argument("--name")
    train.add_argument("--checkpoint-format", dest="checkpoint_format", choices=("npz", "json"))
    for f in fields(ModelConfig):
        # strings are converted to the type of the default by apply_settings
        train.add_argument(_flag(f.name), dest=f.name, metavar=type(f.default).__name__.upper())

    evaluate = commands.add_parser("eval", help="re-evaluate a saved checkpoint")
    evaluate.add_argument("--run", required=True, help="run output directory")
    evaluate.add_argument("--stream", help="stream directory (default: the run's)")
    evaluate.add_argument("--part", type=int, help="checkpoint part (default: last)")

    report = commands.add_parser("report", help="summarise every run under a directory")
    report.add_argument("--runs", required=True)
    return parser


def _train_settings(args: argparse.Namespace) -> Dict[str, str]:
    keys = ["dataset", "strategy", "output_dir", "name", "checkpoint_format"] + [f.name for f in fields(ModelConfig)]
    return {k: getattr(args, k) for k in keys if getattr(args, k) is not None}


def cmd_split(args: argparse.Namespace):
    configure_logging(args.out)
    spec = SplitSpec(part_ratios=_ratios(args.parts), within_ratios=_ratios(args.within), seed=args.seed)
    if args.synthetic:
        dataset = synthetic_cluster_stream(within_ratios=spec.validate().within_ratios, seed=args.seed)
    elif args.nodes:
        if not args.edges:
            raise ConfigError("--nodes needs --edges")
        spec.mode = "node-classification"
        dataset = split_stream(load_citation_graph(args.nodes, args.edges), spec)
    else:
        entities, relations = Vocabulary(), Vocabulary()
        triples = load_triple_file(args.triples, entities, relations)
        dataset = split_stream(triples, spec, entities.names, relations.names)
    save_stream(dataset, args.out)
    print(f"Stream with {len(dataset.parts)} parts written to {args.out}")


def cmd_train(args: argparse.Namespace):
    spec = ExperimentSpec()
    if args.config:
        apply_settings(spec, read_config_file(args.config))
    apply_settings(spec, _train_settings(args))
    if not spec.dataset:
        raise ConfigError("no stream given (--stream or dataset = ... in the config file)")
    spec.validate()
    configure_logging(spec.output_dir)
    reports = run_experiment(spec)
    last = reports[-1].to_dict(timing=False) if reports else {}
    print(json.dumps({k: v for k, v in last.items() if k != "per_part"}, indent=2))


def cmd_eval(args: argparse.Namespace):
    configure_logging()
    report = evaluate_checkpoint(args.run, args.stream, args.part)
    print(json.dumps(report.to_dict(timing=False), indent=2))


def cmd_report(args: argparse.Namespace):
    configure_logging(args.runs)
    for label, path in emit_report(args.runs).items():
        print(f"{label}: {path}")


COMMANDS = {"split": cmd_split, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except CGRLError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
