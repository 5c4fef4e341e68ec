"""Command line entry point: ``safepath <command> [--config FILE] [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from safepath.adapter import API_KEY_ENV, RecordingTransport, ReplayTransport
from safepath.errors import AdapterError, BackendError
from safepath.experiments import (COMMANDS, ExperimentConfig, MissingArtifactError,
                                  NonMonotoneError)

log = logging.getLogger("safepath")

EXIT_MISSING, EXIT_BACKEND, EXIT_CHECK, EXIT_CONFIG = 2, 3, 4, 5

# flag dest -> (section or None, key)
_FLAG_MAP = {
    "alpha": (None, "alpha"), "delta": (None, "delta"), "score_kind": (None, "score_kind"),
    "strategy": (None, "strategy"), "k": (None, "k"), "seeds": (None, "seeds"),
    "n_cal": (None, "n_cal"), "n_test": (None, "n_test"), "delta_grid": (None, "delta_grid"),
    "sweep_alpha": (None, "sweep_alpha"), "workers": (None, "workers"),
    "noise": ("mock", "noise_scale"), "reference_bonus": ("mock", "reference_bonus"),
    "episodes": ("env", "episodes"), "frames": ("env", "frames"),
    "env_kinds": ("env", "kinds"), "env_noise": ("env", "noise_scale"),
    "env_alpha": ("env", "alpha"), "ablation_seeds": ("ablation", "seeds"),
    "scenes_per_seed": ("ablation", "scenes_per_seed"),
    "backend": ("backend", "kind"), "endpoint_url": ("backend", "endpoint_url"),
    "model_name": ("backend", "model_name"), "top_logprobs": ("backend", "top_logprobs"),
    "timeout": ("backend", "timeout"), "max_retries": ("backend", "max_retries"),
    "max_in_flight": ("backend", "max_in_flight"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    common.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    common.add_argument("--record", type=Path, help="append backend exchanges to this transcript")
    common.add_argument("--replay", type=Path, help="serve backend calls from this transcript")
    common.add_argument("-v", "--verbose", action="store_true")
    g = common.add_argument_group("experiment (overrides the config file)")
    g.add_argument("--alpha", type=float, nargs="+")
    g.add_argument("--delta", type=float, nargs="+")
    g.add_argument("--score-kind", nargs="+", choices=["LAC", "APS", "RAPS"])
    g.add_argument("--strategy", choices=["MinCollision", "RandomSample", "Average",
                                          "ConformalWeightedAverage", "ConformalTopPath"])
    g.add_argument("--k", type=int)
    g.add_argument("--seeds", type=int, nargs="+")
    g.add_argument("--n-cal", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--delta-grid", type=float, nargs="+")
    g.add_argument("--sweep-alpha", type=float, nargs="+")
    g.add_argument("--workers", type=int)
    g.add_argument("--noise", type=float, help="mock scorer noise scale")
    g.add_argument("--reference-bonus", type=float)
    g.add_argument("--episodes", type=int, help="closed-loop episodes per environment")
    g.add_argument("--frames", type=int)
    g.add_argument("--env-kinds", nargs="+", choices=["highway", "intersection", "roundabout"])
    g.add_argument("--env-noise", type=float)
    g.add_argument("--env-alpha", type=float)
    g.add_argument("--ablation-seeds", type=int)
    g.add_argument("--scenes-per-seed", type=int)
    b = common.add_argument_group(f"backend (credential read from ${API_KEY_ENV})")
    b.add_argument("--backend", choices=["mock", "external"])
    b.add_argument("--endpoint-url")
    b.add_argument("--model-name")
    b.add_argument("--top-logprobs", type=int)
    b.add_argument("--timeout", type=float)
    b.add_argument("--max-retries", type=int)
    b.add_argument("--max-in-flight", type=int)

    parser = argparse.ArgumentParser(prog="safepath",
                                     description="Conformal path selection experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "calibrate": "build the calibration pool and persist thresholds",
        "evaluate": "coverage, set size and delegation per alpha, score and policy",
        "sweep-delta": "delegation rate over the similarity threshold grid",
        "ablate": "collision rates of the three stage ablations",
        "closedloop": "pipeline vs greedy baseline in the closed-loop environments",
        "report": "collect existing results into report.md",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    doc = {}
    if args.config is not None:
        doc = yaml.safe_load(args.config.read_text()) or {}
        if not isinstance(doc, dict):
            raise ValueError(f"{args.config} must hold a mapping")
    for dest, (section, key) in _FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            doc[key] = value
        else:
            doc.setdefault(section, {})
            doc[section][key] = value
    return ExperimentConfig.from_dict(doc)


def _transport(args):
    if args.replay is not None:
        transport = ReplayTransport.from_file(args.replay)
    else:
        transport = None
    if args.record is not None:
        import httpx
        transport = RecordingTransport(transport or httpx.HTTPTransport(), args.record)
    return transport


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    # keep request lines (and anything near the auth header) out of the log
    logging.getLogger("httpx").setLevel(logging.WARNING)
    try:
        cfg = load_config(args)
    except (ValueError, OSError, yaml.YAMLError) as exc:
        log.error("bad configuration: %s", exc)
        return EXIT_CONFIG
    try:
        result = COMMANDS[args.command](cfg, args.out, _transport(args))
    except MissingArtifactError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (BackendError, AdapterError) as exc:
        log.error("backend failure: %s", exc)
        return EXIT_BACKEND
    except NonMonotoneError as exc:
        log.error("check failed: %s", exc)
        return EXIT_CHECK
    if args.command == "report":
        print(result["text"])
    else:
        print(json.dumps(result, sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
