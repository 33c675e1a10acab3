"""Command-line entry point: ``advspace <command> [--config FILE] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline
from .attacks import enumerate_attacks
from .config import ConfigError, ExperimentConfig, load_config, with_overrides
from .data import IngestError
from .evaluation import ThreatModel
from .surface import norm_name

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_MISSING, EXIT_DATA = 0, 1, 2, 3, 4

COMMANDS = {
    "train": "train the standard model for every dataset",
    "advtrain": "adversarially train the robust model for every dataset",
    "attack": "craft every selected attack for every trial",
    "evaluate": "build curves, envelopes, areas and min-budgets",
    "rank": "rank attacks per threat model; prints the condensed table",
    "correlate": "median Spearman matrices across threat models, datasets and models",
    "hypotheses": "signed-rank tests over component hypotheses",
    "report": "plot-ready curve and heatmap tables",
    "list-attacks": "print all attack ids with their components",
    "run": "run every stage end to end",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config file (INI sections per stage)")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--out", type=Path, help="results directory")
    common.add_argument("--attacks", help="attack subset: 'all' or comma-separated ids/aliases")

    parser = argparse.ArgumentParser(prog="advspace", description="Attack-space exploration toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "rank":
            p.add_argument("--threat", default=None, help="norm of the threat model: l0, l2 or linf")
            p.add_argument("--theta", type=float, default=None, help="time weight (>= 0)")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return with_overrides(cfg, seed=args.seed, out=str(args.out) if args.out else None, attacks=args.attacks)


def _list_attacks() -> None:
    print("id\tloss\tsaliency\tnorm\toptimizer\trr\tcov\talias")
    for a in enumerate_attacks():
        d = a.describe()
        print(f"{a.attack_id}\t{d['loss']}\t{d['saliency']}\t{d['norm']}\t{d['optimizer']}\t{d['rr']}\t{d['cov']}"
              f"\t{a.alias or ''}")


def _rank(cfg: ExperimentConfig, out: Path, args) -> None:
    threat = None
    if args.threat is not None or args.theta is not None:
        tm = ThreatModel(args.threat or "linf", 0.0 if args.theta is None else args.theta)
        threat = tm.name
    if threat is None:
        rows = pipeline.stage_rank(cfg, out)
    else:
        rows = pipeline.stage_rank(cfg, out, threat)
        if not rows:
            raise ConfigError(f"threat model {threat} was not evaluated; evaluated norms "
                              f"{[norm_name(p) for p in cfg.norms]} and thetas {list(cfg.thetas)}")
    sys.stdout.write(pipeline.format_ranking_table(rows))


def dispatch(args, parser) -> int:
    if args.command == "list-attacks":
        _list_attacks()
        return EXIT_OK
    if args.command == "rank" and args.theta is not None and not args.theta >= 0:
        parser.print_usage(sys.stderr)
        print(f"error[config]: theta must be non-negative, got {args.theta}", file=sys.stderr)
        return EXIT_USAGE
    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "run":
        pipeline.run_experiment(cfg, out, log=lambda m: print(m, file=sys.stderr))
        print(out)
    elif cmd in ("train", "advtrain"):
        if cmd == "advtrain" and cfg.advtrain is None:
            raise ConfigError("the config has no [advtrain] section")
        rows = pipeline.stage_train(cfg, out) if cmd == "train" else pipeline.stage_advtrain(cfg, out)
        for r in rows:
            print(f"{r['dataset']}/{r['model']}: train acc {r['train_accuracy']:.3f}, "
                  f"test acc {r['test_accuracy']:.3f}, PGD({r['pgd_epsilon']:g}) acc {r['pgd_accuracy']:.3f}")
    elif cmd == "attack":
        failures = pipeline.stage_attack(cfg, out)
        pipeline.write_manifest(cfg, out, failures)
        for f in failures:
            print(f"attack {f.attack_id} trial {f.trial} failed: {f.error}", file=sys.stderr)
    elif cmd == "evaluate":
        pipeline.stage_evaluate(cfg, out)
    elif cmd == "rank":
        _rank(cfg, out, args)
    elif cmd == "correlate":
        for axis, (rows, cols, m) in pipeline.stage_correlate(cfg, out).items():
            print(f"{axis}: {len(rows)}x{len(cols)}")
    elif cmd == "hypotheses":
        produced = pipeline.stage_hypotheses(cfg, out)
        for model in pipeline.MODELS:
            if model in produced:
                results, threshold = produced[model]
                n_sig = sum(r.p_value < threshold for r in results)
                print(f"{model}: {len(results)} hypotheses, {n_sig} significant at p < {threshold:.3g}")
    elif cmd == "report":
        for path in pipeline.stage_report(cfg, out):
            print(path)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return dispatch(args, parser)
    except IngestError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.MissingArtifactError as exc:
        print(f"error[missing]: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001
        print(f"error[runtime]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
