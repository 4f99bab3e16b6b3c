"""Command-line entry point: ``robustrl <command> [args]``.

Exit codes: 0 success, 1 invariant failure in ``check``, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import ConfigError, load_config, run_experiment, sweep, train_all
from .mdp import MdpError, TabularMdp
from .robust_dp import robust_value_iteration
from .uncertainty import RegionError, region_from_dict


def _common(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--seed", type=int, default=default, help="override the seed list with one seed")
    parser.add_argument("--out", type=Path, default=default, help="output directory")
    parser.add_argument("--quiet", action="store_true", default=default, help="suppress stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustrl", description="Robust RL toolkit.")
    _common(parser, None)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    # subparser flags default to SUPPRESS so they do not clobber top-level ones
    for name, help_text in (
        ("train", "train one agent per seed and dump the learned tables"),
        ("evaluate", "train, evaluate on the true environment, write report.json and episodes.csv"),
        ("sweep", "cross-validated line search over the radius grid"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", type=Path)
        _common(p, argparse.SUPPRESS)
    p = sub.add_parser("oracle", help="exact robust DP on an MDP JSON file")
    p.add_argument("mdp", type=Path)
    _common(p, argparse.SUPPRESS)
    p = sub.add_parser("check", help="run the invariant suite")
    _common(p, argparse.SUPPRESS)
    return parser


def _emit(text: str, out: Path | None, name: str, quiet: bool) -> None:
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / name).write_text(text + "\n")
        except OSError as exc:
            raise ConfigError("$.output_dir", f"cannot write outputs: {exc}") from None
    if not quiet:
        print(text)


def _config(args) -> object:
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise ConfigError("$", f"cannot read config: {exc}") from None
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seeds": [args.seed]})
    return cfg


def _oracle(path: Path) -> str:
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError("$", f"cannot read MDP file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from None
    try:
        mdp = TabularMdp.from_dict(doc)
    except MdpError as exc:
        raise ConfigError("$", str(exc)) from None
    region = None
    if doc.get("region") is not None:
        try:
            region = region_from_dict(doc["region"])
        except RegionError as exc:
            raise ConfigError("$.region", str(exc)) from None
    res = robust_value_iteration(mdp, region, constrained=bool(doc.get("constrained", False)),
                                 tol=float(doc.get("tol", 1e-12)))
    return res.to_json()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    quiet = bool(args.quiet)
    try:
        if args.command == "check":
            from .checks import run_checks

            results = run_checks(0 if args.seed is None else args.seed)
            lines = [f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
                     for name, ok, detail in results]
            failed = sum(not ok for _, ok, _ in results)
            lines.append(f"{len(results) - failed}/{len(results)} checks passed")
            _emit("\n".join(lines), args.out, "check.txt", quiet)
            return 1 if failed else 0
        if args.command == "oracle":
            _emit(_oracle(args.mdp), args.out, "oracle.json", quiet)
            return 0
        cfg = _config(args)
        if args.command == "evaluate":
            report = run_experiment(cfg, args.out)
            if not quiet:
                print(report.to_json())
            return 0
        doc = train_all(cfg) if args.command == "train" else sweep(cfg)
        _emit(json.dumps(doc, indent=2, sort_keys=True), args.out, f"{args.command}.json", quiet)
        return 0
    except ConfigError as exc:
        print(f"robustrl: config error at {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
