"""``impactlab`` command line.

    impactlab run <config.json> [--out DIR] [--threads N]
    impactlab registry
    impactlab verify <manifest.json>

Exit codes: 0 success, 1 verification mismatch, 2 config error,
3 numerical failure, 4 I/O error.  Failures print a JSON object on stdout.
"""

from __future__ import annotations

import argparse
import inspect
import json
import os
import platform
import subprocess
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from impactlab import __version__
from impactlab.config import load_config
from impactlab.exceptions import ConfigError, ImpactLabError
from impactlab.experiments import run_experiment
from impactlab.impact_curve import IMPACT_REGISTRY
from impactlab.io import config_hash, embedded_hash, file_sha256, write_json
from impactlab.market_model import CLAIM_REGISTRY, COEFFICIENT_REGISTRY

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4

MANIFEST = "manifest.json"


def version_string() -> str:
    """``git describe``-style version, falling back to the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty", "--long"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        out = ""
    if not out:
        return __version__
    # without tags describe prints only the abbreviated hash
    return out if "-g" in out else f"{__version__}-0-g{out}"


def _fail(code: int, kind: str, message: str, **extra: Any) -> int:
    print(json.dumps({"status": "error", "error": kind, "exit_code": code, "message": message, **extra}, sort_keys=True))
    return code


# -- run --------------------------------------------------------------------------------

def _out_dir(args: argparse.Namespace, config: dict[str, Any]) -> Path:
    if args.out:
        return Path(args.out)
    if "output" in config:
        return Path(config["output"])
    return Path("runs") / f"{config['experiment']}-{config_hash(config)[:12]}"


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        details = getattr(exc, "details", [])
        missing = sorted({m for d in details for m in d.get("missing", [])})
        return _fail(EXIT_CONFIG, "config", str(exc), details=details, missing=missing)
    except OSError as exc:
        return _fail(EXIT_IO, "io", f"cannot read config: {exc}")

    out = _out_dir(args, config)
    threads = args.threads if args.threads else (os.cpu_count() or 1)
    started = time.perf_counter()
    try:
        result = run_experiment(config, out, threads=threads)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), details=getattr(exc, "details", []))
    except (ImpactLabError, FloatingPointError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical", f"{type(exc).__name__}: {exc}")
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    wall = time.perf_counter() - started

    digest = config_hash(config)
    manifest = {
        "experiment": result.kind,
        "config": config,
        "config_sha256": digest,
        "seed": config["seed"],
        "threads": threads,
        "wall_time_seconds": wall,
        "version": version_string(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "artifacts": {p.name: file_sha256(p) for p in result.artifacts},
        "summary": result.summary,
    }
    try:
        write_json(out / MANIFEST, manifest)
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    print(json.dumps({"status": "ok", "out": str(out), "artifacts": sorted(manifest["artifacts"])}, sort_keys=True))
    return EXIT_OK


# -- registry -----------------------------------------------------------------------------

def _parameters(factory) -> str:
    parts = []
    for name, p in inspect.signature(factory).parameters.items():
        parts.append(name if p.default is inspect.Parameter.empty else f"{name}={p.default!r}")
    return ", ".join(parts)


def registry_listing() -> str:
    lines = []
    for title, registry in (
        ("impact functions", IMPACT_REGISTRY),
        ("coefficient families", COEFFICIENT_REGISTRY),
        ("claims", CLAIM_REGISTRY),
    ):
        lines.append(f"{title}:")
        for name in sorted(registry):
            lines.append(f"  {name}({_parameters(registry[name])})")
    return "\n".join(lines)


def cmd_registry(args: argparse.Namespace) -> int:
    print(registry_listing())
    return EXIT_OK


# -- verify --------------------------------------------------------------------------------

def verify_manifest(path: str | Path) -> list[tuple[str, bool, str]]:
    """Check every artifact's digest and embedded config hash."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    digest = manifest["config_sha256"]
    checks = [("config", config_hash(manifest["config"]) == digest, "config echo hashes to config_sha256")]
    for name, expected in sorted(manifest["artifacts"].items()):
        artifact = path.parent / name
        if not artifact.is_file():
            checks.append((name, False, "missing"))
            continue
        if file_sha256(artifact) != expected:
            checks.append((name, False, "file sha256 differs"))
        elif embedded_hash(artifact) != digest:
            checks.append((name, False, "embedded config hash differs"))
        else:
            checks.append((name, True, "ok"))
    return checks


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        checks = verify_manifest(args.manifest)
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        return _fail(EXIT_CONFIG, "manifest", f"malformed manifest: {exc}")
    for name, ok, why in checks:
        print(f"{'OK ' if ok else 'BAD'} {name}: {why}")
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_MISMATCH


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="impactlab", description="Price-impact hedging experiments.")
    parser.add_argument("--version", action="version", version=f"impactlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config", help="experiment config (JSON)")
    run.add_argument("--out", help="output directory (overrides the config's 'output')")
    run.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    run.set_defaults(func=cmd_run)

    reg = sub.add_parser("registry", help="list impact functions, coefficient families and claims")
    reg.set_defaults(func=cmd_registry)

    ver = sub.add_parser("verify", help="re-hash the artifacts listed in a manifest")
    ver.add_argument("manifest", help="manifest.json written by 'run'")
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        return _fail(EXIT_CONFIG, "config", "--threads must be positive")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
