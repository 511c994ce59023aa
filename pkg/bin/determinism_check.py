#!/usr/bin/env python3
"""Run ``simulate`` at several thread counts and compare artifact digests.

Exits 0 when every artifact is byte-identical across thread counts, 1 otherwise.
"""
import argparse
import hashlib
import sys
import tempfile
from pathlib import Path
from typing import Dict, List

from volterra_lab.commands import cmd_simulate, run_command
from volterra_lab.config import ConfigError, load_config


def digest_dir(path: Path) -> Dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(path.iterdir()) if p.is_file()}


def run_at(config_path: str, seed: int, threads: int, out: Path) -> Dict[str, str]:
    config = load_config(config_path).with_overrides(seed=seed, threads=threads)
    response = run_command("simulate", cmd_simulate, config, out)
    if response["status"] == "error":
        raise RuntimeError(response["message"])
    return digest_dir(out)


def main() -> int:
    parser = argparse.ArgumentParser(description="Check that simulate output does not depend on the thread count")
    parser.add_argument("--config", default=None, help="JSON run document (defaults to the desk configuration)")
    parser.add_argument("--seed", type=int, default=42, help="Master seed")
    parser.add_argument(
        "--threads",
        type=int,
        nargs="+",
        default=[1, 8],
        help="Thread counts to compare",
    )
    ns: argparse.Namespace = parser.parse_args()

    try:
        with tempfile.TemporaryDirectory() as tmp:
            digests: List[Dict[str, str]] = []
            for threads in ns.threads:
                print(f"Running simulate with {threads} thread(s)...")
                digests.append(run_at(ns.config, ns.seed, threads, Path(tmp) / f"threads-{threads}"))
    except ConfigError as e:
        print(f"Error: {e}")
        return 2

    reference = digests[0]
    mismatched = False
    for threads, current in zip(ns.threads[1:], digests[1:]):
        for name in sorted(set(reference) | set(current)):
            if reference.get(name) != current.get(name):
                print(f"MISMATCH {name}: threads={ns.threads[0]} vs threads={threads}")
                mismatched = True
    if not mismatched:
        print(f"All {len(reference)} artifacts identical across thread counts {ns.threads}.")
    return 1 if mismatched else 0


if __name__ == "__main__":
    sys.exit(main())
