"""Run every bundled config and summarize the checks."""

import argparse
import sys
from pathlib import Path

from opdefect.cli import main

ROOT = Path(__file__).resolve().parents[1]


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--configs", type=Path, default=ROOT / "configs")
    ap.add_argument("--out", type=Path, default=Path("out"))
    ap.add_argument("--trials", type=int, default=None, help="override Monte Carlo trials")
    return ap.parse_args(argv)


def run_all(argv=None) -> int:
    args = parse_args(argv)
    failed = []
    for cfg in sorted(args.configs.glob("*.ini")):
        print(f"== {cfg.stem}")
        cmd = ["run", "--config", str(cfg), "--out", str(args.out / cfg.stem)]
        if args.trials is not None:
            cmd += ["--trials", str(args.trials)]
        if main(cmd) != 0:
            failed.append(cfg.stem)
    print("all configs passed" if not failed else f"failed: {', '.join(failed)}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(run_all())
