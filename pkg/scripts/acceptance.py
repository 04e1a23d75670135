"""Run the acceptance suite and show its one-line verdicts."""

import sys
from pathlib import Path

import pytest

if __name__ == "__main__":
    suite = Path(__file__).resolve().parents[1] / "tests" / "test_acceptance.py"
    sys.exit(pytest.main([str(suite), "-q", *sys.argv[1:]]))
