#!/usr/bin/env python3
"""
Test runner for stochcov.

    python run_tests.py                     # everything
    python run_tests.py fast                # skip tests marked slow
    python run_tests.py test_torus_cov.py   # one file or node id under tests/
"""

import subprocess
import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parent


def run_pytest(target: str = "tests/", fast: bool = False) -> int:
    if not target.startswith("tests/"):
        target = f"tests/{target}"
    args = [sys.executable, "-m", "pytest", target, "-v", "--tb=short", "--strict-markers", "--durations=10"]
    if fast:
        args += ["-m", "not slow"]
    print(f"🧪 {' '.join(args[2:])}")
    result = subprocess.run(args, cwd=PROJECT_ROOT, check=False)
    print("✅ All tests passed!" if result.returncode == 0 else f"❌ pytest exited with {result.returncode}")
    return result.returncode


if __name__ == "__main__":
    arg = sys.argv[1] if len(sys.argv) > 1 else None
    if arg == "fast":
        sys.exit(run_pytest(fast=True))
    sys.exit(run_pytest(arg) if arg else run_pytest())
