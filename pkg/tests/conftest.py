from __future__ import annotations

import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

REPO = Path(__file__).resolve().parents[1]
MNIST_DIR = Path(os.environ.get("OCTANE_MNIST_DIR", REPO / "data" / "mnist"))


@pytest.fixture(scope="session")
def mnist_dir():
    if not any(MNIST_DIR.glob("train-images-idx3-ubyte*")):
        pytest.skip(f"MNIST files not found in {MNIST_DIR} (run scripts/fetch_mnist.sh)")
    return MNIST_DIR


# acceptance summary, one line per criterion
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
