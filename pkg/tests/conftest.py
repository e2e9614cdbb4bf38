import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coevolve.driver import config_from_dict, run  # noqa: E402
from helpers import CRITERIA  # noqa: E402

DESK_SEEDS = (1, 2, 3, 4, 5)


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Full desk-preset runs (T=3, k=10) for seeds 1..5, shared by the end-to-end checks."""
    root = tmp_path_factory.mktemp("desk")
    dirs = {}
    t0 = time.monotonic()
    for seed in DESK_SEEDS:
        cfg = config_from_dict({"seed": seed, "iterations": 3, "samples_k": 10}, "desk")
        run(cfg, root / f"seed{seed}")
        dirs[seed] = root / f"seed{seed}"
    return {"dirs": dirs, "seconds": time.monotonic() - t0, "root": root}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")
