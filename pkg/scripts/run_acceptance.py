"""Run only the acceptance suite and print its per-criterion summary.

    python3 scripts/run_acceptance.py            # all criteria
    python3 scripts/run_acceptance.py -k crash   # pass extra pytest args
"""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    args = ["-m", "acceptance", "-q", "-p", "no:cacheprovider", str(ROOT / "tests" / "test_acceptance.py")]
    sys.exit(pytest.main(args + sys.argv[1:]))
