"""Run the acceptance suite and print one line per criterion.

    python3 scripts/run_acceptance.py            # all nine criteria (~40 min on one core)
    python3 scripts/run_acceptance.py -k "not 7" # skip the shapes run
"""
import sys
from pathlib import Path

import pytest

if __name__ == "__main__":
    root = Path(__file__).resolve().parent.parent
    sys.exit(pytest.main([str(root / "tests" / "test_acceptance.py"), "-q", "-p", "no:cacheprovider", *sys.argv[1:]]))
