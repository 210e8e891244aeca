"""Run the acceptance gate and exit nonzero if any criterion fails.

    python scripts/run_acceptance.py            # all 13 criteria
    python scripts/run_acceptance.py -k "c04"   # extra args go to pytest
"""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    sys.exit(pytest.main([str(ROOT / "tests" / "test_acceptance.py"), "-q", *sys.argv[1:]]))
