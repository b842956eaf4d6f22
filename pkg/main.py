"""
unitempo command-line entry point.

    python main.py run --config configs/cavity_quench.toml
    python main.py sweep --config configs/cavity_dt_sweep.toml --axis dt --values 0.08 0.04 0.02
    python main.py inspect-kernel --config configs/cavity_quench.toml

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
"""
from __future__ import annotations

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
