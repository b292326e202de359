#!/usr/bin/env python3
"""
Constrained backpropagation command line

Runs the skill's harness from the repository root:

    python main.py train --config skills/constrained-backprop/configs/moons-ternary.cfg
"""

import sys
from pathlib import Path

from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).resolve().parent / "skills" / "constrained-backprop" / "scripts"))

load_dotenv()

from harness import cli  # noqa: E402


if __name__ == "__main__":
    sys.exit(cli(sys.argv[1:]))
