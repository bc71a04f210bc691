#!/usr/bin/env python3
"""
Launcher for CTC Lab from a source checkout.

Loads a local .env (CTCLAB_* settings) before the package reads its
settings, then hands the command line to ctc_lab.main.
"""
import sys
from pathlib import Path

# Add src directory to path
sys.path.insert(0, str(Path(__file__).parent / "src"))

from dotenv import load_dotenv


def main() -> int:
    load_dotenv()
    from ctc_lab.main import main as run

    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
