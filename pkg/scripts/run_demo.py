#!/usr/bin/env python3
"""Build the demo archive and drive the whole pipeline over it, then print
the headline metrics and a sample query.

Usage: python scripts/run_demo.py [workdir]
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from marstag.cli import main as cli_main
from marstag.fixtures import make_demo_dataset


def main() -> int:
    workdir = sys.argv[1] if len(sys.argv) > 1 else "demo_data"
    paths = make_demo_dataset(workdir, seed=7)
    cfg = str(paths["config"])
    rc = cli_main(["run", "-c", cfg])
    if rc != 0:
        return rc
    rc = cli_main(["report", "-c", cfg])
    if rc != 0:
        return rc

    print("\n--- metrics ---")
    print((paths["out_dir"] / "metrics.txt").read_text(), end="")
    print("--- crater query (confidence >= 0.95) ---")
    return cli_main(
        ["query", "-c", cfg, "crater", "--min-conf", "0.95",
         "--now", "2020-08-01T00:00:00Z"]
    )


if __name__ == "__main__":
    sys.exit(main())
