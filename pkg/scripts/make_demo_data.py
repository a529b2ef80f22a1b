#!/usr/bin/env python3
"""Generate the synthetic demo archive (images, manifest, strip, config).

Usage: python scripts/make_demo_data.py [dest_dir] [--seed N]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from marstag.fixtures import make_demo_dataset


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("dest", nargs="?", default="demo_data")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()
    paths = make_demo_dataset(args.dest, seed=args.seed)
    print(f"demo data written under {paths['root']}")
    print(f"config: {paths['config']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
