"""entk-extract: compute an eNTK kernel file from feature arrays.

Usage:
    entk-extract --config extraction.json --train-features X.npy \
                 --test-features Y.npy --out kernel.entk
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .config import ConfigError, ExtractionConfig
from .extract import extract


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="entk-extract", description=__doc__)
    parser.add_argument("--config", required=True, help="extraction config JSON")
    parser.add_argument("--train-features", required=True, help=".npy array (n, d)")
    parser.add_argument("--test-features", required=True, help=".npy array (m, d)")
    parser.add_argument("--out", required=True, help="kernel file to write")
    args = parser.parse_args(argv)
    try:
        config = ExtractionConfig.from_json(args.config)
        summary = extract(
            config,
            np.load(args.train_features),
            np.load(args.test_features),
            args.out,
        )
    except (ConfigError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
