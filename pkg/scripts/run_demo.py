"""Run every CLI command over the shipped demo corpus in scripted mode.

    python3 scripts/run_demo.py [--out /tmp/dsrecon-demo]
"""

from __future__ import annotations

import argparse
import sys
from importlib import resources

from dsrecon.cli import main as cli

STEPS = (
    ["curate"],
    ["segment"],
    ["build-hybrid"],
    ["replay"],
    ["reconcile", "--isolated"],
    ["reconcile", "--pipeline"],
    ["evaluate"],
    ["report"],
)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--out", default="dsrecon-demo-out")
    ap.add_argument("--config", default=str(resources.files("dsrecon") / "data/demo/config.json"))
    args = ap.parse_args()
    for step in STEPS:
        code = cli([*step, "--config", args.config, "--out", args.out])
        if code:
            print(f"{' '.join(step)} failed with exit code {code}", file=sys.stderr)
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
