"""Run the full pipeline on a synthetic sequence and print the evaluation report.

    python3 scripts/run_pipeline.py --root runs/wave
    python3 scripts/run_pipeline.py --root runs/squat --set synth.script=\"squat\" --set synth.noise.landmark_px=2.0
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from meshmotion.cli import main

STEPS = ("synth", "register", "bake", "track", "evaluate")


def run(root: Path, overrides: list[str], seed: int) -> int:
    root.mkdir(parents=True, exist_ok=True)
    conf = root / "config.json"
    conf.write_text(json.dumps({"paths": {"data": str(root / "data"), "output": str(root / "out")}}))
    extra = [a for o in overrides for a in ("--set", o)] + ["--seed", str(seed)]
    for step in STEPS:
        t0 = time.perf_counter()
        code = main([step, "--config", str(conf), *extra])
        logging.info("%s finished with exit code %d in %.1f s", step, code, time.perf_counter() - t0)
        if code:
            return code
    return 0


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, default=Path("runs/wave"))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    sys.exit(run(args.root, args.set, args.seed))
