"""Ablation table on the noisy synthetic benchmark (landmark noise 2 px).

One synthetic sequence, registration and bake are shared; each variant re-runs tracking
and evaluation. Prints MPJPE / PVE / Accel per variant and writes ablation.csv.

    python3 scripts/ablation.py --root runs/ablation --iterations 1000
"""

import argparse
import csv
import json
import logging
import shutil
from pathlib import Path

from meshmotion.cli import main
from meshmotion.metrics import EvalReport

VARIANTS = {
    "full": [],
    "no temporal": ["--disable", "temporal"],
    "direct parameters": ["--set", 'track.parameterization="direct"'],
    "no pose prior": ["--disable", "pose_prior"],
    "no bending": ["--disable", "bending"],
    "no silhouette": ["--disable", "silhouette"],
    "no feature": ["--disable", "feature"],
}


def _check(code: int, what: str) -> None:
    if code:
        raise SystemExit(f"{what} failed with exit code {code}")


def run(root: Path, iterations: int, noise_px: float, variants: list[str]) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    conf = root / "config.json"
    conf.write_text(json.dumps({
        "paths": {"data": str(root / "data"), "output": str(root / "shared")},
        "synth": {"noise": {"landmark_px": noise_px}},
        "track": {"iterations": iterations},
    }))  # fmt: skip
    for step in ("synth", "register", "bake"):
        _check(main([step, "--config", str(conf)]), step)
    reports = {}
    for name in variants:
        out = root / name.replace(" ", "_")
        if out.exists():
            shutil.rmtree(out)
        shutil.copytree(root / "shared", out, ignore=shutil.ignore_patterns("track", "eval"))
        over = ["--set", f'paths.output="{out}"']
        _check(main(["track", "--config", str(conf), *over, *VARIANTS[name]]), f"track ({name})")
        _check(main(["evaluate", "--config", str(conf), *over, "--set", 'alignment="none"']), f"evaluate ({name})")
        reports[name] = EvalReport.from_json(out / "eval" / "report.json")
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "mpjpe", "pve", "accel"])
        for name, r in reports.items():
            w.writerow([name, r.mpjpe, r.pve, r.accel])
    base = reports.get("full")
    for name, r in reports.items():
        rel = f"  Accel x{r.accel / base.accel:.2f}" if base else ""
        print(f"{name:18s} MPJPE {r.mpjpe:.4f}  PVE {r.pve:.4f}  Accel {r.accel:.3e}{rel}")
    return reports


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--noise-px", type=float, default=2.0)
    ap.add_argument("--variants", nargs="+", default=["full", "no temporal", "direct parameters", "no pose prior"], choices=list(VARIANTS))
    args = ap.parse_args()
    run(args.root, args.iterations, args.noise_px, args.variants)
