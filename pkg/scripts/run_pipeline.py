"""Run every pipeline command for one config and print the headline numbers.

    python3 scripts/run_pipeline.py --config configs/acceptance.json --out runs/acceptance

Commands whose outputs already exist under the output root are skipped unless
``--force`` is given, so an interrupted run picks up where it stopped.
"""
import argparse
import json
import logging
import time
from pathlib import Path

from dreamda.config import load_config
from dreamda.pipeline import COMMANDS, PATHS, run


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--commands", nargs="+", default=list(COMMANDS), choices=COMMANDS)
    ap.add_argument("--force", action="store_true", help="re-run commands whose outputs exist")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, args.overrides)
    root = Path(args.out)
    print(f"config hash {cfg.hash()} -> {root}")
    for command in args.commands:
        marker = root / PATHS[command][1][0]
        if not args.force and (marker / "run.json").exists():
            print(f"{command:16s} skipped (outputs exist)")
            continue
        start = time.time()
        run(command, cfg, root, workers=args.workers)
        print(f"{command:16s} {time.time() - start:7.1f}s")

    if (root / "ablate/table.md").exists():
        print("\n" + (root / "ablate/table.md").read_text())
        sweep = json.loads((root / "ablate/sigma_sweep.json").read_text())
        print("diversity by sigma: " + ", ".join(f"{k}: {v:.3f}" for k, v in sweep.items()))
    if (root / "perturb-study/report.json").exists():
        sites = json.loads((root / "perturb-study/report.json").read_text())["sites"]
        print("accuracy by site: " + ", ".join(f"{k}: {v['mean_acc']:.4f}" for k, v in sites.items()))
    if (root / "evaluate/report.json").exists():
        ev = json.loads((root / "evaluate/report.json").read_text())
        for ref in ("real", "test"):
            print(f"frechet vs {ref}: variants {ev[f'variants_vs_{ref}']['frechet']:.3f}, "
                  f"unconditional {ev[f'unconditional_vs_{ref}']['frechet']:.3f}")


if __name__ == "__main__":
    main()
