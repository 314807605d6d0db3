"""Self-training with and without the stage-3 consistency term, on one pipeline root.

    python3 scripts/consistency_study.py --root runs/acceptance --config configs/acceptance.json

Needs ``data/`` and ``diffusion/`` under the root (run make-data and
train-diffusion first). For each classifier seed and each noise scale it
trains the perturbation-on cells: supervised on provisional labels, AMST with
the SoftMatch ceiling at 1 and AMST with the ceiling at 0.
"""
import argparse
import dataclasses
from pathlib import Path

import numpy as np

from dreamda.config import load_config
from dreamda.dataio import read_dataset
from dreamda.denoiser import load_denoiser
from dreamda.pipeline import expand, train_classifier


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--root", required=True)
    ap.add_argument("--config")
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 1.0, 2.0])
    args = ap.parse_args()

    cfg = load_config(args.config)
    root = Path(args.root)
    rx, ry, _ = read_dataset(root / "data/real")
    tx, ty, _ = read_dataset(root / "data/test")
    model = load_denoiser(root / "diffusion")
    arms = {
        "supervised": (False, cfg),
        "amst": (True, cfg),
        "amst-no-consistency": (True, dataclasses.replace(cfg, amst=dataclasses.replace(cfg.amst, lambda_max=0.0))),
    }
    print(f"{'sigma':>5s} " + " ".join(f"{k:>20s}" for k in arms) + "   precision  acceptance")
    for sigma in args.sigmas:
        acc = {k: [] for k in arms}
        prec, rate = [], []
        for seed in cfg.eval.seeds:
            imgs, labs, _ = expand(model, cfg, rx, ry, cfg.perturb.site, sigma, cfg.perturb.master_seed + seed)
            for name, (amst_on, c) in arms.items():
                _, rep = train_classifier(c, (rx, ry), (imgs, labs), amst_on, seed, (tx, ty),
                                          synth_truth=np.asarray(labs, dtype=np.int64))
                acc[name].append(rep["final_acc"])
                if name == "amst":
                    prec.append(rep.get("pseudo_precision", float("nan")))
                    rate.append(rep["acceptance_rate"])
        print(f"{sigma:5.1f} " + " ".join(f"{np.mean(v):20.4f}" for v in acc.values())
              + f"   {np.mean(prec):9.3f}  {np.mean(rate):10.3f}")


if __name__ == "__main__":
    main()
