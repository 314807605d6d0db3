"""End-to-end commands: data, denoiser training, generation, self-training and ablations.

Each command reads and writes fixed paths below an output root and leaves a
``run.json`` manifest with the config hash, seeds and git-style content
hashes of its inputs and outputs. Manifests hold no timestamps, absolute
paths or worker counts, so re-running a command reproduces its directory
byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .amst import (
    AMSTConfig,
    ClassifierConfig,
    extract_features,
    init_classifier,
    load_classifier,
    main_accuracy,
    run_amst,
    save_classifier,
    train_stage1,
    train_supervised,
)
from .config import RunConfig
from .dataio import (
    ShapeSetSpec,
    read_dataset,
    spec_dict,
    synth_shapes,
    write_dataset,
)
from .denoiser import Denoiser, DenoiserConfig, init_denoiser, load_denoiser, save_denoiser
from .metrics import frechet_features, mmd2
from .perturb import invert_seeds, mean_pairwise_distance, perturb_study
from .sampler import DiffusionTrainConfig, ddim_sample, reconstruct, train_diffusion
from .schedule import make_grid, make_schedule

log = logging.getLogger(__name__)

COMMANDS = ("make-data", "train-diffusion", "reconstruct", "generate", "perturb-study",
            "train-amst", "evaluate", "ablate")

# inputs and outputs of every command, relative to the output root
PATHS = {
    "make-data": ((), ("data",)),
    "train-diffusion": (("data/corpus",), ("diffusion",)),
    "reconstruct": (("data/real", "diffusion"), ("reconstruct",)),
    "generate": (("data/real", "diffusion"), ("generate",)),
    "perturb-study": (("data/real", "data/test", "diffusion"), ("perturb-study",)),
    "train-amst": (("data/real", "data/test", "generate"), ("amst",)),
    "evaluate": (("data/real", "data/test", "generate", "diffusion", "amst"), ("evaluate",)),
    "ablate": (("data/real", "data/test", "diffusion"), ("ablate",)),
}

STUDY_SITES = ("bottleneck", "latent_x0", "latent_xT")


class DataError(RuntimeError):
    """Missing or unreadable input artifact."""


# -- content hashes and manifests ------------------------------------------------

def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def tree_hash(path: Path) -> str:
    """Blob hash for a file; for a directory, a hash over sorted (relative path, blob hash) lines."""
    path = Path(path)
    if path.is_file():
        return git_blob_hash(path.read_bytes())
    lines = [f"{p.relative_to(path).as_posix()} {git_blob_hash(p.read_bytes())}"
             for p in sorted(path.rglob("*")) if p.is_file() and p.name != "run.json"]
    return git_blob_hash("\n".join(lines).encode())


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _round(obj, digits: int = 6):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _round(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v, digits) for v in obj]
    return obj


@dataclass
class Context:
    cfg: RunConfig
    root: Path
    workers: int = 1

    def path(self, rel: str) -> Path:
        return self.root / rel

    def require(self, command: str) -> None:
        """Fail before any compute when a declared input is missing."""
        for rel in PATHS[command][0]:
            p = self.path(rel)
            if not p.exists() or (p.is_dir() and not (p / "manifest.json").exists()
                                  and not (p / "run.json").exists()):
                raise DataError(f"{command}: missing input {p} (run the producing command first)")

    def manifest(self, command: str, seeds: dict, extra: dict | None = None) -> dict:
        ins, outs = PATHS[command]
        doc = {
            "command": command,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "seeds": seeds,
            "inputs": {rel: tree_hash(self.path(rel)) for rel in ins},
            "outputs": {rel: tree_hash(self.path(rel)) for rel in outs},
        }
        if extra:
            doc.update(extra)
        write_json(self.path(outs[0]) / "run.json", doc)
        return doc


# -- in-memory building blocks ---------------------------------------------------

def shape_spec(cfg: RunConfig, per_class: int, seed: int) -> ShapeSetSpec:
    d = cfg.data
    return ShapeSetSpec(per_class=per_class, resolution=d.resolution, position_jitter=d.position_jitter,
                        noise_sigma=d.noise, seed=seed)


def make_splits(cfg: RunConfig) -> dict[str, tuple[np.ndarray, np.ndarray, ShapeSetSpec]]:
    d = cfg.data
    out = {}
    for name, pc, seed in (("real", d.per_class, d.seed), ("test", d.test_per_class, d.test_seed),
                           ("corpus", d.corpus_per_class, d.corpus_seed)):
        spec = shape_spec(cfg, pc, seed)
        x, y = synth_shapes(spec)
        out[name] = (x, y, spec)
    return out


def denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    d = cfg.diffusion
    return DenoiserConfig(resolution=cfg.data.resolution, channels=tuple(d.channels),
                          num_classes=ShapeSetSpec.num_classes, parameterization=d.parameterization,
                          T=d.T, beta_min=d.beta_min, beta_max=d.beta_max)


def fit_denoiser(cfg: RunConfig, images: np.ndarray, labels: np.ndarray) -> tuple[Denoiser, list[float]]:
    d = cfg.diffusion
    model = init_denoiser(denoiser_config(cfg), np.random.default_rng(d.seed))
    tc = DiffusionTrainConfig(epochs=d.epochs, batch=d.batch, lr=d.lr, optimizer=d.optimizer, seed=d.seed)
    history = train_diffusion(model, images, labels.astype(np.int64), schedule(cfg), tc)
    return model, history


def schedule(cfg: RunConfig):
    d = cfg.diffusion
    return make_schedule(d.T, d.beta_min, d.beta_max)


def amst_config(cfg: RunConfig) -> AMSTConfig:
    a = cfg.amst
    return AMSTConfig(lam=a.lam, tau=a.tau, K=a.K, epochs_stage1=a.epochs_stage1,
                      epochs_stage3=a.epochs_stage3, batch=a.batch, lr=a.lr, optimizer=a.optimizer,
                      augment_labeled=a.augment_labeled, lambda_max=a.lambda_max)


def expand(model: Denoiser, cfg: RunConfig, x, y, site: str, sigma_h: float, master_seed: int,
           workers: int = 1, n_variants: int | None = None, x_T=None):
    """Variant set for one site and noise scale: (images, provisional labels, seed indices)."""
    grid = make_grid(cfg.diffusion.T, cfg.diffusion.ddim_steps)
    n = cfg.perturb.n_variants if n_variants is None else n_variants
    return perturb_study(model, x, y, site, sigma_h, schedule(cfg), master_seed, n_variants=n,
                         grid=grid, workers=workers, x_T=x_T)


def train_classifier(cfg: RunConfig, real, synth, amst_on: bool, seed: int, test,
                     synth_truth=None) -> tuple[object, dict]:
    """Downstream classifier on real + synthetic data, with or without AMST.

    Without AMST the main head is trained with plain cross entropy on the
    union, taking the provisional (seed) labels at face value, for the same
    total number of epochs.
    """
    rx, ry = real[0], np.asarray(real[1], dtype=np.int64)
    sx, sy = synth
    tx, ty = test[0], np.asarray(test[1], dtype=np.int64)
    acfg = amst_config(cfg)
    rng = np.random.default_rng(seed)
    model = init_classifier(ClassifierConfig(resolution=cfg.data.resolution), rng=seed)
    if amst_on:
        _, _, report = run_amst(model, rx, ry, sx, acfg, rng, synth_truth=synth_truth, eval_set=(tx, ty))
    else:
        x = np.concatenate([rx, sx]) if len(sx) else rx
        y = np.concatenate([ry, np.asarray(sy, dtype=np.int64)]) if len(sx) else ry
        train_supervised(model, x, y, acfg.epochs_stage1 + acfg.epochs_stage3, acfg, rng)
        report = {"final_acc": main_accuracy(model, tx, ty), "n_synthetic": int(len(sx))}
    return model, report


def unconditional_samples(model: Denoiser, cfg: RunConfig, n: int, seed: int) -> np.ndarray:
    """DDIM samples from x_T ~ N(0, I) with uniformly drawn class ids."""
    rng = np.random.default_rng(seed)
    c = model.config
    x_T = rng.standard_normal((n, c.in_channels, c.resolution, c.resolution))
    cond = rng.integers(0, c.num_classes, size=n)
    grid = make_grid(cfg.diffusion.T, cfg.diffusion.ddim_steps)
    out = []
    for s in range(0, n, 64):
        x, _ = ddim_sample(model, x_T[s:s + 64], grid, cond[s:s + 64], schedule(cfg), keep_trajectory=False)
        out.append(np.clip(x, -1.0, 1.0))
    return np.concatenate(out).astype(np.float32)


def diversity(images: np.ndarray, seeds: np.ndarray) -> float:
    """Mean over seeds of the mean pairwise L2 distance among that seed's variants."""
    return float(np.mean([mean_pairwise_distance(images[seeds == s]) for s in np.unique(seeds)]))


def feature_extractor(cfg: RunConfig, real, seed: int):
    """Frozen stage-1 backbone (trained on the real images only) used as the desk-FID embedding."""
    model = init_classifier(ClassifierConfig(resolution=cfg.data.resolution), rng=seed)
    train_stage1(model, real[0], np.asarray(real[1], dtype=np.int64), amst_config(cfg), np.random.default_rng(seed))
    return lambda x: extract_features(model, x)


def distribution_gap(reference: np.ndarray, candidate: np.ndarray, features=None) -> dict:
    """Frechet distance and MMD between two image sets in the embedding given by ``features``."""
    if features is None:
        a, b = reference.reshape(len(reference), -1), candidate.reshape(len(candidate), -1)
    else:
        a, b = features(reference), features(candidate)
    return {"frechet": frechet_features(a, b), "mmd2": mmd2(a, b)}


# -- commands --------------------------------------------------------------------

def _load(ctx: Context, rel: str):
    try:
        x, y, manifest = read_dataset(ctx.path(rel))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset {ctx.path(rel)}: {exc}") from exc
    return x, y, manifest


def _load_denoiser(ctx: Context) -> Denoiser:
    try:
        return load_denoiser(ctx.path("diffusion"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load denoiser from {ctx.path('diffusion')}: {exc}") from exc


def cmd_make_data(ctx: Context) -> dict:
    splits = make_splits(ctx.cfg)
    for name, (x, y, spec) in splits.items():
        write_dataset(ctx.path(f"data/{name}"), f"shapeset-{name}", x, y, extra={"spec": spec_dict(spec)})
    seeds = {name: spec.seed for name, (_, _, spec) in splits.items()}
    return ctx.manifest("make-data", seeds, {"sizes": {k: int(len(v[0])) for k, v in splits.items()}})


def cmd_train_diffusion(ctx: Context) -> dict:
    x, y, _ = _load(ctx, "data/corpus")
    model, history = fit_denoiser(ctx.cfg, x, y)
    save_denoiser(model, ctx.path("diffusion"))
    write_json(ctx.path("diffusion/history.json"), _round(history))
    return ctx.manifest("train-diffusion", {"diffusion": ctx.cfg.diffusion.seed},
                        {"final_loss": round(float(np.mean(history[-10:])), 6) if history else None})


def cmd_reconstruct(ctx: Context) -> dict:
    x, y, _ = _load(ctx, "data/real")
    model = _load_denoiser(ctx)
    grid = make_grid(ctx.cfg.diffusion.T, ctx.cfg.diffusion.recon_steps)
    x_hat = reconstruct(model, x, grid, y.astype(np.int64), schedule(ctx.cfg))
    err = np.abs(x_hat - x).reshape(len(x), -1).mean(axis=1)
    write_dataset(ctx.path("reconstruct"), "reconstruction", np.clip(x_hat, -1.0, 1.0), y,
                  extra={"steps": ctx.cfg.diffusion.recon_steps})
    report = {"mean_abs_error": float(err.mean()), "frac_below_0.05": float((err < 0.05).mean()),
              "per_seed": err.tolist()}
    write_json(ctx.path("reconstruct/report.json"), _round(report))
    return ctx.manifest("reconstruct", {})


def cmd_generate(ctx: Context) -> dict:
    x, y, _ = _load(ctx, "data/real")
    model = _load_denoiser(ctx)
    p = ctx.cfg.perturb
    imgs, labs, seeds = expand(model, ctx.cfg, x, y, p.site, p.sigma_h, p.master_seed, ctx.workers)
    write_dataset(ctx.path("generate"), "variants", imgs, labs, label_file="provisional-labels.ddt",
                  extra={"site": p.site, "sigma_h": p.sigma_h, "master_seed": p.master_seed,
                         "grid": {"T": ctx.cfg.diffusion.T, "steps": ctx.cfg.diffusion.ddim_steps},
                         "seed_index": seeds.tolist(), "n_variants": p.n_variants})
    return ctx.manifest("generate", {"master_seed": p.master_seed})


def cmd_perturb_study(ctx: Context) -> dict:
    """Downstream accuracy for each perturbation site at the configured noise scale."""
    cfg = ctx.cfg
    rx, ry, _ = _load(ctx, "data/real")
    tx, ty, _ = _load(ctx, "data/test")
    model = _load_denoiser(ctx)
    grid = make_grid(cfg.diffusion.T, cfg.diffusion.ddim_steps)
    x_T = invert_seeds(model, rx, ry.astype(np.int64), grid, schedule(cfg), workers=ctx.workers)
    table = {}
    for site in STUDY_SITES:
        accs = []
        for seed in cfg.eval.seeds:
            imgs, labs, _ = expand(model, cfg, rx, ry, site, cfg.perturb.sigma_h,
                                   cfg.perturb.master_seed + seed, ctx.workers, x_T=x_T)
            if seed == cfg.eval.seeds[0]:
                write_dataset(ctx.path(f"perturb-study/{site}"), f"variants-{site}", imgs, labs,
                              label_file="provisional-labels.ddt")
            _, rep = train_classifier(cfg, (rx, ry), (imgs, labs), False, seed, (tx, ty))
            accs.append(rep["final_acc"])
        table[site] = {"acc": accs, "mean_acc": float(np.mean(accs))}
    write_json(ctx.path("perturb-study/report.json"), _round({"sigma_h": cfg.perturb.sigma_h, "sites": table}))
    return ctx.manifest("perturb-study", {"classifier": list(cfg.eval.seeds),
                                          "master_seed": cfg.perturb.master_seed})


def cmd_train_amst(ctx: Context) -> dict:
    cfg = ctx.cfg
    rx, ry, _ = _load(ctx, "data/real")
    tx, ty, _ = _load(ctx, "data/test")
    sx, sy, _ = _load(ctx, "generate")
    seed = cfg.eval.seeds[0]
    model, report = train_classifier(cfg, (rx, ry), (sx, sy), True, seed, (tx, ty),
                                     synth_truth=np.asarray(sy, dtype=np.int64))
    save_classifier(model, ctx.path("amst/classifier"))
    write_json(ctx.path("amst/report.json"), _round(report))
    return ctx.manifest("train-amst", {"classifier": seed})


def cmd_evaluate(ctx: Context) -> dict:
    cfg = ctx.cfg
    rx, ry, _ = _load(ctx, "data/real")
    tx, ty, _ = _load(ctx, "data/test")
    sx, _, _ = _load(ctx, "generate")
    model = _load_denoiser(ctx)
    try:
        clf = load_classifier(ctx.path("amst/classifier"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load classifier: {exc}") from exc
    uncond = unconditional_samples(model, cfg, cfg.eval.fid_samples, cfg.perturb.master_seed)
    feats = feature_extractor(cfg, (rx, ry), cfg.eval.seeds[0])
    report = {
        "accuracy": main_accuracy(clf, tx, ty.astype(np.int64)),
        "n_real": int(len(rx)),
        "n_synth": int(len(sx)),
        # the real split is the data being augmented; the test split is a larger
        # sample of the same distribution, reported alongside
        "variants_vs_real": distribution_gap(rx, sx, feats),
        "unconditional_vs_real": distribution_gap(rx, uncond, feats),
        "variants_vs_test": distribution_gap(tx, sx, feats),
        "unconditional_vs_test": distribution_gap(tx, uncond, feats),
        "pixel": {"variants_vs_real": distribution_gap(rx, sx),
                  "unconditional_vs_real": distribution_gap(rx, uncond),
                  "variants_vs_test": distribution_gap(tx, sx),
                  "unconditional_vs_test": distribution_gap(tx, uncond)},
    }
    report["desk_fid"] = report["variants_vs_real"]["frechet"]
    report["mmd2"] = report["variants_vs_real"]["mmd2"]
    write_json(ctx.path("evaluate/report.json"), _round(report))
    return ctx.manifest("evaluate", {"unconditional": cfg.perturb.master_seed,
                                     "feature_extractor": cfg.eval.seeds[0]})


ABLATION_CELLS = ((True, True), (True, False), (False, True), (False, False))


def cell_name(perturb_on: bool, amst_on: bool, seed: int) -> str:
    return f"perturb-{'on' if perturb_on else 'off'}_amst-{'on' if amst_on else 'off'}_seed-{seed}"


def run_ablation_cell(ctx: Context, model: Denoiser, real, test, perturb_on: bool, amst_on: bool,
                      seed: int, x_T=None) -> dict:
    """One cell of the perturbation x self-training grid; writes its synthetic set, classifier and report.

    With perturbation off the synthetic set is the seed reconstructions
    (noise scale 0), so both arms see the same number of images.
    """
    cfg = ctx.cfg
    sigma = cfg.perturb.sigma_h if perturb_on else 0.0
    imgs, labs, seeds = expand(model, cfg, real[0], real[1], cfg.perturb.site, sigma,
                               cfg.perturb.master_seed + seed, ctx.workers, x_T=x_T)
    cell = ctx.path(f"ablate/cells/{cell_name(perturb_on, amst_on, seed)}")
    write_dataset(cell / "synthetic", "variants", imgs, labs, label_file="provisional-labels.ddt",
                  extra={"sigma_h": sigma, "site": cfg.perturb.site,
                         "master_seed": cfg.perturb.master_seed + seed})
    clf, report = train_classifier(cfg, real, (imgs, labs), amst_on, seed, test,
                                   synth_truth=np.asarray(labs, dtype=np.int64))
    save_classifier(clf, cell / "classifier")
    report = _round(dict(report, perturb=perturb_on, amst=amst_on, seed=seed))
    write_json(cell / "report.json", report)
    return report


def sigma_sweep(ctx: Context, model: Denoiser, real, test, x_T=None) -> dict:
    """Mean pairwise variant distance for each noise scale in ``eval.sigma_sweep``.

    Seeds are the real images, topped up from the held-out split when the
    real set is smaller than ``eval.diversity_seeds``.
    """
    cfg = ctx.cfg
    n_seeds = cfg.eval.diversity_seeds
    x = np.concatenate([real[0], test[0]])[:n_seeds]
    y = np.concatenate([real[1], test[1]])[:n_seeds]
    if x_T is not None and len(x_T) >= n_seeds:
        x_T = x_T[:n_seeds]
    else:
        grid = make_grid(cfg.diffusion.T, cfg.diffusion.ddim_steps)
        x_T = invert_seeds(model, x, y.astype(np.int64), grid, schedule(cfg), workers=ctx.workers)
    out = {}
    for sigma in cfg.eval.sigma_sweep:
        imgs, _, seeds = expand(model, cfg, x, y, cfg.perturb.site, float(sigma), cfg.perturb.master_seed,
                                ctx.workers, n_variants=cfg.eval.diversity_variants, x_T=x_T)
        out[str(float(sigma))] = diversity(imgs, seeds)
    return out


def format_table(acc: dict) -> str:
    lines = ["| perturbation | AMST off | AMST on |", "|---|---|---|"]
    for p in (False, True):
        lines.append(f"| {'on' if p else 'off'} | {acc[(p, False)]:.4f} | {acc[(p, True)]:.4f} |")
    return "\n".join(lines) + "\n"


def cmd_ablate(ctx: Context) -> dict:
    cfg = ctx.cfg
    rx, ry, _ = _load(ctx, "data/real")
    tx, ty, _ = _load(ctx, "data/test")
    model = _load_denoiser(ctx)
    grid = make_grid(cfg.diffusion.T, cfg.diffusion.ddim_steps)
    x_T = invert_seeds(model, rx, ry.astype(np.int64), grid, schedule(cfg), workers=ctx.workers)
    per_cell: dict = {c: [] for c in ABLATION_CELLS}
    for seed in cfg.eval.seeds:
        for p, a in ABLATION_CELLS:
            rep = run_ablation_cell(ctx, model, (rx, ry), (tx, ty), p, a, seed, x_T=x_T)
            per_cell[(p, a)].append(rep["final_acc"])
    mean = {c: float(np.mean(v)) for c, v in per_cell.items()}
    sweep = sigma_sweep(ctx, model, (rx, ry), (tx, ty), x_T=x_T)
    table = {f"perturb-{'on' if p else 'off'}_amst-{'on' if a else 'off'}":
             {"acc": per_cell[(p, a)], "mean_acc": mean[(p, a)]} for p, a in ABLATION_CELLS}
    write_json(ctx.path("ablate/table.json"), _round(table))
    ctx.path("ablate/table.md").write_text(format_table(mean))
    write_json(ctx.path("ablate/sigma_sweep.json"), _round(sweep))
    return ctx.manifest("ablate", {"classifier": list(cfg.eval.seeds), "master_seed": cfg.perturb.master_seed})


HANDLERS = {
    "make-data": cmd_make_data,
    "train-diffusion": cmd_train_diffusion,
    "reconstruct": cmd_reconstruct,
    "generate": cmd_generate,
    "perturb-study": cmd_perturb_study,
    "train-amst": cmd_train_amst,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def run(command: str, cfg: RunConfig, root, workers: int = 1) -> dict:
    if command not in HANDLERS:
        raise ValueError(f"unknown command {command!r}; expected one of {COMMANDS}")
    ctx = Context(cfg, Path(root), workers)
    ctx.require(command)
    return HANDLERS[command](ctx)
