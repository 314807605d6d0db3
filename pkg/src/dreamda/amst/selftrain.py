"""Asymmetric multi-head self-training.

Stage 1 fits the four auxiliary heads on real data (weak views feed the
``w`` pair, strong views the ``s`` pair) with a cross-Gram orthogonality
penalty. Stage 2 moves synthetic images whose auxiliary heads agree and
whose MC-dropout variance is small into the labeled pool. Stage 3 trains
the backbone and main head on both pools.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..ndgrad import Tensor, check_finite, dropout_off, grad, no_grad, ops
from ..ndgrad.nn import cosine_lr, make_optimizer
from .augment import strong_aug, weak_aug
from .model import AUX_HEADS, MultiHeadModel, predict_logits

log = logging.getLogger(__name__)

REAL, SYNTHETIC = 0, 1


def _as_tensor(w) -> Tensor:
    return w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=np.float64))


def orthogonality_penalty(w1, w2) -> Tensor:
    """Entrywise L1 norm of ``w1.T @ w2``."""
    w1, w2 = _as_tensor(w1), _as_tensor(w2)
    if w1.shape != w2.shape:
        raise ValueError(f"orthogonality_penalty: shape mismatch {w1.shape} vs {w2.shape}")
    return ops.sum(ops.abs(ops.matmul(ops.transpose(w1), w2)))


def pretrain_loss(model: MultiHeadModel, x: np.ndarray, y: np.ndarray, lam: float,
                  rng: np.random.Generator, augment: bool = True) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if len(x) == 0:
        raise ValueError("pretrain_loss needs a nonempty batch")
    xw = weak_aug(x, rng) if augment else x
    xs = strong_aug(x, rng) if augment else x
    hw = model.drop(model.features(xw), rng)
    hs = model.drop(model.features(xs), rng)
    loss = (ops.cross_entropy(model.w1(hw), y) + ops.cross_entropy(model.w2(hw), y)
            + ops.cross_entropy(model.s1(hs), y) + ops.cross_entropy(model.s2(hs), y))
    if lam:
        pen = (orthogonality_penalty(model.w1.weight, model.w2.weight)
               + orthogonality_penalty(model.s1.weight, model.s2.weight))
        loss = loss + lam * pen
    return loss


def aux_probabilities(model: MultiHeadModel, feats: Tensor) -> np.ndarray:
    """Mean softmax over the four auxiliary heads."""
    probs = [ops.softmax(model.head(h)(feats)).data for h in AUX_HEADS]
    return np.mean(probs, axis=0)


def mc_uncertainty(model: MultiHeadModel, x: np.ndarray, K: int = 10, rng=None) -> np.ndarray:
    """Per-class variance ``[N, C]`` of the head-averaged probabilities over K dropout passes."""
    if K < 2:
        raise ValueError(f"MC dropout needs K >= 2 passes, got {K}")
    with no_grad():
        feats = model.features(x)
        passes = np.stack([aux_probabilities(model, model.drop(feats, rng)) for _ in range(K)])
    return passes.var(axis=0)


@dataclass
class LabelPools:
    """Labeled pool (real + accepted synthetic) and unlabeled synthetic pool.

    ``labeled_src`` / ``unlabeled_src`` index into the originating dataset
    (real or synthetic, by provenance) for bookkeeping.
    """
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    provenance: np.ndarray
    labeled_src: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_src: np.ndarray

    @classmethod
    def initial(cls, real_x, real_y, synth_x) -> "LabelPools":
        real_x = np.asarray(real_x, dtype=np.float32)
        synth_x = np.asarray(synth_x, dtype=np.float32).reshape((-1,) + real_x.shape[1:])
        return cls(real_x, np.asarray(real_y, dtype=np.int64), np.full(len(real_x), REAL),
                   np.arange(len(real_x)), synth_x, np.arange(len(synth_x)))

    @property
    def sizes(self) -> tuple[int, int]:
        return len(self.labeled_x), len(self.unlabeled_x)

    def accepted_synthetic(self) -> np.ndarray:
        return self.labeled_src[self.provenance == SYNTHETIC]


def aux_votes(model: MultiHeadModel, x: np.ndarray) -> np.ndarray:
    """Argmax of each auxiliary head, dropout off: ``[4, N]``."""
    return np.stack([predict_logits(model, x, h).argmax(axis=1) for h in AUX_HEADS])


def assign_pseudo_labels(model: MultiHeadModel, pools: LabelPools, tau: float = 0.01, K: int = 10,
                         rng=None, chunk: int = 256) -> LabelPools:
    """Move consistent and confident unlabeled images into the labeled pool."""
    x = pools.unlabeled_x
    if len(x) == 0:
        return copy.copy(pools)
    votes = aux_votes(model, x)
    u = np.concatenate([mc_uncertainty(model, x[s:s + chunk], K, rng) for s in range(0, len(x), chunk)])
    agree = (votes == votes[0]).all(axis=0)
    accept = agree & (u.max(axis=1) < tau)
    return LabelPools(
        labeled_x=np.concatenate([pools.labeled_x, x[accept]]),
        labeled_y=np.concatenate([pools.labeled_y, votes[0][accept]]),
        provenance=np.concatenate([pools.provenance, np.full(int(accept.sum()), SYNTHETIC)]),
        labeled_src=np.concatenate([pools.labeled_src, pools.unlabeled_src[accept]]),
        unlabeled_x=x[~accept],
        unlabeled_src=pools.unlabeled_src[~accept],
    )


@dataclass
class SoftMatchState:
    num_classes: int = 6
    momentum: float = 0.999
    lambda_max: float = 1.0
    mu_hat: float = field(default=None)
    var_hat: float = 1.0

    def __post_init__(self):
        if self.mu_hat is None:
            self.mu_hat = 1.0 / self.num_classes

    @property
    def sigma_hat(self) -> float:
        return math.sqrt(self.var_hat)

    def update(self, conf: np.ndarray):
        conf = np.asarray(conf, dtype=np.float64)
        if conf.size == 0:
            return
        m = self.momentum
        self.mu_hat = m * self.mu_hat + (1 - m) * float(conf.mean())
        var = float(conf.var(ddof=1)) if conf.size > 1 else 0.0
        self.var_hat = m * self.var_hat + (1 - m) * var


def consistency_weight(state: SoftMatchState, p_w, update: bool = False) -> np.ndarray:
    """Truncated-Gaussian weight of the max confidence of each probability row."""
    p = np.atleast_2d(np.asarray(p_w, dtype=np.float64))
    if (p < -1e-9).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("consistency_weight expects probability vectors")
    conf = p.max(axis=1)
    if update:
        state.update(conf)
    w = state.lambda_max * np.exp(-((conf - state.mu_hat) ** 2) / (2.0 * state.var_hat))
    w = np.where(conf >= state.mu_hat, state.lambda_max, w)
    return w if np.ndim(p_w) > 1 else w[0]


def stage3_loss(model: MultiHeadModel, labeled, unlabeled_x, state: SoftMatchState, rng,
                augment_labeled: bool = False, augment: bool = True) -> Tensor:
    """Supervised CE on the labeled batch plus weighted weak->strong consistency on the unlabeled one.

    Both terms are mean-reduced over their batch. The weak-view target is a
    constant (computed without gradient).
    """
    lx, ly = labeled if labeled is not None else (np.zeros((0,)), np.zeros((0,)))
    ux = unlabeled_x if unlabeled_x is not None else np.zeros((0,))
    if len(lx) == 0 and len(ux) == 0:
        raise ValueError("stage3_loss needs at least one nonempty batch")
    total = None
    if len(lx):
        xin = weak_aug(lx, rng) if augment_labeled else lx
        total = ops.cross_entropy(model.logits(xin, "main", rng), ly)
    if len(ux):
        xw = weak_aug(ux, rng) if augment else ux
        xs = strong_aug(ux, rng) if augment else ux
        with no_grad():
            pw = ops.softmax(model.logits(xw, "main", rng)).data
        target = pw.argmax(axis=1)
        w = consistency_weight(state, pw, update=True).astype(pw.dtype)
        per = ops.cross_entropy(model.logits(xs, "main", rng), target, reduction="none")
        lc = ops.mean(per * Tensor(w))
        total = lc if total is None else total + lc
    return total


@dataclass
class AMSTConfig:
    lam: float = 0.001
    tau: float = 0.01
    K: int = 10
    epochs_stage1: int = 30
    epochs_stage3: int = 30
    batch: int = 64
    lr: float = 2e-3
    optimizer: str = "adam"
    augment_labeled: bool = False
    # SoftMatch weight ceiling; 0 switches the consistency term off
    lambda_max: float = 1.0


def _run_epochs(params, loss_fn, n: int, epochs: int, batch: int, lr: float, opt_name: str,
                rng, tag: str) -> list[float]:
    opt = make_optimizer(opt_name, params, lr)
    steps = max(1, math.ceil(n / batch))
    total = epochs * steps
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            loss = loss_fn(order[s:s + batch], step)
            check_finite(loss, f"{tag} loss")
            grads = grad(loss, params)
            opt.lr = cosine_lr(lr, step, total)
            opt.step(grads)
            history.append(loss.item())
            step += 1
        log.debug("%s epoch %d loss %.4f", tag, epoch + 1, np.mean(history[-steps:]))
    return history


def train_stage1(model: MultiHeadModel, x: np.ndarray, y: np.ndarray, cfg: AMSTConfig, rng) -> list[float]:
    params = model.backbone.parameters() + model.head_parameters(AUX_HEADS)
    return _run_epochs(params, lambda idx, _: pretrain_loss(model, x[idx], y[idx], cfg.lam, rng),
                       len(x), cfg.epochs_stage1, cfg.batch, cfg.lr, cfg.optimizer, rng, "stage1")


def train_stage3(model: MultiHeadModel, pools: LabelPools, cfg: AMSTConfig, rng) -> list[float]:
    state = SoftMatchState(num_classes=model.config.num_classes, lambda_max=cfg.lambda_max)
    params = model.backbone.parameters() + model.head_parameters(["main"])
    ux = pools.unlabeled_x
    u_order = rng.permutation(len(ux)) if len(ux) else np.zeros(0, dtype=int)

    def loss_fn(idx, step):
        ub = None
        if len(ux):
            pos = (step * cfg.batch + np.arange(cfg.batch)) % len(ux)
            ub = ux[u_order[pos[: min(cfg.batch, len(ux))]]]
        return stage3_loss(model, (pools.labeled_x[idx], pools.labeled_y[idx]), ub, state, rng,
                           augment_labeled=cfg.augment_labeled)

    return _run_epochs(params, loss_fn, len(pools.labeled_x), cfg.epochs_stage3, cfg.batch, cfg.lr,
                       cfg.optimizer, rng, "stage3")


def train_supervised(model: MultiHeadModel, x: np.ndarray, y: np.ndarray, epochs: int, cfg: AMSTConfig,
                     rng) -> list[float]:
    """Plain cross-entropy training of backbone + main head (the no-self-training baseline)."""
    params = model.backbone.parameters() + model.head_parameters(["main"])
    y = np.asarray(y, dtype=np.int64)

    def loss_fn(idx, _):
        xb = weak_aug(x[idx], rng) if cfg.augment_labeled else x[idx]
        return ops.cross_entropy(model.logits(xb, "main", rng), y[idx])

    return _run_epochs(params, loss_fn, len(x), epochs, cfg.batch, cfg.lr, cfg.optimizer, rng, "supervised")


def ensemble_accuracy(model: MultiHeadModel, x, y) -> float:
    if len(x) == 0:
        raise ValueError("empty dataset")
    with no_grad(), dropout_off():
        probs = np.concatenate([aux_probabilities(model, model.features(x[s:s + 256]))
                                for s in range(0, len(x), 256)])
    return float((probs.argmax(1) == np.asarray(y)).mean())


def main_accuracy(model: MultiHeadModel, x, y) -> float:
    if len(x) == 0:
        raise ValueError("empty dataset")
    return float((predict_logits(model, x, "main").argmax(1) == np.asarray(y)).mean())


def run_amst(model: MultiHeadModel, real_x, real_y, synth_x, cfg: AMSTConfig, rng,
             synth_truth=None, eval_set=None):
    """All three stages. Returns (model, pools, report)."""
    real_x = np.asarray(real_x, dtype=np.float32)
    real_y = np.asarray(real_y, dtype=np.int64)
    synth_x = np.asarray(synth_x, dtype=np.float32).reshape((-1,) + real_x.shape[1:])
    report: dict = {}
    w0 = np.abs(model.w1.weight.data.T @ model.w2.weight.data).mean()
    train_stage1(model, real_x, real_y, cfg, rng)
    report["stage1_train_acc"] = ensemble_accuracy(model, real_x, real_y)
    report["orthogonality_init"] = float(w0)
    report["orthogonality_final"] = float(np.abs(model.w1.weight.data.T @ model.w2.weight.data).mean())
    if eval_set is not None:
        report["stage1_acc"] = ensemble_accuracy(model, *eval_set)

    pools = LabelPools.initial(real_x, real_y, synth_x)
    pools = assign_pseudo_labels(model, pools, cfg.tau, cfg.K, rng)
    accepted = pools.accepted_synthetic()
    report["pool_labeled"], report["pool_unlabeled"] = pools.sizes
    report["n_synthetic"] = int(len(synth_x))
    report["acceptance_rate"] = float(len(accepted) / len(synth_x)) if len(synth_x) else 0.0
    if synth_truth is not None and len(accepted):
        got = pools.labeled_y[pools.provenance == SYNTHETIC]
        report["pseudo_precision"] = float((got == np.asarray(synth_truth)[accepted]).mean())

    train_stage3(model, pools, cfg, rng)
    if eval_set is not None:
        report["final_acc"] = main_accuracy(model, *eval_set)
    log.info("amst report %s", report)
    return model, pools, report
