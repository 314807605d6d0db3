"""Shared conv backbone with four auxiliary heads and one main head."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..denoiser import to_nhwc
from ..ndgrad import Tensor, dropout_off, no_grad, ops
from ..ndgrad.nn import Conv, Linear, Module, Norm

AUX_HEADS = ("w1", "w2", "s1", "s2")
HEADS = AUX_HEADS + ("main",)


@dataclass(frozen=True)
class ClassifierConfig:
    resolution: int = 16
    in_channels: int = 1
    widths: tuple = (16, 32, 64, 64)
    num_classes: int = 6
    dropout: float = 0.1

    def descriptor(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["kind"] = "multihead-classifier"
        return d

    @classmethod
    def from_descriptor(cls, d: dict) -> "ClassifierConfig":
        d = {k: v for k, v in d.items() if k != "kind"}
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class Backbone(Module):
    """Four conv blocks; pooling after the first two; global average at the end."""

    def __init__(self, cfg: ClassifierConfig, rng):
        w1, w2, w3, w4 = cfg.widths
        self.conv1 = Conv(cfg.in_channels, w1, rng)
        self.norm1 = Norm(w1)
        self.conv2 = Conv(w1, w2, rng)
        self.norm2 = Norm(w2)
        self.conv3 = Conv(w2, w3, rng)
        self.norm3 = Norm(w3)
        self.conv4 = Conv(w3, w4, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.avg_pool2(ops.silu(self.norm1(self.conv1(x))))
        h = ops.avg_pool2(ops.silu(self.norm2(self.conv2(h))))
        h = ops.silu(self.norm3(self.conv3(h)))
        h = ops.silu(self.conv4(h))
        return ops.mean(h, axis=(1, 2))


class MultiHeadModel(Module):
    def __init__(self, cfg: ClassifierConfig, rng: np.random.Generator):
        self.config = cfg
        self.backbone = Backbone(cfg, rng)
        feat = cfg.widths[-1]
        self.w1 = Linear(feat, cfg.num_classes, rng)
        self.w2 = Linear(feat, cfg.num_classes, rng)
        self.s1 = Linear(feat, cfg.num_classes, rng)
        self.s2 = Linear(feat, cfg.num_classes, rng)
        self.main = Linear(feat, cfg.num_classes, rng)

    @property
    def feature_dim(self) -> int:
        return self.config.widths[-1]

    def head(self, name: str) -> Linear:
        if name not in HEADS:
            raise KeyError(name)
        return getattr(self, name)

    def head_parameters(self, names) -> list[Tensor]:
        return [p for n in names for p in (self.head(n).weight, self.head(n).bias)]

    def features(self, x: np.ndarray) -> Tensor:
        """Penultimate features for an NCHW batch (no dropout)."""
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != (self.config.in_channels, self.config.resolution,
                                           self.config.resolution):
            raise ValueError(f"classifier input shape {x.shape} does not match configuration")
        return self.backbone(Tensor(to_nhwc(x).astype(self.backbone.conv1.weight.dtype, copy=False)))

    def drop(self, feats: Tensor, rng) -> Tensor:
        return ops.dropout(feats, self.config.dropout, rng)

    def logits(self, x: np.ndarray, head: str = "main", rng=None) -> Tensor:
        return self.head(head)(self.drop(self.features(x), rng))


def init_classifier(cfg: ClassifierConfig | None = None, rng=None) -> MultiHeadModel:
    cfg = cfg or ClassifierConfig()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return MultiHeadModel(cfg, rng)


def predict_logits(model: MultiHeadModel, x: np.ndarray, head: str = "main", batch: int = 256) -> np.ndarray:
    """Deterministic logits (dropout off) in fixed-size chunks."""
    out = []
    with no_grad(), dropout_off():
        for s in range(0, len(x), batch):
            out.append(model.logits(x[s:s + batch], head).data)
    if not out:
        return np.zeros((0, model.config.num_classes), dtype=np.float32)
    return np.concatenate(out)


def extract_features(model: MultiHeadModel, x: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(x), batch):
            out.append(model.features(x[s:s + batch]).data)
    return np.concatenate(out) if out else np.zeros((0, model.feature_dim), dtype=np.float32)


def save_classifier(model: MultiHeadModel, directory):
    from ..dataio import save_tensors
    return save_tensors(directory, model.state_dict(), model.config.descriptor())


def load_classifier(directory) -> MultiHeadModel:
    from ..dataio import load_tensors
    state, desc = load_tensors(directory)
    if desc is None or desc.get("kind") != "multihead-classifier":
        raise ValueError(f"{directory}: not a classifier checkpoint")
    model = MultiHeadModel(ClassifierConfig.from_descriptor(desc), np.random.default_rng(0))
    model.load_state_dict(state)
    return model
