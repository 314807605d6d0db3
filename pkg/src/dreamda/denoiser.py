"""Class-conditional U-Net noise predictor with an exposed bottleneck tap.

Layout: encoder stages at R, R/2, R/4 (each output kept as a skip), a
bottleneck block at R/4 whose output is the tapped feature ``h``, and a
decoder mirroring the encoder. Public helpers accept and return NCHW numpy
arrays; the network itself runs channels-last.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .ndgrad import Tensor, no_grad, ops
from .ndgrad.nn import Conv, Embedding, Linear, Module, Norm

ENCODER_SITES = ("enc1", "enc2", "enc3")
DECODER_SITES = ("dec3", "dec2", "dec1")


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 16
    in_channels: int = 1
    channels: tuple = (32, 64, 128)
    num_classes: int = 6
    time_dim: int = 64
    embed_dim: int = 64
    # "eps": the head output is the noise estimate. "v": the head predicts
    # v = sqrt(ab) eps - sqrt(1-ab) x0 and the noise estimate is recovered as
    # sqrt(ab) v + sqrt(1-ab) x_t, which needs the training schedule below.
    parameterization: str = "eps"
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def __post_init__(self):
        if self.parameterization not in ("eps", "v"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}; expected 'eps' or 'v'")

    def descriptor(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["kind"] = "unet-denoiser"
        return d

    @classmethod
    def from_descriptor(cls, d: dict) -> "DenoiserConfig":
        d = {k: v for k, v in d.items() if k != "kind"}
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class ResBlock(Module):
    def __init__(self, ch: int, emb_dim: int, rng):
        self.norm1 = Norm(ch)
        self.conv1 = Conv(ch, ch, rng)
        # the embedding modulates after norm2: an additive offset placed
        # before a per-channel norm would be normalized away
        self.emb_scale = Linear(emb_dim, ch, rng)
        self.emb_shift = Linear(emb_dim, ch, rng)
        self.norm2 = Norm(ch)
        self.conv2 = Conv(ch, ch, rng)

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(ops.silu(self.norm1(x)))
        shape = (emb.shape[0], 1, 1, -1)
        scale = ops.reshape(self.emb_scale(emb), shape)
        shift = ops.reshape(self.emb_shift(emb), shape)
        h = self.norm2(h) * (scale + 1.0) + shift
        h = self.conv2(ops.silu(h))
        return x + h


@dataclass
class Features:
    """Encoder output shared by every decoder pass."""
    h: Tensor
    skips: tuple
    emb: Tensor
    x: Tensor
    t: np.ndarray


class Denoiser(Module):
    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        if config.resolution % 4:
            raise ValueError(f"resolution must be divisible by 4, got {config.resolution}")
        if len(config.channels) != 3:
            raise ValueError("channels must list three widths")
        self.config = config
        c1, c2, c3 = config.channels
        e = config.embed_dim
        self.time1 = Linear(config.time_dim, e, rng)
        self.time2 = Linear(e, e, rng)
        self.classes = Embedding(config.num_classes, e, rng)
        self.conv_in = Conv(config.in_channels, c1, rng)
        self.enc1 = ResBlock(c1, e, rng)
        self.down1 = Conv(c1, c2, rng)
        self.enc2 = ResBlock(c2, e, rng)
        self.down2 = Conv(c2, c3, rng)
        self.enc3 = ResBlock(c3, e, rng)
        self.mid = ResBlock(c3, e, rng)
        self.merge3 = Conv(2 * c3, c3, rng)
        self.dec3 = ResBlock(c3, e, rng)
        self.up2 = Conv(c3, c2, rng)
        self.merge2 = Conv(2 * c2, c2, rng)
        self.dec2 = ResBlock(c2, e, rng)
        self.up1 = Conv(c2, c1, rng)
        self.merge1 = Conv(2 * c1, c1, rng)
        self.dec1 = ResBlock(c1, e, rng)
        self.norm_out = Norm(c1)
        self.conv_out = Conv(c1, config.in_channels, rng, zero=True)
        if config.parameterization == "v":
            from .schedule import make_schedule
            self._alpha_bar = make_schedule(config.T, config.beta_min, config.beta_max).alpha_bar

    # -- shapes -------------------------------------------------------------
    @property
    def bottleneck_shape(self) -> tuple:
        """NCHW shape of ``h`` for a single sample."""
        r = self.config.resolution // 4
        return (self.config.channels[2], r, r)

    def site_shapes(self) -> dict[str, tuple]:
        """Per-sample NCHW shapes of every perturbable feature map."""
        r = self.config.resolution
        c1, c2, c3 = self.config.channels
        return {"enc1": (c1, r, r), "enc2": (c2, r // 2, r // 2), "enc3": (c3, r // 4, r // 4),
                "bottleneck": (c3, r // 4, r // 4),
                "dec3": (c3, r // 4, r // 4), "dec2": (c2, r // 2, r // 2), "dec1": (c1, r, r)}

    # -- forward pieces -------------------------------------------------------
    def embed(self, t, cond) -> Tensor:
        temb = Tensor(timestep_embedding(t, self.config.time_dim).astype(self.conv_in.weight.dtype))
        temb = self.time2(ops.silu(self.time1(temb)))
        emb = temb + self.classes(np.atleast_1d(cond))
        return ops.silu(emb)

    def encode(self, x: Tensor, t, cond, noise: dict | None = None) -> Features:
        """``x`` channels-last ``[B, R, R, C]``; optional additive noise per encoder site."""
        batch = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (batch,))
        emb = self.embed(t, np.broadcast_to(np.asarray(cond), (batch,)))
        s1 = _perturb(self.enc1(self.conv_in(x), emb), noise, "enc1")
        s2 = _perturb(self.enc2(self.down1(ops.avg_pool2(s1)), emb), noise, "enc2")
        s3 = _perturb(self.enc3(self.down2(ops.avg_pool2(s2)), emb), noise, "enc3")
        h = self.mid(s3, emb)
        return Features(h=h, skips=(s1, s2, s3), emb=emb, x=x, t=t)

    def decode(self, feats: Features, h: Tensor | None = None, noise: dict | None = None) -> Tensor:
        h = feats.h if h is None else h
        s1, s2, s3 = feats.skips
        emb = feats.emb
        d = self.dec3(self.merge3(ops.concat([h, s3], axis=3)), emb)
        d = _perturb(d, noise, "dec3")
        d = self.up2(ops.upsample2(d))
        d = self.dec2(self.merge2(ops.concat([d, s2], axis=3)), emb)
        d = _perturb(d, noise, "dec2")
        d = self.up1(ops.upsample2(d))
        d = self.dec1(self.merge1(ops.concat([d, s1], axis=3)), emb)
        d = _perturb(d, noise, "dec1")
        out = self.conv_out(ops.silu(self.norm_out(d)))
        if self.config.parameterization == "v":
            ab = self._alpha_bar[np.asarray(feats.t, dtype=np.int64)].reshape(-1, 1, 1, 1).astype(out.dtype)
            out = out * Tensor(np.sqrt(ab)) + feats.x * Tensor(np.sqrt(1.0 - ab))
        return out

    def __call__(self, x: Tensor, t, cond) -> Tensor:
        return self.decode(self.encode(x, t, cond))

    def check_input(self, x: np.ndarray):
        c, r = self.config.in_channels, self.config.resolution
        if x.ndim != 4 or x.shape[1:] != (c, r, r):
            raise ValueError(f"input shape {x.shape} does not match model geometry [B, {c}, {r}, {r}]")


def _perturb(x: Tensor, noise: dict | None, site: str) -> Tensor:
    if noise is None or site not in noise:
        return x
    return x + Tensor(to_nhwc(noise[site]).astype(x.dtype, copy=False))


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x).transpose(0, 3, 1, 2))


def init_denoiser(config: DenoiserConfig | None = None, rng=None, **overrides) -> Denoiser:
    """Fan-in uniform init with a zero output conv. ``rng`` may be a seed."""
    config = config or DenoiserConfig(**overrides)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Denoiser(config, rng)


def _input_tensor(model: Denoiser, x_t: np.ndarray) -> Tensor:
    x_t = np.asarray(x_t)
    model.check_input(x_t)
    return Tensor(to_nhwc(x_t).astype(model.conv_in.weight.dtype, copy=False))


def predict_noise(model: Denoiser, x_t: np.ndarray, t: int, cond) -> np.ndarray:
    """Deterministic noise prediction for a NCHW batch."""
    if int(t) < 1:
        raise ValueError(f"timestep must be >= 1, got {t}")
    with no_grad():
        return to_nchw(model(_input_tensor(model, x_t), t, cond).data)


def predict_noise_pair(model: Denoiser, x_t: np.ndarray, t: int, cond, eps_h=None):
    """One encoder pass, two decoder passes: clean bottleneck and ``h + eps_h``.

    ``eps_h`` is NCHW with the bottleneck shape per sample, or ``None`` for
    zero. Skip tensors are shared between the two decoder runs.
    """
    x = _input_tensor(model, x_t)
    with no_grad():
        feats = model.encode(x, t, cond)
        clean = model.decode(feats)
        if eps_h is None:
            h2 = feats.h
        else:
            eps_h = np.asarray(eps_h)
            want = (x.shape[0],) + model.bottleneck_shape
            if eps_h.shape != want:
                raise ValueError(f"eps_h shape {eps_h.shape} does not match bottleneck shape {want}")
            h2 = feats.h + Tensor(to_nhwc(eps_h).astype(feats.h.dtype, copy=False))
        pert = model.decode(feats, h=h2)
    return to_nchw(clean.data), to_nchw(pert.data)


def predict_noise_sites(model: Denoiser, x_t: np.ndarray, t: int, cond, noise: dict):
    """Clean prediction plus one with additive noise at encoder/decoder sites."""
    x = _input_tensor(model, x_t)
    with no_grad():
        feats = model.encode(x, t, cond)
        clean = model.decode(feats)
        enc_noise = {k: v for k, v in noise.items() if k in ENCODER_SITES}
        dec_noise = {k: v for k, v in noise.items() if k in DECODER_SITES}
        pfeats = model.encode(x, t, cond, noise=enc_noise) if enc_noise else feats
        h = pfeats.h
        if "bottleneck" in noise:
            h = h + Tensor(to_nhwc(noise["bottleneck"]).astype(h.dtype, copy=False))
        pert = model.decode(pfeats, h=h, noise=dec_noise or None)
    return to_nchw(clean.data), to_nchw(pert.data)


def save_denoiser(model: Denoiser, directory):
    from .dataio import save_tensors
    return save_tensors(directory, model.state_dict(), model.config.descriptor())


def load_denoiser(directory) -> Denoiser:
    from .dataio import load_tensors
    state, desc = load_tensors(directory)
    if desc is None or desc.get("kind") != "unet-denoiser":
        raise ValueError(f"{directory}: not a denoiser checkpoint")
    model = Denoiser(DenoiserConfig.from_descriptor(desc), np.random.default_rng(0))
    model.load_state_dict(state)
    return model
