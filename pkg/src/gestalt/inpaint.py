"""Inpainting backends sharing one encode / inpaint interface.

``ConvVaeGan`` is a compact convolutional VAE whose completions are also
scored by a discriminator. ``PatchInpainter`` fills the hole by copying the
best-matching known patches (onion-peel order). ``OracleInpainter`` and
``RandomFeatureInpainter`` are a test double and a chance baseline.
"""
from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateMask, EmptyBatch, NoSourcePatch, ShapeUnsupported
from .imagecore import DEFAULT_FILL, Composite, extract_region, paste_known
from .tensornet import (
    AvgPool,
    Conv2D,
    ConvTranspose2D,
    Dense,
    Flatten,
    LeakyReLU,
    Network,
    Reshape,
    Sigmoid,
    sigmoid,
)

LOGVAR_CLAMP = 10.0
SLOPE = 0.2  # leaky slope in every block; plain ReLU blocks died early in training


@dataclass
class LatentFeatures:
    values: np.ndarray
    source_shape: tuple = ()

    def __post_init__(self):
        self.values = np.ravel(np.asarray(self.values, dtype=np.float64))
        if self.values.size == 0 or not np.all(np.isfinite(self.values)):
            raise ValueError("latent features must be finite and nonempty")


class Inpainter(ABC):
    """Encoder/decoder pair as used by the solver."""

    name: str = "inpainter"

    @abstractmethod
    def encode(self, image: np.ndarray, mask: np.ndarray) -> LatentFeatures:
        ...

    @abstractmethod
    def complete(self, comp: Composite) -> np.ndarray:
        """Raw generated image for the whole composite (before pasting known pixels)."""

    def features(self, images: Sequence[np.ndarray]) -> np.ndarray:
        """Feature rows for fully observed images (answer choices, predictions)."""
        return np.stack([self.encode(im, np.ones(im.shape, dtype=bool)).values for im in images])

    def inpaint(self, comp: Composite) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(full, prediction)``; known pixels of ``comp`` are kept exactly."""
        if not comp.mask.any():
            raise DegenerateMask("mask has no known pixel")
        generated = np.asarray(self.complete(comp), dtype=np.float64)
        full = paste_known(generated, comp.image, comp.mask)
        return full, extract_region(full, comp.missing_rect)


def _flat_features(image: np.ndarray) -> LatentFeatures:
    return LatentFeatures(np.asarray(image, dtype=np.float64).ravel(), np.shape(image))


# ----------------------------------------------------------------------------
# VAE-GAN


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    beta: float = 1e-3
    adv: float = 1e-2


@dataclass
class VaeGanLoss:
    recon: float
    kl: float
    adv_g: float
    adv_d: float
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def total(self) -> float:
        w = self.weights
        return w.rec * self.recon + w.beta * self.kl + w.adv * self.adv_g


def kl_to_unit_normal(mu: np.ndarray, logvar: np.ndarray) -> float:
    """Batch-mean KL(N(mu, exp(logvar)) || N(0, I))."""
    mu = np.atleast_2d(mu).astype(np.float64)
    logvar = np.atleast_2d(logvar).astype(np.float64)
    per = 0.5 * np.sum((mu**2 + np.exp(logvar) - logvar - 1.0).reshape(len(mu), -1), axis=1)
    return float(per.mean())


def _softplus(x):
    return np.logaddexp(0.0, x)


class ConvVaeGan(Inpainter):
    """Convolutional VAE with a discriminator on completed images.

    The encoder input has two channels: intensity (unknown pixels set to
    ``fill``) and the known-mask as 0/1. Its trunk is fully convolutional, so
    it accepts composites and single cells alike. With ``latent="dense"`` the
    trunk is average-pooled to ``pool_size x pool_size`` and a dense layer
    gives a ``z_dim`` vector. With ``latent="spatial"`` a 1x1 convolution
    gives a latent map of ``z_dim / s0**2`` channels on the trunk's
    ``s0 x s0`` grid, so every latent site describes its own neighbourhood.
    """

    name = "vae"

    def __init__(self, z_dim: int = 64, image_size: int = 64, enc_channels=(16, 32, 64, 64),
                 disc_channels=(16, 32, 64), pool_size: int = 2, fill: float = DEFAULT_FILL,
                 seed: int = 0, mode: str = "deterministic", output: str = "clip", latent: str = "spatial",
                 dtype=np.float32):
        if output not in ("clip", "sigmoid"):
            raise ValueError(f"unknown output head {output!r}")
        if latent not in ("dense", "spatial"):
            raise ValueError(f"unknown latent layout {latent!r}")
        self.output, self.latent = output, latent
        self.z_dim, self.image_size = z_dim, image_size
        self.enc_channels, self.disc_channels = tuple(enc_channels), tuple(disc_channels)
        self.pool_size, self.fill, self.seed = pool_size, fill, seed
        self.mode = mode
        self.iteration = 0
        self._down = 2 ** len(self.enc_channels)
        if image_size % self._down or image_size // self._down < pool_size:
            raise ShapeUnsupported(f"image_size {image_size} incompatible with {len(self.enc_channels)} stride-2 blocks")
        s0 = image_size // self._down
        if latent == "spatial" and z_dim % (s0 * s0):
            raise ValueError(f"z_dim {z_dim} must be a multiple of the {s0}x{s0} latent grid")
        # channels of the latent along axis 1 (the whole vector when dense)
        self._zc = z_dim if latent == "dense" else z_dim // (s0 * s0)
        rng = np.random.default_rng(seed)

        enc, ch = [], 2
        for c in self.enc_channels:
            enc += [Conv2D(ch, c, 4, 2, 1, rng), LeakyReLU(SLOPE)]
            ch = c
        top = self.enc_channels[-1]
        if latent == "dense":
            enc += [AvgPool(None, out_size=pool_size), Flatten(), Dense(ch * pool_size**2, 2 * z_dim, rng)]
            dec = [Dense(z_dim, top * s0 * s0, rng), LeakyReLU(SLOPE), Reshape((top, s0, s0))]
        else:
            enc += [Conv2D(ch, 2 * self._zc, 1, 1, 0, rng)]
            dec = [Conv2D(self._zc, top, 3, 1, 1, rng), LeakyReLU(SLOPE)]
        self.encoder = Network(enc, dtype)

        outs = list(reversed(self.enc_channels[:-1])) + [1]
        ch = top
        for i, c in enumerate(outs):
            dec.append(ConvTranspose2D(ch, c, 4, 2, 1, rng))
            if i < len(outs) - 1:
                dec.append(LeakyReLU(SLOPE))
            elif output == "sigmoid":
                dec.append(Sigmoid())
            ch = c
        self.decoder = Network(dec, dtype)

        disc, ch = [], 1
        for c in self.disc_channels:
            disc += [Conv2D(ch, c, 4, 2, 1, rng), LeakyReLU(SLOPE)]
            ch = c
        side = image_size // 2 ** len(self.disc_channels)
        disc += [Flatten(), Dense(ch * side * side, 1, rng)]
        self.discriminator = Network(disc, dtype)

    # -- bookkeeping ---------------------------------------------------------
    @property
    def networks(self) -> list[Network]:
        return [self.encoder, self.decoder, self.discriminator]

    @property
    def latent_shape(self) -> tuple[int, ...]:
        """Shape of one latent code at the training image size."""
        if self.latent == "dense":
            return (self.z_dim,)
        s0 = self.image_size // self._down
        return (self._zc, s0, s0)

    @property
    def generator_parameters(self) -> list[np.ndarray]:
        return self.encoder.parameters + self.decoder.parameters

    def architecture(self) -> dict:
        return {
            "model": "ConvVaeGan",
            "z_dim": self.z_dim,
            "image_size": self.image_size,
            "enc_channels": list(self.enc_channels),
            "disc_channels": list(self.disc_channels),
            "pool_size": self.pool_size,
            "fill": self.fill,
            "output": self.output,
            "latent": self.latent,
            "dtype": self.encoder.dtype.name,
            "shapes": [list(p.shape) for net in self.networks for p in net.parameters],
        }

    @classmethod
    def from_architecture(cls, arch: dict) -> "ConvVaeGan":
        return cls(z_dim=arch["z_dim"], image_size=arch["image_size"], enc_channels=arch["enc_channels"],
                   disc_channels=arch["disc_channels"], pool_size=arch["pool_size"], fill=arch["fill"],
                   output=arch.get("output", "sigmoid"), latent=arch.get("latent", "dense"), dtype=np.dtype(arch.get("dtype", "float32")))

    def copy(self) -> "ConvVaeGan":
        other = object.__new__(ConvVaeGan)
        other.__dict__.update(self.__dict__)
        other.encoder, other.decoder, other.discriminator = (n.copy() for n in self.networks)
        return other

    # -- encoder / decoder ---------------------------------------------------
    def _encoder_input(self, images: np.ndarray, masks: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        masks = np.asarray(masks, dtype=bool)
        if images.shape != masks.shape:
            raise ShapeUnsupported(f"image {images.shape} and mask {masks.shape} are not aligned")
        h, w = images.shape[-2:]
        pooled = self.latent == "dense" and ((h // self._down) % self.pool_size or (w // self._down) % self.pool_size)
        if h % self._down or w % self._down or pooled:
            raise ShapeUnsupported(f"encoder cannot take a {h}x{w} input")
        return np.stack([np.where(masks, images, self.fill), masks.astype(np.float64)], axis=1)

    def encode_stats(self, images: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Latent mean and clamped log-variance for a batch ``(B, H, W)``.

        Both are ``(B, z_dim)`` for a dense latent and ``(B, C, h, w)`` maps
        for a spatial one.
        """
        h = self.encoder.forward(self._encoder_input(images, masks)).astype(np.float64)
        c = self._zc
        return h[:, :c], np.clip(h[:, c:], -LOGVAR_CLAMP, LOGVAR_CLAMP)

    def encode(self, image, mask, rng: np.random.Generator | None = None) -> LatentFeatures:
        mu, logvar = self.encode_stats(np.asarray(image)[None], np.asarray(mask)[None])
        z = mu[0]
        if self.mode == "sampling":
            rng = rng if rng is not None else np.random.default_rng()
            z = z + np.exp(0.5 * logvar[0]) * rng.standard_normal(z.shape)
        return LatentFeatures(z, z.shape)

    def features(self, images):
        images = np.stack([np.asarray(im, dtype=np.float64) for im in images])
        mu, _ = self.encode_stats(images, np.ones(images.shape, dtype=bool))
        return mu.reshape(len(images), -1)

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        if z.ndim == (1 if self.latent == "dense" else 3):
            z = z[None]
        out = self.decoder.forward(z)[:, 0].astype(np.float64)
        return np.clip(out, 0.0, 1.0) if self.output == "clip" else out

    def complete(self, comp: Composite) -> np.ndarray:
        if comp.image.shape != (self.image_size, self.image_size):
            raise ShapeUnsupported(f"decoder produces {self.image_size}x{self.image_size}, composite is {comp.image.shape}")
        mu, _ = self.encode_stats(comp.image[None], comp.mask[None])
        return self.decode(mu)[0]

    def discriminator_logits(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ShapeUnsupported(f"discriminator takes {self.image_size}x{self.image_size} images")
        return self.discriminator.forward(images.reshape(-1, 1, *images.shape[-2:]))[:, 0].astype(np.float64)

    # -- training objective --------------------------------------------------
    def losses_and_grads(self, images, masks, weights: LossWeights = LossWeights(),
                         rng: np.random.Generator | None = None, adversarial: bool = True,
                         train_discriminator: bool | None = None, need_grads: bool = True):
        """Forward the objective on a batch and optionally backpropagate it.

        Returns ``(loss, generator_grads, discriminator_grads)``. ``adversarial``
        switches the generator's adversarial term on; the discriminator is
        trained whenever ``weights.adv > 0`` unless ``train_discriminator`` says
        otherwise. With ``rng`` the bottleneck is sampled, otherwise the mean
        is used.
        """
        images = np.asarray(images, dtype=np.float64)
        masks = np.asarray(masks, dtype=bool)
        if images.ndim != 3 or images.shape[0] == 0:
            raise EmptyBatch("batch must be a nonempty (B, H, W) stack")
        B = images.shape[0]
        c = self._zc
        use_d = weights.adv > 0 if train_discriminator is None else train_discriminator

        h = self.encoder.forward(self._encoder_input(images, masks)).astype(np.float64)
        mu, lv_raw = h[:, :c], h[:, c:]
        lv = np.clip(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
        eps = rng.standard_normal(mu.shape) if rng is not None else np.zeros_like(mu)
        std = np.exp(0.5 * lv)
        z = mu + std * eps
        recon = self.decoder.forward(z)[:, 0].astype(np.float64)

        unknown = ~masks
        n_u = unknown.sum()
        diff = recon - images
        recon_loss = float(np.abs(diff)[unknown].sum() / n_u) if n_u else 0.0
        kl = kl_to_unit_normal(mu, lv)
        fake = np.where(masks, images, recon)

        adv_g = adv_d = 0.0
        d_recon = weights.rec * np.sign(diff) * unknown / max(n_u, 1)
        if adversarial and weights.adv > 0:
            logits = self.discriminator.forward(fake[:, None])[:, 0].astype(np.float64)
            adv_g = float(_softplus(-logits).mean())
            if need_grads:
                dlogit = (sigmoid(logits) - 1.0) / B
                dfake = self.discriminator.backward(dlogit[:, None])[:, 0].astype(np.float64)
                d_recon = d_recon + weights.adv * dfake * unknown

        d_grads = None
        if use_d:
            both = np.concatenate([images, fake])[:, None]
            logits = self.discriminator.forward(both)[:, 0].astype(np.float64)
            lr_, lf_ = logits[:B], logits[B:]
            adv_d = float(_softplus(-lr_).mean() + _softplus(lf_).mean())
            if need_grads:
                dlogit = np.concatenate([(sigmoid(lr_) - 1.0) / B, sigmoid(lf_) / B])
                self.discriminator.backward(dlogit[:, None])
                d_grads = [g.copy() for g in self.discriminator.gradients]

        loss = VaeGanLoss(recon_loss, kl, adv_g, adv_d, weights)
        if not need_grads:
            return loss, None, None

        dz = self.decoder.backward(d_recon[:, None]).astype(np.float64)
        dmu = dz + weights.beta * mu / B
        dlv = dz * eps * 0.5 * std + weights.beta * 0.5 * (np.exp(lv) - 1.0) / B
        dlv = np.where(np.abs(lv_raw) <= LOGVAR_CLAMP, dlv, 0.0)
        self.encoder.backward(np.concatenate([dmu, dlv], axis=1))
        g_grads = self.encoder.gradients + self.decoder.gradients
        return loss, [g.copy() for g in g_grads], d_grads


def vae_gan_losses(model: ConvVaeGan, images, masks, weights: LossWeights = LossWeights(),
                   rng: np.random.Generator | None = None) -> VaeGanLoss:
    """Loss components on a batch without touching gradients."""
    loss, _, _ = model.losses_and_grads(images, masks, weights, rng=rng, adversarial=weights.adv > 0,
                                        need_grads=False)
    return loss


def discriminator_score(model: ConvVaeGan, image: np.ndarray) -> float:
    return float(sigmoid(model.discriminator_logits(np.asarray(image)[None]))[0])


# ----------------------------------------------------------------------------
# patch propagation


@dataclass
class PatchInpainter(Inpainter):
    """Exemplar inpainting: copy known patches into the hole, most-constrained patch first."""

    patch: int = 8
    stride: int = 1
    fill: float = DEFAULT_FILL
    name: str = "patch"

    def __post_init__(self):
        if self.patch < 2 or self.stride < 1:
            raise ValueError("patch must be >= 2 and stride >= 1")

    def encode(self, image, mask):
        return _flat_features(np.where(mask, image, self.fill))

    def features(self, images):
        return np.stack([np.asarray(im, dtype=np.float64).ravel() for im in images])

    def complete(self, comp: Composite) -> np.ndarray:
        return patch_fill(self, comp.image, comp.mask)


def _window_sums(a: np.ndarray, p: int) -> np.ndarray:
    c = np.pad(np.cumsum(np.cumsum(a, axis=0), axis=1), ((1, 0), (1, 0)))
    return c[p:, p:] - c[:-p, p:] - c[p:, :-p] + c[:-p, :-p]


def patch_fill(model: PatchInpainter, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill unknown pixels by onion-peel exemplar copying.

    Repeatedly takes the partially known target window with the most known
    pixels (raster order breaks ties), finds the fully known source window
    with the smallest sum of squared differences over the target's known
    pixels, and copies the source into the target's unknown pixels.
    """
    img = np.array(image, dtype=np.float64)
    known = np.array(mask, dtype=bool)
    if known.all():
        return img
    p = model.patch
    h, w = img.shape
    if h < p or w < p:
        raise NoSourcePatch(f"image {h}x{w} smaller than patch {p}")
    full = _window_sums(known.astype(np.int64), p) == p * p
    on_stride = np.arange(max(full.shape)) % model.stride == 0
    full &= on_stride[: full.shape[0], None] & on_stride[None, : full.shape[1]]
    src = np.argwhere(full)
    if len(src) == 0:
        raise NoSourcePatch("no fully known source patch")
    sources = sliding_window_view(img, (p, p))[src[:, 0], src[:, 1]].reshape(len(src), p * p).copy()

    while not known.all():
        counts = _window_sums(known.astype(np.int64), p)
        counts[counts == p * p] = -1
        flat = int(np.argmax(counts))
        ty, tx = divmod(flat, counts.shape[1])
        if counts[ty, tx] <= 0:
            # a hole wider than the patch: seed from the raster-first unknown pixel
            uy, ux = np.argwhere(~known)[0]
            ty, tx = min(uy, h - p), min(ux, w - p)
        block = (slice(ty, ty + p), slice(tx, tx + p))
        t_img = img[block].ravel()
        t_known = known[block].ravel()
        ssd = ((sources[:, t_known] - t_img[t_known]) ** 2).sum(axis=1)
        best = sources[int(np.argmin(ssd))]
        t_img = t_img.copy()
        t_img[~t_known] = best[~t_known]
        img[block] = t_img.reshape(p, p)
        known[block] = True
    return img


# ----------------------------------------------------------------------------
# test double and chance baseline


def composite_key(comp: Composite) -> str:
    h = hashlib.sha1(comp.image.astype(np.float64).tobytes())
    h.update(comp.mask.tobytes())
    return h.hexdigest()


class OracleInpainter(Inpainter):
    """Returns a stored ground-truth cell for each known composite; raw-pixel features."""

    name = "oracle"

    def __init__(self, answers: dict[str, np.ndarray] | None = None):
        self.answers = dict(answers or {})

    def add(self, comp: Composite, truth_cell: np.ndarray) -> None:
        self.answers[composite_key(comp)] = np.asarray(truth_cell, dtype=np.float64)

    def encode(self, image, mask):
        return _flat_features(np.where(mask, image, DEFAULT_FILL))

    def features(self, images):
        return np.stack([np.asarray(im, dtype=np.float64).ravel() for im in images])

    def complete(self, comp):
        out = comp.image.copy()
        cell = self.answers.get(composite_key(comp))
        if cell is not None:
            out[comp.missing_rect.slices] = cell
        return out


class RandomFeatureInpainter(Inpainter):
    """Chance baseline: fresh Gaussian features on every encode."""

    name = "random"

    def __init__(self, seed: int = 0, dim: int = 64):
        self.seed, self.dim = seed, dim
        self.rng = np.random.default_rng(seed)

    def encode(self, image, mask):
        return LatentFeatures(self.rng.standard_normal(self.dim), np.shape(image))

    def features(self, images):
        return self.rng.standard_normal((len(images), self.dim))

    def complete(self, comp):
        return comp.image.copy()
