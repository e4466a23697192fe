"""Self-supervised inpainting training: corpora, masks, the loop, checkpoints, curves."""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ArchitectureMismatch,
    CorruptFile,
    EmptyCorpus,
    NonFiniteLoss,
    NonFiniteValue,
    VersionMismatch,
)
from .imagecore import read_image, resize_nearest
from .inpaint import ConvVaeGan, LossWeights
from .problems import SHAPES, TEXTURES, TRANSFORMS, random_shape, render_shapes, render_texture
from .tensornet import Adam

log = logging.getLogger(__name__)

MAGIC = b"GMI1"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 36
    iterations: int = 2000
    learning_rate: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    mask_area_range: tuple[float, float] = (0.15, 0.35)
    eval_every: int = 250
    adv_warmup: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1, iterations >= 0")
        lo, hi = self.mask_area_range
        if not 0 < lo <= hi < 1:
            raise ValueError(f"mask_area_range must lie inside (0, 1), got {self.mask_area_range}")

    @classmethod
    def paper_batch(cls, **kw) -> "TrainConfig":
        """36 images per iteration, as in the full-scale ImageNet run."""
        return cls(batch_size=36, **kw)


# ----------------------------------------------------------------------------
# masks


def sample_mask(rng: np.random.Generator, h: int, w: int, area_range: tuple[float, float]) -> np.ndarray:
    """Known-pixel mask with one uniformly placed unknown rectangle.

    The rectangle's area fraction is drawn uniformly from ``area_range`` and
    its aspect ratio log-uniformly from [1/2, 2]; integer sides are chosen so
    the realised area stays inside the range.
    """
    lo, hi = area_range
    if not 0 < lo <= hi < 1:
        raise ValueError(f"area_range must lie inside (0, 1), got {area_range}")
    n = h * w
    target = rng.uniform(lo, hi) * n
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    rh = int(np.clip(round(np.sqrt(target * aspect)), 1, h))
    rw = int(np.clip(round(target / rh), 1, w))
    if not lo * n <= rh * rw <= hi * n:
        # fall back to the feasible side pair closest to the target area
        best = None
        for a in range(1, h + 1):
            for b in (int(np.floor(target / a)), int(np.ceil(target / a))):
                if 1 <= b <= w and lo * n <= a * b <= hi * n:
                    key = abs(a * b - target)
                    if best is None or key < best[0]:
                        best = (key, a, b)
        if best is None:
            raise ValueError(f"no rectangle in a {h}x{w} image has area fraction in {area_range}")
        _, rh, rw = best
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    mask = np.ones((h, w), dtype=bool)
    mask[top : top + rh, left : left + rw] = False
    return mask


# ----------------------------------------------------------------------------
# corpora


@dataclass
class Corpus:
    images: np.ndarray
    label: str = "corpus"
    root: str | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3 or len(self.images) == 0:
            raise EmptyCorpus("corpus needs at least one 2-D image")

    @property
    def size(self) -> int:
        return self.images.shape[-1]

    def __len__(self):
        return len(self.images)


def _tile(motif: np.ndarray, size: int, offset=(0, 0)) -> np.ndarray:
    s = motif.shape[0]
    reps = size // s + 2
    big = np.tile(motif, (reps, reps))
    return big[offset[0] : offset[0] + size, offset[1] : offset[1] + size]


def structured_scene(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Bold shape scene with repetition, alternation or mirror symmetry."""
    kind = rng.choice(["rows", "columns", "lattice", "mirror", "scatter"], p=[0.3, 0.2, 0.2, 0.15, 0.15])
    stroke = float(rng.uniform(2.0, 6.0))

    def shape(extent, **kw):
        return render_shapes([random_shape(rng, extent, SHAPES, fill_prob=0.5, **kw)], extent, stroke)

    if kind in ("rows", "columns"):
        cell = int(rng.choice([16, size // 3, size // 2]))
        t = "identity" if rng.random() < 0.5 else str(rng.choice(list(TRANSFORMS)))
        out = np.ones((size, size))
        n = -(-size // cell)
        for band in range(n):
            motif = shape(cell)
            row = []
            for k in range(n):
                row.append(motif)
                motif = TRANSFORMS[t](motif)
            strip = np.hstack(row)[:, :size]
            h = min(cell, size - band * cell)
            out[band * cell : band * cell + h] = strip[:h]
        return out if kind == "rows" else out.T.copy()
    if kind == "lattice":
        cell = int(rng.choice([8, 12, 16, 21, 32]))
        return _tile(shape(cell), size, tuple(int(v) for v in rng.integers(0, cell, 2)))
    many = [random_shape(rng, size, SHAPES, scale=(0.08, 0.22), jitter=0.35, fill_prob=0.5)
            for _ in range(int(rng.integers(1, 5)))]
    img = render_shapes(many, size, stroke)
    if kind == "mirror":
        half = size // 2
        axis = rng.integers(3)
        if axis in (0, 2):
            img[:, half:] = img[:, :half][:, ::-1]
        if axis in (1, 2):
            img[half:] = img[:half][::-1]
    return img


def texture_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    if rng.random() < 0.75:
        kind = str(rng.choice(list(TEXTURES)))
        period = int(rng.integers(3, 13))
        lo, hi = sorted(rng.uniform(0.0, 1.0, 2))
        hi = max(hi, lo + 0.3)
        phase = tuple(int(v) for v in rng.integers(0, period, 2))
        return render_texture(kind, size, period, phase, (lo, min(hi, 1.0)))
    # smooth stochastic blobs: upsampled coarse noise, box-blurred
    coarse = rng.uniform(0, 1, (size // 8 + 2, size // 8 + 2))
    img = np.kron(coarse, np.ones((8, 8)))
    k = 7
    c = np.pad(np.cumsum(np.cumsum(np.pad(img, k // 2, mode="edge"), 0), 1), ((1, 0), (1, 0)))
    blur = (c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]) / (k * k)
    return np.clip(blur[:size, :size], 0, 1)


def noise_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    return rng.uniform(0.0, 1.0, (size, size))


BUILTIN_CORPORA: dict[str, Callable[[np.random.Generator, int], np.ndarray]] = {
    "structured": structured_scene,
    "textures": texture_image,
    "noise": noise_image,
}


def builtin_corpus(name: str, count: int = 2000, size: int = 64, seed: int = 0) -> Corpus:
    if name not in BUILTIN_CORPORA:
        raise KeyError(f"unknown built-in corpus {name!r}; choose from {sorted(BUILTIN_CORPORA)}")
    if count < 1:
        raise EmptyCorpus("count must be positive")
    make = BUILTIN_CORPORA[name]
    seeds = np.random.SeedSequence(seed).spawn(count)
    return Corpus(np.stack([make(np.random.default_rng(s), size) for s in seeds]), label=name)


def load_corpus(root, size: int = 64, label: str | None = None) -> Corpus:
    """Load every PNG/PGM/JPEG under ``root`` as a centre-cropped grayscale square."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in {".png", ".pgm", ".jpg", ".jpeg"})
    images = []
    for f in files:
        img = read_image(f)
        h, w = img.shape
        s = min(h, w)
        top, left = (h - s) // 2, (w - s) // 2
        images.append(resize_nearest(img[top : top + s, left : left + s], size, size))
    if not images:
        raise EmptyCorpus(f"no images found under {root}")
    return Corpus(np.stack(images), label=label or root.name, root=str(root))


def resolve_corpus(spec: str, count: int = 2000, size: int = 64, seed: int = 0) -> Corpus:
    """``builtin:NAME`` or a directory path."""
    if spec.startswith("builtin:"):
        return builtin_corpus(spec.split(":", 1)[1], count, size, seed)
    return load_corpus(spec, size)


# ----------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: ConvVaeGan, rng_state: dict | None = None) -> bytes:
    desc = {"format_version": FORMAT_VERSION, "architecture": model.architecture(), "rng_state": rng_state}
    desc_bytes = json.dumps(desc, sort_keys=True).encode("utf-8")
    blocks = b"".join(
        np.ascontiguousarray(p, dtype="<f4").tobytes() for net in model.networks for p in net.parameters
    )
    return MAGIC + struct.pack("<I", len(desc_bytes)) + desc_bytes + blocks + struct.pack("<Q", model.iteration)


def save_checkpoint(model: ConvVaeGan, path, rng_state: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, rng_state))
    tmp.replace(path)
    return path


def _architecture_key(arch: dict) -> dict:
    return {k: arch[k] for k in ("z_dim", "image_size", "enc_channels", "disc_channels", "pool_size") if k in arch} | {"latent": arch.get("latent", "dense")}


def read_checkpoint(data: bytes) -> tuple[dict, list[np.ndarray], int]:
    """Parse raw checkpoint bytes into ``(descriptor, parameter arrays, iteration)``."""
    if len(data) < 8:
        raise CorruptFile("file too short for a checkpoint header")
    magic = data[:4]
    if magic != MAGIC:
        if magic[:3] == MAGIC[:3]:
            raise VersionMismatch(f"checkpoint format {magic!r}, this build reads {MAGIC!r}")
        raise CorruptFile(f"bad magic {magic!r}")
    (n,) = struct.unpack("<I", data[4:8])
    if 8 + n > len(data):
        raise CorruptFile("truncated descriptor")
    try:
        desc = json.loads(data[8 : 8 + n].decode("utf-8"))
        shapes = [tuple(s) for s in desc["architecture"]["shapes"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptFile(f"unreadable descriptor: {exc}") from exc
    if desc.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"descriptor version {desc.get('format_version')}")
    sizes = [int(np.prod(s)) for s in shapes]
    expected = 8 + n + 4 * sum(sizes) + 8
    if len(data) != expected:
        raise CorruptFile(f"checkpoint is {len(data)} bytes, expected {expected}")
    params, off = [], 8 + n
    for shape, size in zip(shapes, sizes):
        params.append(np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy())
        off += 4 * size
    (iteration,) = struct.unpack("<Q", data[off : off + 8])
    return desc, params, iteration


def load_checkpoint(path, expect: ConvVaeGan | dict | None = None) -> ConvVaeGan:
    """Rebuild a model from ``path``; ``expect`` (model or architecture) is checked if given."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptFile(f"cannot read {path}: {exc}") from exc
    desc, params, iteration = read_checkpoint(data)
    arch = desc["architecture"]
    if expect is not None:
        want = expect.architecture() if isinstance(expect, ConvVaeGan) else expect
        if _architecture_key(want) != _architecture_key(arch):
            raise ArchitectureMismatch(f"checkpoint {_architecture_key(arch)} != expected {_architecture_key(want)}")
    model = ConvVaeGan.from_architecture(arch)
    targets = [p for net in model.networks for p in net.parameters]
    if [t.shape for t in targets] != [p.shape for p in params]:
        raise ArchitectureMismatch("parameter shapes do not match the declared architecture")
    for t, p in zip(targets, params):
        t[...] = p
    model.iteration = iteration
    model.rng_state = desc.get("rng_state")
    return model


# ----------------------------------------------------------------------------
# curves


@dataclass
class CurvePoint:
    iteration: int
    recon: float
    kl: float
    adv_g: float
    adv_d: float
    score: float | None = None


CURVE_FIELDS = ("iteration", "recon", "kl", "adv_g", "adv_d", "score")


def export_curves(points: Sequence[CurvePoint], path) -> Path:
    if not points:
        raise ValueError("no curve points to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for p in points:
            w.writerow([p.iteration] + [f"{v:.9g}" for v in (p.recon, p.kl, p.adv_g, p.adv_d)]
                       + ["" if p.score is None else f"{p.score:.9g}"])
    return path


def read_curves(path) -> list[CurvePoint]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        CurvePoint(int(r["iteration"]), float(r["recon"]), float(r["kl"]), float(r["adv_g"]), float(r["adv_d"]),
                   float(r["score"]) if r["score"] else None)
        for r in rows
    ]


# ----------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    curve: list[CurvePoint]
    history: np.ndarray  # per-iteration loss components: recon, kl, adv_g, adv_d
    checkpoints: list[Path]
    model: ConvVaeGan

    @property
    def final_checkpoint(self) -> Path | None:
        return self.checkpoints[-1] if self.checkpoints else None


def _batch(corpus: Corpus, cfg: TrainConfig, rng: np.random.Generator):
    idx = rng.integers(0, len(corpus), size=cfg.batch_size)
    h, w = corpus.images.shape[1:]
    masks = np.stack([sample_mask(rng, h, w, cfg.mask_area_range) for _ in idx])
    return corpus.images[idx].astype(np.float64), masks


def train(model: ConvVaeGan, corpus: Corpus, cfg: TrainConfig,
          probe: Callable[[ConvVaeGan], float] | None = None,
          checkpoint_dir=None) -> TrainResult:
    """Train ``model`` in place.

    ``probe`` is any callable scoring a model snapshot (typically built by
    :func:`gestalt.solvereval.make_probe`); it is called at iteration 0 and
    every ``eval_every`` iterations, when a checkpoint is also written.
    """
    if len(corpus) == 0:
        raise EmptyCorpus("empty corpus")
    if corpus.images.shape[1:] != (model.image_size, model.image_size):
        raise ValueError(f"corpus images are {corpus.images.shape[1:]}, model expects {model.image_size}")
    rng = np.random.default_rng(cfg.seed)
    w = cfg.weights
    g_opt = Adam(model.generator_parameters, lr=cfg.learning_rate, betas=(0.5, 0.999))
    d_opt = Adam(model.discriminator.parameters, lr=cfg.learning_rate, betas=(0.5, 0.999)) if w.adv > 0 else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    history = np.zeros((cfg.iterations, 4))
    curve: list[CurvePoint] = []
    checkpoints: list[Path] = []

    def snapshot(it: int, window: np.ndarray):
        score = probe(model.copy()) if probe is not None else None
        curve.append(CurvePoint(it, *(float(v) for v in window.mean(axis=0)), score=score))
        if ckpt_dir is not None:
            checkpoints.append(save_checkpoint(model, ckpt_dir / f"ckpt_{it:07d}.gmi", rng.bit_generator.state))
        p = curve[-1]
        log.info("iter %d recon %.4f kl %.3f adv_g %.3f adv_d %.3f score %s", p.iteration, p.recon, p.kl, p.adv_g, p.adv_d, score)

    start = model.iteration
    first_images, first_masks = _batch(corpus, cfg, np.random.default_rng([cfg.seed, 1]))
    l0 = model.losses_and_grads(first_images, first_masks, w, adversarial=False, need_grads=False)[0]
    snapshot(start, np.array([[l0.recon, l0.kl, l0.adv_g, l0.adv_d]]))

    for i in range(cfg.iterations):
        images, masks = _batch(corpus, cfg, rng)
        adversarial = w.adv > 0 and (start + i) >= cfg.adv_warmup
        try:
            loss, g_grads, d_grads = model.losses_and_grads(images, masks, w, rng=rng, adversarial=adversarial)
        except NonFiniteValue as exc:
            raise NonFiniteLoss(f"non-finite activation at iteration {start + i}: {exc}") from exc
        row = (loss.recon, loss.kl, loss.adv_g, loss.adv_d)
        if not np.all(np.isfinite(row)) or not all(np.all(np.isfinite(g)) for g in g_grads):
            raise NonFiniteLoss(f"non-finite loss at iteration {start + i}: {row}")
        g_opt.step(g_grads)
        if d_opt is not None and d_grads is not None:
            d_opt.step(d_grads)
        history[i] = row
        model.iteration = start + i + 1
        if (i + 1) % cfg.eval_every == 0 or i + 1 == cfg.iterations:
            lo = max(0, i + 1 - cfg.eval_every)
            snapshot(model.iteration, history[lo : i + 1])
    return TrainResult(curve, history, checkpoints, model)
