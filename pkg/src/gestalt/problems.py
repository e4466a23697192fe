"""Procedural Raven's-like matrix problems and problem-set directories.

Shapes are rasterised from signed distance fields with a one-pixel
anti-alias ramp, drawn as dark ink on white. All generated images are snapped
to the 8-bit grid so a save/load roundtrip through PNG is bit-exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadManifest, CannotSeparate, InconsistentChoiceCount, MissingImageFile
from .imagecore import quantize, read_image, write_image

RULES = ("constant", "reflect_rows", "reflect_cols", "rotate90", "texture_continuation")
SHAPES = ("circle", "square", "triangle", "bars", "glyph")
TEXTURES = ("stripes_h", "stripes_v", "stripes_d", "checker", "dots", "grid")

MIN_DIFF_FRACTION = 0.01
MIN_DIFF_LEVEL = 0.1


# ----------------------------------------------------------------------------
# rasterisation


@dataclass(frozen=True)
class Shape:
    kind: str
    cx: float
    cy: float
    size: float
    angle: float = 0.0
    filled: bool = False


def _segment_distance(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / max(dx * dx + dy * dy, 1e-12), 0.0, 1.0)
    return np.hypot(px - ax - t * dx, py - ay - t * dy)


def _polygon_sdf(px, py, verts):
    d = np.full(px.shape, np.inf)
    inside = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        (ax, ay), (bx, by) = verts[i], verts[(i + 1) % n]
        d = np.minimum(d, _segment_distance(px, py, ax, ay, bx, by))
        crosses = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xint)
    return np.where(inside, -d, d)


def _regular_polygon(cx, cy, r, n, angle):
    a = angle + 2 * np.pi * np.arange(n) / n
    return list(zip(cx + r * np.cos(a), cy + r * np.sin(a)))


def _shape_coverage(shape: Shape, px, py, stroke: float) -> np.ndarray:
    s = shape
    if s.kind == "circle":
        d = np.hypot(px - s.cx, py - s.cy) - s.size
    elif s.kind == "square":
        d = _polygon_sdf(px, py, _regular_polygon(s.cx, s.cy, s.size * np.sqrt(2), 4, s.angle + np.pi / 4))
    elif s.kind == "triangle":
        d = _polygon_sdf(px, py, _regular_polygon(s.cx, s.cy, s.size * 1.2, 3, s.angle))
    elif s.kind == "bars":
        # three parallel strokes; strokes are never filled
        ux, uy = np.cos(s.angle), np.sin(s.angle)
        d = np.full(px.shape, np.inf)
        for off in (-0.6, 0.0, 0.6):
            ox, oy = s.cx - uy * off * s.size, s.cy + ux * off * s.size
            length = s.size * (1.0 if off else 0.6)
            d = np.minimum(d, _segment_distance(px, py, ox - ux * length, oy - uy * length, ox + ux * length, oy + uy * length))
        return np.clip(stroke / 2 + 0.5 - d, 0.0, 1.0)
    elif s.kind == "glyph":
        # a stem with a head: asymmetric under every flip and rotation
        ux, uy = np.cos(s.angle), np.sin(s.angle)
        ex, ey = s.cx + ux * s.size, s.cy + uy * s.size
        stem = _segment_distance(px, py, s.cx - ux * s.size, s.cy - uy * s.size, ex, ey)
        hx, hy = ex - uy * 0.45 * s.size, ey + ux * 0.45 * s.size
        head = np.abs(np.hypot(px - hx, py - hy) - 0.35 * s.size)
        d = np.minimum(stem, head)
        return np.clip(stroke / 2 + 0.5 - d, 0.0, 1.0)
    else:
        raise ValueError(f"unknown shape kind {s.kind!r}")
    if s.filled:
        return np.clip(0.5 - d, 0.0, 1.0)
    return np.clip(stroke / 2 + 0.5 - np.abs(d), 0.0, 1.0)


def render_shapes(shapes: Sequence[Shape], size: int | tuple[int, int], stroke: float = 2.0) -> np.ndarray:
    """Rasterise ``shapes`` as dark ink on a white canvas."""
    h, w = (size, size) if np.isscalar(size) else size
    py, px = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    cover = np.zeros((h, w))
    for s in shapes:
        cover = np.maximum(cover, _shape_coverage(s, px, py, stroke))
    return quantize(1.0 - cover)


def random_shape(rng: np.random.Generator, size: int, kinds: Sequence[str] = SHAPES, scale=(0.2, 0.34),
                 jitter: float = 0.14, fill_prob: float = 0.3) -> Shape:
    kind = str(rng.choice(list(kinds)))
    return Shape(
        kind=kind,
        cx=size * (0.5 + rng.uniform(-jitter, jitter)),
        cy=size * (0.5 + rng.uniform(-jitter, jitter)),
        size=size * rng.uniform(*scale),
        angle=float(rng.uniform(0, 2 * np.pi)),
        filled=bool(kind in ("circle", "square", "triangle") and rng.random() < fill_prob),
    )


def render_texture(kind: str, size: int | tuple[int, int], period: int, phase=(0, 0), levels=(0.15, 0.75)) -> np.ndarray:
    """Exactly periodic two-level pattern; period ``period`` along both axes."""
    h, w = (size, size) if np.isscalar(size) else size
    y, x = np.mgrid[0:h, 0:w]
    y = (y + phase[0]) % period
    x = (x + phase[1]) % period
    half = max(1, period // 2)
    if kind == "stripes_h":
        on = y < half
    elif kind == "stripes_v":
        on = x < half
    elif kind == "stripes_d":
        on = (x + y) % period < half
    elif kind == "checker":
        on = (x < half) ^ (y < half)
    elif kind == "dots":
        on = (np.abs(x - half + 0.5) + np.abs(y - half + 0.5)) < max(1.0, period / 3)
    elif kind == "grid":
        on = (x == 0) | (y == 0)
    else:
        raise ValueError(f"unknown texture {kind!r}")
    lo, hi = levels
    return quantize(np.where(on, lo, hi))


def scale_image(image: np.ndarray, factor: float, background: float = 1.0) -> np.ndarray:
    """Nearest-neighbour zoom about the image centre."""
    h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    sy = np.floor((yy - h / 2) / factor + h / 2).astype(int)
    sx = np.floor((xx - w / 2) / factor + w / 2).astype(int)
    ok = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out = np.full_like(image, background)
    out[ok] = image[sy[ok], sx[ok]]
    return out


TRANSFORMS = {
    "identity": lambda im: im.copy(),
    "hflip": lambda im: np.fliplr(im).copy(),
    "vflip": lambda im: np.flipud(im).copy(),
    "rot90": lambda im: np.rot90(im).copy(),
}


def differs(a: np.ndarray, b: np.ndarray) -> bool:
    """True when at least 1% of pixels differ by at least 0.1."""
    return np.count_nonzero(np.abs(a - b) >= MIN_DIFF_LEVEL - 1e-9) >= MIN_DIFF_FRACTION * a.size


# ----------------------------------------------------------------------------
# problems


@dataclass
class ProblemInstance:
    id: str
    set_label: str
    grid: tuple[int, int]
    cells: list[np.ndarray]
    choices: list[np.ndarray]
    truth: int | None = None
    num_choices: int | None = None
    missing: tuple[int, int] | None = None
    rule: str | None = None

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        rows, cols = self.grid
        if self.missing is None:
            self.missing = (rows - 1, cols - 1)
        self.missing = tuple(int(m) for m in self.missing)
        if self.num_choices is None:
            self.num_choices = len(self.choices)
        if len(self.choices) != self.num_choices:
            raise InconsistentChoiceCount(f"{self.id}: {len(self.choices)} choices, num_choices={self.num_choices}")
        if len(self.cells) != rows * cols - 1:
            raise BadManifest(f"{self.id}: grid {self.grid} needs {rows * cols - 1} cells, got {len(self.cells)}")
        if self.truth is not None and not 0 <= self.truth < self.num_choices:
            raise BadManifest(f"{self.id}: truth {self.truth} outside 0..{self.num_choices - 1}")
        shapes = {c.shape for c in self.cells}
        if len(shapes) > 1:
            raise BadManifest(f"{self.id}: cell images differ in size {sorted(shapes)}")

    def cell_at(self, row: int, col: int) -> np.ndarray:
        rows, cols = self.grid
        idx = row * cols + col
        mr, mc = self.missing
        if (row, col) == (mr, mc):
            raise IndexError("that cell is the missing one")
        if idx > mr * cols + mc:
            idx -= 1
        return self.cells[idx]

    @property
    def truth_image(self) -> np.ndarray | None:
        return None if self.truth is None else self.choices[self.truth]


@dataclass
class GeneratorConfig:
    rules: dict[str, float] = field(default_factory=lambda: {r: 1.0 for r in RULES})
    cell_size: int = 32
    grid: tuple[int, int] = (2, 2)
    num_choices: int = 6
    shapes: tuple[str, ...] = SHAPES
    stroke_width: float = 2.0
    texture_periods: tuple[int, ...] = (4, 8)
    textures: tuple[str, ...] = TEXTURES
    foils: tuple[str, ...] = ("wrong_transform", "identity_copy", "scale", "blank", "wrong_shape")
    seed: int = 0

    def __post_init__(self):
        w = np.array([self.rules.get(r, 0.0) for r in RULES], dtype=float)
        unknown = set(self.rules) - set(RULES)
        if unknown:
            raise ValueError(f"unknown rules {sorted(unknown)}")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("rule weights must be non-negative with a positive sum")
        if self.num_choices < 2:
            raise ValueError("need at least 2 choices")


def _sample_rule(cfg: GeneratorConfig, rng) -> str:
    w = np.array([cfg.rules.get(r, 0.0) for r in RULES], dtype=float)
    return RULES[int(rng.choice(len(RULES), p=w / w.sum()))]


def _power(t: str, n: int):
    def f(im):
        for _ in range(n):
            im = TRANSFORMS[t](im)
        return im
    return f


def _rule_transform(rule: str):
    return {"constant": "identity", "reflect_rows": "hflip", "reflect_cols": "vflip", "rotate90": "rot90"}[rule]


def _shape_image(cfg, rng, avoid: Sequence[np.ndarray] = (), transform: str | None = None):
    """A random shape that differs from ``avoid`` and (optionally) from its own transform."""
    for _ in range(200):
        shapes = [random_shape(rng, cfg.cell_size, cfg.shapes)]
        img = render_shapes(shapes, cfg.cell_size, cfg.stroke_width)
        if transform not in (None, "identity") and not differs(img, TRANSFORMS[transform](img)):
            continue
        if all(differs(img, a) for a in avoid):
            return img, shapes
    raise CannotSeparate("could not sample a distinguishable shape")


def _rule_matrix(rule: str, cfg: GeneratorConfig, rng):
    """Full matrix (including the missing cell) plus candidate foils."""
    rows, cols = cfg.grid
    t = _rule_transform(rule)
    matrix = [[None] * cols for _ in range(rows)]
    bases = []
    if rule == "reflect_cols":
        for c in range(cols):
            base, _ = _shape_image(cfg, rng, bases, t)
            bases.append(base)
            for r in range(rows):
                matrix[r][c] = _power(t, r)(base)
        src, k = bases[-1], rows - 1
    else:
        for r in range(rows):
            base, _ = _shape_image(cfg, rng, bases, t)
            bases.append(base)
            for c in range(cols):
                matrix[r][c] = _power(t, c)(base)
        src, k = bases[-1], cols - 1
    truth = matrix[-1][-1]
    foils = []
    if "wrong_transform" in cfg.foils:
        for name in ("identity", "hflip", "vflip", "rot90"):
            for n in (1, 2, 3):
                if name != t or n != k:
                    foils.append(_power(name, n)(src))
    if "identity_copy" in cfg.foils:
        if cols > 1:
            foils.append(matrix[-1][-2])
        if rows > 1:
            foils.append(matrix[-2][-1])
    if "wrong_shape" in cfg.foils:
        other, _ = _shape_image(cfg, rng, [src])
        foils.append(_power(t, k)(other))
    rng.shuffle(foils)
    return matrix, truth, foils


def _texture_matrix(cfg: GeneratorConfig, rng):
    rows, cols = cfg.grid
    S = cfg.cell_size
    kind = str(rng.choice(list(cfg.textures)))
    period = int(rng.choice(list(cfg.texture_periods)))
    lo, hi = rng.uniform(0.0, 0.35), rng.uniform(0.55, 0.9)
    levels = (round(lo, 3), round(hi, 3))
    phase = (int(rng.integers(period)), int(rng.integers(period)))
    big = render_texture(kind, (rows * S, cols * S), period, phase, levels)
    matrix = [[big[r * S:(r + 1) * S, c * S:(c + 1) * S].copy() for c in range(cols)] for r in range(rows)]
    truth = matrix[-1][-1]
    # wrong phase of the same pattern, then other patterns at the same phase
    shifted = [np.roll(truth, (dy, dx), axis=(0, 1)) for dy in range(period) for dx in range(period) if (dy, dx) != (0, 0)]
    rng.shuffle(shifted)
    others = [render_texture(k2, S, period, phase, levels) for k2 in cfg.textures if k2 != kind]
    others += [render_texture(kind, S, p, phase, levels) for p in cfg.texture_periods if p != period]
    rng.shuffle(others)
    foils = shifted[:3] + others
    return matrix, truth, [np.asarray(f) for f in foils]


def make_distractors(truth: np.ndarray, cfg: GeneratorConfig, rng, foils: Sequence[np.ndarray] = ()) -> list[np.ndarray]:
    """Pick ``num_choices - 1`` foils that are separable from ``truth`` and from each other.

    Candidates are tried in order: the supplied ``foils``, scale changes,
    blank, then freshly sampled shapes.
    """
    need = cfg.num_choices - 1
    if need < 1:
        raise ValueError("num_choices must be at least 2")
    truth = np.asarray(truth, dtype=np.float64)
    if np.ptp(truth) < MIN_DIFF_LEVEL:
        raise CannotSeparate("truth image has no structure to separate distractors from")
    picked: list[np.ndarray] = []

    def offer(img):
        if len(picked) < need and differs(img, truth) and all(differs(img, p) for p in picked):
            picked.append(quantize(img))

    extra = []
    if "scale" in cfg.foils:
        extra += [scale_image(truth, 0.6), scale_image(truth, 1.5)]
    if "blank" in cfg.foils:
        extra.append(np.ones_like(truth))
    ordered = list(foils)
    # keep the catalogue mixed: interleave supplied foils with generic ones
    pool = []
    for i in range(max(len(ordered), len(extra))):
        if i < len(ordered):
            pool.append(ordered[i])
        if i < len(extra):
            pool.append(extra[i])
    for img in pool:
        offer(np.asarray(img, dtype=np.float64))
    attempts = 0
    while len(picked) < need:
        attempts += 1
        if attempts > 200:
            raise CannotSeparate(f"only found {len(picked)} of {need} separable distractors")
        h, w = truth.shape
        shapes = [random_shape(rng, min(h, w), cfg.shapes)]
        offer(render_shapes(shapes, (h, w), cfg.stroke_width))
    return picked


def generate_problem(cfg: GeneratorConfig, rng: np.random.Generator, problem_id: str = "p0000",
                     rule: str | None = None) -> ProblemInstance:
    rule = rule or _sample_rule(cfg, rng)
    if rule == "texture_continuation":
        matrix, truth, foils = _texture_matrix(cfg, rng)
    else:
        matrix, truth, foils = _rule_matrix(rule, cfg, rng)
    distractors = make_distractors(truth, cfg, rng, foils)
    order = rng.permutation(cfg.num_choices)
    options = [truth] + distractors
    choices = [options[i] for i in order]
    truth_idx = int(np.flatnonzero(order == 0)[0])
    rows, cols = cfg.grid
    cells = [matrix[r][c] for r in range(rows) for c in range(cols) if (r, c) != (rows - 1, cols - 1)]
    return ProblemInstance(
        id=problem_id,
        set_label=rule,
        grid=(rows, cols),
        cells=cells,
        choices=choices,
        truth=truth_idx,
        num_choices=cfg.num_choices,
        missing=(rows - 1, cols - 1),
        rule=rule,
    )


def generate_problem_set(cfg: GeneratorConfig, count: int, prefix: str = "p") -> list[ProblemInstance]:
    """``count`` problems; problem ``i`` draws from its own child seed of ``cfg.seed``."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(count)
    width = max(4, len(str(count - 1)))
    return [
        generate_problem(cfg, np.random.default_rng(s), f"{prefix}{i:0{width}d}")
        for i, s in enumerate(seeds)
    ]


# ----------------------------------------------------------------------------
# on-disk problem sets

MANIFEST = "manifest.json"


def save_problem_set(problems: Sequence[ProblemInstance], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in problems:
        cells, choices = [], []
        for i, img in enumerate(p.cells):
            name = f"{p.id}_cell{i}.png"
            write_image(directory / name, img)
            cells.append(name)
        for k, img in enumerate(p.choices):
            name = f"{p.id}_choice{k}.png"
            write_image(directory / name, img)
            choices.append(name)
        entries.append({
            "id": p.id,
            "set": p.set_label,
            "grid": list(p.grid),
            "missing": list(p.missing),
            "cells": cells,
            "choices": choices,
            "truth": p.truth,
            "num_choices": p.num_choices,
            "rule": p.rule,
        })
    path = directory / MANIFEST
    path.write_text(json.dumps({"version": 1, "problems": entries}, indent=1))
    return path


def _load_entry(e: dict, directory: Path) -> ProblemInstance:
    try:
        pid, set_label, grid = str(e["id"]), str(e["set"]), tuple(e["grid"])
        cell_files, choice_files = list(e["cells"]), list(e["choices"])
        num_choices = int(e["num_choices"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BadManifest(f"bad manifest entry {e!r}: {exc}") from exc
    truth = e.get("truth")
    if truth is not None and (not isinstance(truth, int) or not 0 <= truth < num_choices):
        raise BadManifest(f"{pid}: truth {truth!r} not in 0..{num_choices - 1}")
    if len(choice_files) != num_choices:
        raise InconsistentChoiceCount(f"{pid}: {len(choice_files)} choice files but num_choices={num_choices}")

    def load(name):
        path = directory / name
        if not path.is_file():
            raise MissingImageFile(f"{pid}: image {path} not found")
        return read_image(path)

    return ProblemInstance(
        id=pid,
        set_label=set_label,
        grid=grid,
        cells=[load(n) for n in cell_files],
        choices=[load(n) for n in choice_files],
        truth=truth,
        num_choices=num_choices,
        missing=tuple(e["missing"]) if e.get("missing") is not None else None,
        rule=e.get("rule"),
    )


def load_problem_set(directory) -> list[ProblemInstance]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise BadManifest(f"no {MANIFEST} in {directory}")
    try:
        data = json.loads(path.read_text())
        entries = data["problems"] if isinstance(data, dict) else data
    except (json.JSONDecodeError, KeyError) as exc:
        raise BadManifest(f"unreadable manifest {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise BadManifest("manifest 'problems' must be a list")
    return [_load_entry(e, directory) for e in entries]
