"""Constructive-matching solver and the evaluation harness around it.

A problem is solved by inpainting its missing cell and picking the answer
choice whose features lie closest (Euclidean) to the features of the
inpainted cell. Evaluation aggregates per-set scores, chance levels and
score discrepancies against user-supplied norm tables.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import (
    AllWhite,
    BackendShapeError,
    EmptySet,
    ShapeUnsupported,
    TotalNotInNorms,
    UnlabeledProblem,
)
from .imagecore import (
    DEFAULT_FILL,
    DEFAULT_WHITE_THRESHOLD,
    Composite,
    compose_matrix,
    content_box,
    crop_whitespace,
    extract_region,
    l2_distance,
    resize_nearest,
    union_box,
    write_image,
)
from .inpaint import Inpainter, OracleInpainter
from .problems import ProblemInstance

DEGENERATE_VARIANCE = 1e-4


@dataclass(frozen=True)
class SolveConfig:
    cell_size: int = 32
    fill: float = DEFAULT_FILL
    crop: bool = True
    white_threshold: float = DEFAULT_WHITE_THRESHOLD
    degenerate_variance: float = DEGENERATE_VARIANCE


@dataclass
class Solution:
    chosen: int
    distances: np.ndarray
    prediction: np.ndarray
    degenerate: bool
    backend: str
    full: np.ndarray | None = None


def prepare_images(problem: ProblemInstance, cfg: SolveConfig = SolveConfig()) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Crop shared white margins and resample cells and choices to ``cfg.cell_size``.

    When all images share one size they are cropped to the union of their
    content boxes, which keeps relative scale and position intact; otherwise
    each image is cropped on its own. Blank images are never cropped.
    """
    images = list(problem.cells) + list(problem.choices)
    if cfg.crop:
        boxes = []
        for im in images:
            try:
                boxes.append(content_box(im, cfg.white_threshold))
            except AllWhite:
                pass
        if len({im.shape for im in images}) == 1:
            if boxes:
                box = union_box(boxes)
                images = [extract_region(im, box) for im in images]
        else:
            cropped = []
            for im in images:
                try:
                    cropped.append(crop_whitespace(im, cfg.white_threshold))
                except AllWhite:
                    cropped.append(im)
            images = cropped
    s = cfg.cell_size
    images = [im if im.shape == (s, s) else resize_nearest(im, s, s) for im in images]
    n = len(problem.cells)
    return images[:n], images[n:]


def build_composite(problem: ProblemInstance, cfg: SolveConfig = SolveConfig()) -> tuple[Composite, list[np.ndarray]]:
    cells, choices = prepare_images(problem, cfg)
    return compose_matrix(cells, problem.grid, problem.missing, cfg.fill), choices


def select(pred_features: np.ndarray, choice_features: np.ndarray) -> tuple[int, np.ndarray]:
    """Nearest choice in feature space; ties go to the lowest index."""
    distances = np.array([l2_distance(pred_features, f) for f in choice_features])
    return int(np.argmin(distances)), distances


def solve(backend: Inpainter, problem: ProblemInstance, cfg: SolveConfig = SolveConfig()) -> Solution:
    comp, choices = build_composite(problem, cfg)
    try:
        full, prediction = backend.inpaint(comp)
        feats = backend.features([prediction] + choices)
    except ShapeUnsupported as exc:
        raise BackendShapeError(f"{backend.name} cannot handle problem {problem.id}: {exc}") from exc
    chosen, distances = select(feats[0], feats[1:])
    degenerate = bool(np.var(prediction) < cfg.degenerate_variance)
    return Solution(chosen, distances, prediction, degenerate, backend.name, full)


def oracle_backend(problems: Sequence[ProblemInstance], cfg: SolveConfig = SolveConfig()) -> OracleInpainter:
    """Oracle that completes each labelled problem with its (prepared) correct choice."""
    oracle = OracleInpainter()
    for p in problems:
        if p.truth is not None:
            comp, choices = build_composite(p, cfg)
            oracle.add(comp, choices[p.truth])
    return oracle


# ----------------------------------------------------------------------------
# scoring


def chance_expectation(num_problems: int, num_choices: int) -> float:
    if num_problems < 1 or num_choices < 1:
        raise ValueError("num_problems and num_choices must be >= 1")
    return num_problems / num_choices


@dataclass
class NormTable:
    """Normative per-set composition for each total score."""

    sets: list[str]
    table: dict[int, list[float]]

    def __post_init__(self):
        for total, comp in self.table.items():
            if len(comp) != len(self.sets):
                raise ValueError(f"norm for total {total} has {len(comp)} entries, expected {len(self.sets)}")
            if abs(sum(comp) - total) > 1e-6:
                raise ValueError(f"norm for total {total} sums to {sum(comp)}")

    @classmethod
    def from_json(cls, data: dict, sets: Sequence[str] | None = None) -> "NormTable":
        """Accepts ``{"sets": [...], "norms": {total: [...]}}`` or a bare ``{total: [...] | {set: n}}`` map."""
        if "norms" in data:
            sets = list(data.get("sets") or sets or [])
            data = data["norms"]
        table, names = {}, list(sets or [])
        for key, comp in data.items():
            if isinstance(comp, dict):
                if not names:
                    names = list(comp)
                comp = [comp[s] for s in names]
            table[int(key)] = [float(v) for v in comp]
        if not names:
            raise ValueError("norm table needs set names (a 'sets' list or per-set dicts)")
        return cls(names, table)

    @classmethod
    def load(cls, path, sets: Sequence[str] | None = None) -> "NormTable":
        return cls.from_json(json.loads(Path(path).read_text()), sets)


def score_discrepancy(per_set: Sequence[float], norms: NormTable) -> np.ndarray:
    """Observed per-set scores minus the normative composition for the same total."""
    per_set = np.asarray(per_set, dtype=np.float64)
    total = int(round(per_set.sum()))
    if total not in norms.table:
        raise TotalNotInNorms(f"no norms for total score {total}")
    return per_set - np.asarray(norms.table[total], dtype=np.float64)


@dataclass
class SetScore:
    set_label: str
    correct: int = 0
    total: int = 0
    outcomes: list[str] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass
class ProblemOutcome:
    id: str
    set_label: str
    chosen: int
    truth: int
    correct: bool
    degenerate: bool
    distances: list[float]


@dataclass
class EvalReport:
    sets: list[SetScore]
    total: int
    num_problems: int
    chance: float
    degenerate_count: int
    backend: str
    checkpoint: str | None = None
    seed: int | None = None
    discrepancies: dict[str, float] | None = None
    notes: list[str] = field(default_factory=list)
    outcomes: list[ProblemOutcome] = field(default_factory=list)
    predictions: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def accuracy(self) -> float:
        return self.total / self.num_problems

    def set_score(self, label: str) -> SetScore:
        return next(s for s in self.sets if s.set_label == label)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("predictions")
        d["accuracy"] = self.accuracy
        return d


def evaluate(backend: Inpainter, problems: Sequence[ProblemInstance], norms: NormTable | None = None,
             cfg: SolveConfig = SolveConfig(), seed: int | None = None, checkpoint: str | None = None,
             keep_predictions: bool = True) -> EvalReport:
    if not problems:
        raise EmptySet("no problems to evaluate")
    unlabeled = [p.id for p in problems if p.truth is None]
    if unlabeled:
        raise UnlabeledProblem(f"problems without truth labels: {unlabeled[:5]}")
    sets: dict[str, SetScore] = {}
    outcomes, predictions = [], {}
    degenerate = 0
    for p in problems:
        sol = solve(backend, p, cfg)
        ok = sol.chosen == p.truth
        s = sets.setdefault(p.set_label, SetScore(p.set_label))
        s.total += 1
        s.correct += int(ok)
        s.outcomes.append(p.id)
        degenerate += sol.degenerate
        outcomes.append(ProblemOutcome(p.id, p.set_label, sol.chosen, p.truth, ok, sol.degenerate,
                                       [float(d) for d in sol.distances]))
        if keep_predictions:
            predictions[p.id] = sol.prediction
    report = EvalReport(
        sets=list(sets.values()),
        total=sum(s.correct for s in sets.values()),
        num_problems=len(problems),
        chance=float(sum(1.0 / p.num_choices for p in problems)),
        degenerate_count=int(degenerate),
        backend=backend.name,
        checkpoint=checkpoint,
        seed=seed,
        outcomes=outcomes,
        predictions=predictions,
    )
    if norms is not None:
        observed = [sets[s].correct if s in sets else 0 for s in norms.sets]
        try:
            diff = score_discrepancy(observed, norms)
            report.discrepancies = {s: float(v) for s, v in zip(norms.sets, diff)}
        except TotalNotInNorms as exc:
            report.notes.append(str(exc))
    return report


def make_probe(problems: Sequence[ProblemInstance], cfg: SolveConfig = SolveConfig()) -> Callable[[Inpainter], float]:
    """Scoring callback for training curves: returns the number of problems solved."""
    problems = list(problems)

    def probe(backend: Inpainter) -> float:
        return float(evaluate(backend, problems, cfg=cfg, keep_predictions=False).total)

    return probe


@dataclass
class SweepResult:
    reports: list[EvalReport]
    best_index: int
    checkpoints: list[str]

    @property
    def best(self) -> EvalReport:
        return self.reports[self.best_index]


def sweep_checkpoints(checkpoints: Sequence, problems: Sequence[ProblemInstance], cfg: SolveConfig = SolveConfig(),
                      loader: Callable | None = None) -> SweepResult:
    """Evaluate every checkpoint; the best is the highest total, earliest on ties.

    ``checkpoints`` holds paths (loaded with ``loader``, default
    :func:`gestalt.train.load_checkpoint`) or ready backends.
    """
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    if loader is None:
        from .train import load_checkpoint as loader
    reports, names = [], []
    for ck in checkpoints:
        backend = ck if isinstance(ck, Inpainter) else loader(ck)
        name = getattr(backend, "name", "?") if isinstance(ck, Inpainter) else str(ck)
        reports.append(evaluate(backend, problems, cfg=cfg, checkpoint=name, keep_predictions=False))
        names.append(name)
    totals = [r.total for r in reports]
    return SweepResult(reports, int(np.argmax(totals)), names)


def emit_report(report: EvalReport, directory) -> list[Path]:
    """Write report.json, set_scores.csv, discrepancy.csv and predicted cells as PNG."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "report.json"
    p.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    written.append(p)

    p = out / "set_scores.csv"
    chance_by_set: dict[str, float] = {}
    for o in report.outcomes:
        chance_by_set[o.set_label] = chance_by_set.get(o.set_label, 0.0) + 1.0 / len(o.distances)
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "correct", "total", "accuracy", "chance"])
        for s in report.sets:
            w.writerow([s.set_label, s.correct, s.total, repr(s.accuracy), repr(chance_by_set.get(s.set_label, 0.0))])
    written.append(p)

    p = out / "discrepancy.csv"
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "observed", "discrepancy"])
        for label, d in (report.discrepancies or {}).items():
            observed = next((s.correct for s in report.sets if s.set_label == label), 0)
            w.writerow([label, observed, repr(d)])
    written.append(p)

    if report.predictions:
        pred_dir = out / "predictions"
        pred_dir.mkdir(exist_ok=True)
        flags = {o.id: o.degenerate for o in report.outcomes}
        for pid, img in report.predictions.items():
            suffix = "_degenerate" if flags.get(pid) else ""
            p = pred_dir / f"{pid}{suffix}.png"
            write_image(p, img)
            written.append(p)
    return written
