"""Desk-scale experiments shared by the acceptance suite and ``scripts/``."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inpaint import ConvVaeGan, LossWeights
from .problems import GeneratorConfig, ProblemInstance, generate_problem_set
from .solvereval import EvalReport, evaluate, sweep_checkpoints
from .train import CurvePoint, TrainConfig, builtin_corpus, train

log = logging.getLogger(__name__)


@dataclass
class CorpusRunConfig:
    """One identically configured training run per corpus."""

    corpora: tuple[str, ...] = ("structured", "noise")
    corpus_size: int = 2000
    iterations: int = 3000
    batch_size: int = 16
    eval_every: int = 500
    learning_rate: float = 1e-3
    weights: LossWeights = field(default_factory=lambda: LossWeights(1.0, 1e-5, 1e-2))
    adv_warmup: int = 500
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, iterations=self.iterations, learning_rate=self.learning_rate,
                           weights=self.weights, eval_every=self.eval_every, adv_warmup=self.adv_warmup,
                           seed=self.seed)


@dataclass
class CorpusRun:
    corpus: str
    checkpoints: list[Path]
    curve: list[CurvePoint]
    sweep_totals: list[int]
    best_checkpoint: Path
    best: EvalReport
    seconds: float


def eval_sets(count: int = 300, seed: int = 2024) -> dict[str, list[ProblemInstance]]:
    """The held-out problem sets: mixed constant/reflection and pure constant."""
    mixed = GeneratorConfig(rules={"constant": 1, "reflect_rows": 1, "reflect_cols": 1}, seed=seed)
    const = GeneratorConfig(rules={"constant": 1}, seed=seed + 1)
    return {"constant_reflect": generate_problem_set(mixed, count, prefix="cr"),
            "constant": generate_problem_set(const, count, prefix="c")}


def run_corpus(name: str, cfg: CorpusRunConfig, problems: list[ProblemInstance], workdir) -> CorpusRun:
    """Train on one built-in corpus, then sweep its snapshots on ``problems``."""
    t0 = time.time()
    corpus = builtin_corpus(name, cfg.corpus_size, seed=cfg.seed)
    result = train(ConvVaeGan(seed=cfg.seed), corpus, cfg.train_config(), checkpoint_dir=Path(workdir) / name)
    sweep = sweep_checkpoints(result.checkpoints, problems)
    log.info("%s sweep totals %s", name, [r.total for r in sweep.reports])
    return CorpusRun(name, result.checkpoints, result.curve, [r.total for r in sweep.reports],
                     result.checkpoints[sweep.best_index], sweep.best, time.time() - t0)


def corpus_comparison(cfg: CorpusRunConfig, problems: list[ProblemInstance], workdir) -> dict[str, CorpusRun]:
    return {name: run_corpus(name, cfg, problems, workdir) for name in cfg.corpora}


def rescore(run: CorpusRun, problems: list[ProblemInstance]) -> EvalReport:
    from .train import load_checkpoint

    return evaluate(load_checkpoint(run.best_checkpoint), problems, checkpoint=str(run.best_checkpoint),
                    keep_predictions=False)


def smoothed(values: np.ndarray, window: int = 50) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries average what is available."""
    values = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(values, 0, 0.0))
    idx = np.arange(1, values.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
