"""Command-line entry point: ``gestalt {gen,train,solve,eval,sweep}``."""
from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

from .errors import GestaltError
from .imagecore import write_image
from .inpaint import ConvVaeGan, Inpainter, LossWeights, PatchInpainter, RandomFeatureInpainter
from .problems import RULES, GeneratorConfig, generate_problem_set, load_problem_set, save_problem_set
from .solvereval import NormTable, SolveConfig, emit_report, evaluate, make_probe, oracle_backend, solve, sweep_checkpoints
from .train import TrainConfig, export_curves, load_checkpoint, resolve_corpus, save_checkpoint, train

log = logging.getLogger("gestalt")

BACKENDS = ("vae", "patch", "oracle", "random")


def make_backend(name: str, ckpt: str | None, problems, seed: int = 0) -> Inpainter:
    if name == "vae":
        if not ckpt:
            raise SystemExit("--ckpt is required for the vae backend")
        return load_checkpoint(ckpt)
    if name == "patch":
        return PatchInpainter()
    if name == "oracle":
        return oracle_backend(problems)
    if name == "random":
        return RandomFeatureInpainter(seed=seed)
    raise SystemExit(f"unknown backend {name!r}")


def cmd_gen(a) -> int:
    rules = [r.strip() for r in a.rules.split(",") if r.strip()]
    bad = sorted(set(rules) - set(RULES))
    if bad:
        raise SystemExit(f"unknown rules {bad}; choose from {', '.join(RULES)}")
    grid = a.grid or (3 if a.choices == 8 else 2)
    cfg = GeneratorConfig(rules={r: 1.0 for r in rules}, cell_size=a.cell_size, grid=(grid, grid),
                          num_choices=a.choices, seed=a.seed)
    problems = generate_problem_set(cfg, a.count)
    path = save_problem_set(problems, a.out)
    print(f"wrote {len(problems)} problems to {path}")
    return 0


def cmd_train(a) -> int:
    corpus = resolve_corpus(a.corpus, count=a.corpus_size, seed=a.seed)
    cfg = TrainConfig(batch_size=a.batch, iterations=a.iters, learning_rate=a.lr,
                      weights=LossWeights(1.0, a.beta, a.lambda_adv), eval_every=a.eval_every,
                      adv_warmup=a.adv_warmup, seed=a.seed)
    model = ConvVaeGan(seed=a.seed)
    probe = make_probe(load_problem_set(a.probe)) if a.probe else None
    out = Path(a.out)
    ckdir = Path(a.checkpoint_dir) if a.checkpoint_dir else out.parent / (out.stem + "_snapshots")
    result = train(model, corpus, cfg, probe=probe, checkpoint_dir=ckdir)
    save_checkpoint(result.model, out)
    if a.curves:
        export_curves(result.curve, a.curves)
    last = result.curve[-1]
    print(f"trained {cfg.iterations} iterations; recon {last.recon:.4f}; checkpoint {out}")
    return 0


def _resolve_problem(spec: str):
    """``DIR/ID`` names one problem of a set; a bare ``DIR`` holding one problem also works."""
    p = Path(spec)
    if (p / "manifest.json").exists():
        problems = load_problem_set(p)
        if len(problems) != 1:
            raise SystemExit(f"{p} holds {len(problems)} problems; name one as DIR/ID")
        return problems[0], problems
    problems = load_problem_set(p.parent)
    for q in problems:
        if q.id == p.name:
            return q, problems
    raise SystemExit(f"no problem {p.name!r} in {p.parent}")


def cmd_solve(a) -> int:
    problem, siblings = _resolve_problem(a.problem)
    backend = make_backend(a.backend, a.ckpt, [problem] if a.backend == "oracle" else siblings, a.seed)
    sol = solve(backend, problem, SolveConfig())
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / f"{problem.id}_prediction.png", sol.prediction)
    write_image(out / f"{problem.id}_completed.png", sol.full)
    record = {"id": problem.id, "chosen": sol.chosen, "truth": problem.truth,
              "distances": [float(d) for d in sol.distances], "degenerate": sol.degenerate,
              "backend": sol.backend}
    (out / "solution.json").write_text(json.dumps(record, indent=1, sort_keys=True))
    print(f"{problem.id}: chose {sol.chosen + 1}" + ("" if problem.truth is None else f" (answer {problem.truth + 1})"))
    return 0


def cmd_eval(a) -> int:
    problems = load_problem_set(a.problems)
    backend = make_backend(a.backend, a.ckpt, problems, a.seed)
    norms = NormTable.load(a.norms) if a.norms else None
    report = evaluate(backend, problems, norms=norms, seed=a.seed, checkpoint=a.ckpt)
    emit_report(report, a.out)
    print(f"{report.total}/{report.num_problems} correct (chance {report.chance:.1f}); report in {a.out}")
    return 0


def cmd_sweep(a) -> int:
    paths = sorted(glob.glob(a.ckpts))
    if not paths:
        raise SystemExit(f"no checkpoints match {a.ckpts!r}")
    problems = load_problem_set(a.problems)
    result = sweep_checkpoints(paths, problems)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.csv").open("w") as fh:
        fh.write("checkpoint,correct,total\n")
        for name, rep in zip(result.checkpoints, result.reports):
            fh.write(f"{name},{rep.total},{rep.num_problems}\n")
    best = result.checkpoints[result.best_index]
    best_report = evaluate(load_checkpoint(best), problems, checkpoint=best)
    emit_report(best_report, out / "best")
    print(f"best checkpoint {best}: {best_report.total}/{best_report.num_problems}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gestalt", description="Matrix reasoning by image completion.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a labeled problem set")
    g.add_argument("--rules", default=",".join(RULES), help="comma-separated rule names")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--cell-size", type=int, default=32)
    g.add_argument("--choices", type=int, choices=(6, 8), default=6)
    g.add_argument("--grid", type=int, choices=(2, 3), default=None, help="defaults to 3 with 8 choices, else 2")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the inpainting model")
    t.add_argument("--corpus", required=True, help="image directory or builtin:structured|textures|noise")
    t.add_argument("--corpus-size", type=int, default=2000, help="images drawn from a builtin corpus")
    t.add_argument("--iters", type=int, default=2000)
    t.add_argument("--batch", type=int, default=TrainConfig.batch_size)
    t.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    t.add_argument("--beta", type=float, default=LossWeights.beta)
    t.add_argument("--lambda-adv", type=float, default=LossWeights.adv)
    t.add_argument("--eval-every", type=int, default=250)
    t.add_argument("--adv-warmup", type=int, default=TrainConfig.adv_warmup)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--probe", help="problem-set directory scored at every eval point")
    t.add_argument("--out", required=True, help="final checkpoint path")
    t.add_argument("--checkpoint-dir", help="where eval-point snapshots go (default: next to --out)")
    t.add_argument("--curves", help="CSV path for the training curve")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("solve", help="solve one problem")
    s.add_argument("--ckpt")
    s.add_argument("--backend", choices=BACKENDS, default="vae")
    s.add_argument("--problem", required=True, help="DIR/ID")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", help="score a problem set and write a report")
    e.add_argument("--ckpt")
    e.add_argument("--backend", choices=BACKENDS, default="vae")
    e.add_argument("--problems", required=True)
    e.add_argument("--norms")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="score every checkpoint and report the best")
    w.add_argument("--ckpts", required=True, help="glob pattern")
    w.add_argument("--problems", required=True)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except GestaltError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
