"""Chance baselines: the closed form against a random-feature selector.

    python scripts/chance_baseline.py --problems 600
"""
import argparse

import numpy as np
from scipy import stats

from gestalt.inpaint import RandomFeatureInpainter
from gestalt.problems import GeneratorConfig, generate_problem_set
from gestalt.solvereval import NormTable, chance_expectation, evaluate, score_discrepancy


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--problems", type=int, default=600)
    ap.add_argument("--repeats", type=int, default=5)
    a = ap.parse_args()

    for n, k in [(36, 6), (12, 8), (a.problems, 6)]:
        print(f"{n} problems x {k} choices: expected {chance_expectation(n, k):g} correct by chance")

    lo, hi = stats.binom.interval(0.95, a.problems, 1 / 6)
    totals = []
    for r in range(a.repeats):
        problems = generate_problem_set(GeneratorConfig(seed=100 + r), a.problems)
        totals.append(evaluate(RandomFeatureInpainter(seed=r), problems, seed=r, keep_predictions=False).total)
    print(f"random selector: {totals} (95% interval [{lo:.0f}, {hi:.0f}], mean {np.mean(totals):.1f})")

    norms = NormTable(["A", "AB", "B"], {27: [10, 10, 7]})
    for observed in ([10, 10, 7], [12, 9, 6]):
        print(f"observed {observed} vs norms at 27 -> discrepancy {score_discrepancy(observed, norms).tolist()}")


if __name__ == "__main__":
    main()
