"""Sweep simulated-teacher scenarios and write one trade-off CSV per run.

    python3 scripts/run_tradeoff_curves.py --out curves/ --seed 0
"""

import argparse
import math
from pathlib import Path

from privadapt.simharness import ScenarioConfig, SimTeacherModel, majority_vote_accuracy, simulate


def scenarios(trials: int) -> dict[str, ScenarioConfig]:
    out = {}
    for mech in ("gnmax", "rnm_laplace", "em", "gumbel"):
        for acc in (0.5, 0.7, 0.9):
            out[f"cls_{mech}_acc{acc:g}"] = ScenarioConfig(
                mechanism=mech, n_teachers=25, n_queries=100, trials=trials, teacher=SimTeacherModel(acc, 4))
    for mech in ("ksa_ptr", "ksa_gumbel", "fewshotgen"):
        out[f"gen_{mech}"] = ScenarioConfig(
            task="generation", mechanism=mech, n_teachers=100, n_queries=20, trials=max(2, trials // 5),
            teacher=SimTeacherModel(0.7, 2), seq_len=8, t_max=8, vocab_size=1000)
    return out


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--out", type=Path, default=Path("curves"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--only", help="substring filter on scenario names")
    args = p.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    for name, sc in scenarios(args.trials).items():
        if args.only and args.only not in name:
            continue
        curve = simulate(sc, args.seed, threads=args.threads)
        (args.out / f"{name}.csv").write_text(curve.to_csv(), encoding="utf-8")
        summary = " ".join(f"{p.epsilon:g}:{p.utility_mean:.3f}" for p in curve.points)
        line = f"{name:28s} {summary}"
        if sc.task == "classification":
            ceiling = majority_vote_accuracy(sc.teacher.confusion_matrix(), sc.n_teachers)
            line += f"  (noiseless vote {ceiling:.3f})"
        print(line)
    print(f"wrote CSVs to {args.out}/")


if __name__ == "__main__":
    main()
