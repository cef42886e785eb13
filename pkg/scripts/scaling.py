"""Model-size by token-budget grid; writes scaling.csv and a gnuplot data file.

    python3 scripts/scaling.py --out runs/scaling
    gnuplot -e "plot for [i=0:2] 'runs/scaling/scaling.dat' index i using 3:4 with linespoints"
"""

import argparse
from pathlib import Path

from eegar.ete import PRESETS, EteConfig
from eegar.train import FinetuneConfig, PretrainConfig, gnuplot_blocks, overlapping_tasks, pretraining_corpus, scaling_harness

LADDER = {
    "xs": EteConfig(layers=1, teg_layers=1, hidden=8, heads=2, head_size=4, intermediate=16, token_width=32),
    "s": EteConfig(layers=2, teg_layers=1, hidden=16, heads=2, head_size=8, intermediate=32, token_width=32),
    "m": PRESETS["tiny"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=300, help="pretraining steps at the full token budget")
    args = ap.parse_args()

    res = scaling_harness(LADDER, pretraining_corpus(1), overlapping_tasks(0, samples=120, rule="rhythm_window"),
                          PretrainConfig(steps=args.steps, lr=2e-3), FinetuneConfig(steps=100, lr=1e-2), args.seeds)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "scaling.csv").write_text(res["csv"])
    (args.out / "scaling.dat").write_text(gnuplot_blocks(res["rows"]))
    print(res["csv"], end="")


if __name__ == "__main__":
    main()
