"""One shared electrode graph for two overlapping tasks vs one graph per task, at matched step budgets.

    python3 scripts/joint_vs_separate.py --encoder runs/pretrain/checkpoints/final --out runs/jvs
"""

import argparse
import json
from pathlib import Path

from eegar.checkpoint import load_encoder
from eegar.train import FinetuneConfig, joint_vs_separate, overlapping_tasks


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--encoder", type=Path, required=True, help="pretrained encoder checkpoint")
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--rule", default="rhythm_window", choices=("rhythm_window", "energy_window"))
    args = ap.parse_args()

    ete, _, _ = load_encoder(args.encoder)
    res = joint_vs_separate(ete, overlapping_tasks(0, rule=args.rule), FinetuneConfig(steps=args.steps, lr=1e-2),
                            args.seeds)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "rows.json").write_text(json.dumps(res["rows"], indent=2, sort_keys=True) + "\n")
    (args.out / "table.md").write_text(res["table"])
    print(res["table"])
    print("separate-mode step budgets per seed:", res["budgets"])


if __name__ == "__main__":
    main()
