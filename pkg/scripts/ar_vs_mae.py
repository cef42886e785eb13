"""Next-token vs masked-reconstruction pretraining, compared through frozen-encoder graph fine-tuning.

Both objectives get the same model, corpus and step budget; the downstream task
labels each window by the span where the electrodes' rhythm flips.

    python3 scripts/ar_vs_mae.py --out runs/ar_vs_mae --seeds 0 1 2
"""

import argparse
import json
from pathlib import Path

from eegar.ete import PRESETS
from eegar.train import FinetuneConfig, PretrainConfig, ar_vs_mae, pretraining_corpus, rhythm_task


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--preset", default="small")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--pretrain-steps", type=int, default=800)
    ap.add_argument("--finetune-steps", type=int, default=1500)
    args = ap.parse_args()

    res = ar_vs_mae(PRESETS[args.preset], pretraining_corpus(1, rule="rhythm_window"), [rhythm_task(0)],
                    PretrainConfig(steps=args.pretrain_steps, lr=2e-3),
                    FinetuneConfig(steps=args.finetune_steps, lr=1e-2), seeds=args.seeds)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "rows.json").write_text(json.dumps(res["rows"], indent=2, sort_keys=True) + "\n")
    (args.out / "table.md").write_text(res["table"])
    print(res["table"])
    print(f"AR >= MAE in {res['ar_wins']}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
