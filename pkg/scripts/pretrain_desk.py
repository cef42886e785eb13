"""Next-token pretraining of the Tiny encoder on the synthetic AR(2) corpus.

    python3 scripts/pretrain_desk.py --out runs/pretrain --steps 2000
"""

import argparse
import json
from pathlib import Path

import numpy as np

from eegar.ete import PRESETS, EteModel
from eegar.tokenizer import ElectrodeVocabulary
from eegar.train import PretrainConfig, pretrain, pretraining_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--preset", default="tiny")
    ap.add_argument("--objective", choices=("ar", "mae"), default="ar")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--corpus-rule", default=None, help="optional synthetic event rule for the unlabelled corpus")
    args = ap.parse_args()

    cfg = PRESETS[args.preset]
    ete = EteModel(cfg, seed=args.seed, causal=args.objective == "ar")
    vocab = ElectrodeVocabulary(cfg.token_width, np.random.default_rng([args.seed, 7]), cfg.init_std)
    corpus = pretraining_corpus(1, rule=args.corpus_rule)
    run = pretrain(corpus, ete, vocab, PretrainConfig(steps=args.steps, lr=args.lr, objective=args.objective),
                   seed=args.seed, run_dir=args.out)
    (args.out / "summary.json").write_text(json.dumps(run.summary, indent=2, sort_keys=True) + "\n")
    s = run.summary
    print(f"held-out loss {s['initial_heldout']:.4f} -> {s['final_heldout']:.4f} "
          f"({s['final_heldout'] / s['initial_heldout']:.1%}); encoder at {args.out / 'checkpoints' / 'final'}")


if __name__ == "__main__":
    main()
