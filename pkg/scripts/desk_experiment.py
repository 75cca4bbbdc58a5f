"""Desk-scale reproduction of the two qualitative orderings.

1. Decoder evaluation: frozen pretrained encoder vs frozen random encoder,
   CTC and attention decoders.
2. Semi-supervised: pretrain + fine-tune on 10% of the labels vs training
   from scratch on the same 10%.

    python scripts/desk_experiment.py --root runs/desk --out runs/desk/results.json
"""

import argparse
import dataclasses
import json
import logging
import time
from pathlib import Path

from seqclr.desk import DeskSettings, learning_signal, make_corpus, semi_supervised_trend


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--root", default="runs/desk", help="corpus and checkpoint cache directory")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--only", choices=["decoder_eval", "semi_supervised"])
    ap.add_argument("--out", help="write results as JSON")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    settings = dataclasses.replace(DeskSettings(), seeds=tuple(args.seeds))
    root = Path(args.root)
    train, test = make_corpus(root / "corpus", settings)
    cache = root / "pretrained"
    results = {"settings": {"symbols": settings.symbols, "n_train": settings.n_train, "n_test": settings.n_test, "seeds": list(settings.seeds)}}

    if args.only in (None, "decoder_eval"):
        t0 = time.time()
        sig = learning_signal(train, test, settings, cache)
        print(f"\ncontrastive loss per term: chance {sig.chance:.3f}, final {', '.join(f'{v:.3f}' for v in sig.final_losses)}")
        print(f"{'decoder':<10} {'pretrained':>11} {'random':>8}   (median test accuracy)")
        for kind in ("ctc", "attention"):
            print(f"{kind:<10} {sig.median(kind, 'pretrained'):>11.3f} {sig.median(kind, 'random'):>8.3f}")
        print(f"[{(time.time() - t0) / 60:.1f} min]")
        results["decoder_eval"] = dataclasses.asdict(sig)

    if args.only in (None, "semi_supervised"):
        t0 = time.time()
        trend = semi_supervised_trend(train, test, settings, cache)
        print(f"\n{trend.fraction:.0%} labels, median test accuracy: pretrained+finetune {trend.median('pretrained'):.3f}, scratch {trend.median('scratch'):.3f}")
        print(f"[{(time.time() - t0) / 60:.1f} min]")
        results["semi_supervised"] = dataclasses.asdict(trend)

    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(results, indent=1))


if __name__ == "__main__":
    main()
