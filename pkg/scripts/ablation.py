"""Instance-mapping x projection-head ablation at desk scale.

Pretrains one encoder per (mapping, head) cell and scores it with a CTC
decoder on top of the frozen encoder. One seed per cell by default; expect a
few minutes per cell on a single CPU core.

    python scripts/ablation.py --root runs/desk --mappings all_to_instance window_to_instance --heads none mlp_per_frame
"""

import argparse
import dataclasses
import json
import logging
import time
from pathlib import Path

from seqclr.config import DecoderConfig
from seqclr.contrastive import MappingChoice
from seqclr.desk import DeskSettings, final_loss, make_corpus
from seqclr.training import decoder_eval, pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--root", default="runs/desk")
    ap.add_argument("--mappings", nargs="+", default=["all_to_instance", "window_to_instance", "frame_to_instance"])
    ap.add_argument("--heads", nargs="+", default=["none", "mlp_per_frame", "bilstm"])
    ap.add_argument("--num-instances", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    settings = DeskSettings()
    train, test = make_corpus(Path(args.root) / "corpus", settings)
    cfg = settings.config_for_seed(args.seed)
    rows = []
    for kind in args.mappings:
        mapping = MappingChoice(kind, args.num_instances if kind == "window_to_instance" else 1)
        for head in args.heads:
            t0 = time.time()
            enc_cfg = dataclasses.replace(cfg.encoder, projection_head=head)
            ckpt = pretrain(train, enc_cfg, mapping, cfg.optimizer, cfg.protocol, args.seed, cfg.tau, cfg.pipeline)
            run = decoder_eval(
                ckpt, DecoderConfig("ctc", hidden=cfg.decoder.hidden), train, settings.decoder_eval_optimizer,
                settings.decoder_eval_protocol, seed=args.seed, symbols=settings.symbols, test=test,
            )
            rows.append({"mapping": kind, "head": head, "final_loss": final_loss(ckpt), "acc": run.report.acc, "ed1": run.report.ed1, "seconds": time.time() - t0})
            print(f"{kind:<20} {head:<14} loss {rows[-1]['final_loss']:.3f}  acc {run.report.acc:.3f}  ed1 {run.report.ed1:.3f}  [{rows[-1]['seconds']:.0f}s]", flush=True)
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
