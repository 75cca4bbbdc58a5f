"""Command-line entry point: ``seqclr {render,pretrain,decoder-eval,finetune,eval}``.

Exit codes: 0 ok, 2 usage or configuration error, 3 state or compatibility
error (e.g. a checkpoint that does not match the configuration), 4 training
divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, DecoderConfig, ExperimentConfig, ProtocolSpec
from .data import Charset, DataError, Manifest, ConfigurationError, load_images, load_manifest, render_synthetic
from .metrics import dump_errors
from .training import Checkpoint, CheckpointError, TrainingDiverged, decoder_eval, evaluate_model, finetune, predict, pretrain
from .encoder import resolve_decoder_tap

log = logging.getLogger("seqclr")

EXIT_OK, EXIT_USAGE, EXIT_STATE, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    return ExperimentConfig.load(p)


def _manifest(path: str | None, cfg: ExperimentConfig, charset: bool = True) -> Manifest | None:
    if path is None:
        return None
    return load_manifest(path, Charset(tuple(cfg.symbols)) if charset else None)


def _load_checkpoint(path: str) -> Checkpoint:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def _write_json(path: str | Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _downstream(cfg: ExperimentConfig, phase: str, args) -> ProtocolSpec:
    kw = {f.name: getattr(cfg.downstream, f.name) for f in dataclasses.fields(ProtocolSpec)}
    kw["phase"] = phase
    kw["freeze_encoder"] = phase == "decoder_eval"
    if getattr(args, "iterations", None):
        kw["iterations"] = args.iterations
    return ProtocolSpec(**kw)


def _decoder_cfg(cfg: ExperimentConfig, kind: str) -> DecoderConfig:
    return dataclasses.replace(cfg.decoder, kind=kind)


# ---------------------------------------------------------------- commands


def cmd_render(args) -> int:
    if args.charset:
        symbols = Charset.from_file(args.charset).symbols
    elif args.symbols:
        symbols = tuple(dict.fromkeys(args.symbols))
    else:
        symbols = None
    if args.min_len < 1 or args.max_len < args.min_len:
        raise UsageError("need 1 <= --min-len <= --max-len")
    if args.num < 1:
        raise UsageError("--num must be positive")
    charset = Charset.for_ctc(symbols) if symbols else None
    m = render_synthetic(args.out, args.num, charset, (args.min_len, args.max_len), seed=args.seed)
    log.info("rendered %d images to %s", len(m), args.out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations:
        cfg.protocol = dataclasses.replace(cfg.protocol, iterations=args.iterations)
    manifest = load_manifest(args.data)  # labels are never read
    resume = _load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        if resume.encoder_config.to_dict() != cfg.encoder.to_dict():
            raise CheckpointError("resume checkpoint was trained with a different encoder configuration")
        if resume.iteration >= cfg.protocol.iterations:
            raise CheckpointError(f"checkpoint is already at iteration {resume.iteration} of {cfg.protocol.iterations}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    run_path = Path(args.run_log) if args.run_log else out.parent / "run.json"
    chance = []
    try:
        ckpt = pretrain(
            manifest, cfg.encoder, cfg.mapping, cfg.optimizer, cfg.protocol, cfg.seed, cfg.tau, cfg.pipeline,
            resume=resume, checkpoint_dir=args.checkpoint_dir, on_step=lambda r: chance.append(r.chance),
        )
    except TrainingDiverged as exc:
        _write_json(run_path, {"command": "pretrain", "config": cfg.to_dict(), "status": "diverged", "error": str(exc), "diagnostic_checkpoint": exc.checkpoint_path})
        raise
    ckpt.save(out)
    _write_json(run_path, {
        "command": "pretrain",
        "config": cfg.to_dict(),
        "status": "ok",
        "checkpoint": str(out),
        "start_iteration": resume.iteration if resume else 0,
        "iterations": ckpt.iteration,
        "loss": ckpt.history,
        "chance_level": chance[-1] if chance else None,
        "metrics": {"final_loss": ckpt.history[-1] if ckpt.history else None},
    })
    log.info("wrote %s and %s", out, run_path)
    return EXIT_OK


def _report(run, args, cfg: ExperimentConfig, command: str) -> None:
    run.report.to_json(args.report)
    if args.run_log:
        _write_json(args.run_log, {"command": command, "config": cfg.to_dict(), "loss": run.history, "metrics": run.report.to_dict()})


def cmd_decoder_eval(args) -> int:
    cfg = _load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    ckpt = _load_checkpoint(args.encoder)
    expected = cfg.encoder if args.config else None
    train = _manifest(args.data, cfg)
    run = decoder_eval(
        ckpt, _decoder_cfg(cfg, args.decoder), train, cfg.optimizer, _downstream(cfg, "decoder_eval", args), seed,
        symbols=cfg.symbols, val=_manifest(args.val_data, cfg), test=_manifest(args.test_data, cfg),
        pipeline=cfg.pipeline if args.full_augment else None, expected_encoder=expected,
    )
    log.info("encoder digest before %s after %s", run.report.config["encoder_digest"][:16], run.report.config["encoder_digest_after"][:16])
    _report(run, args, cfg, "decoder-eval")
    if args.save_model:
        run.checkpoint.save(args.save_model)
    log.info("acc %.4f ed1 %.4f", run.report.acc, run.report.ed1)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_config(args.config)
    ckpt = None if args.ckpt.lower() == "none" else _load_checkpoint(args.ckpt)
    if ckpt is not None and args.config and ckpt.encoder_config.to_dict() != cfg.encoder.to_dict():
        raise CheckpointError("checkpoint encoder does not match the configuration")
    if not 0.0 < args.fraction <= 1.0:
        raise UsageError("--fraction must be in (0, 1]")
    run = finetune(
        ckpt, _decoder_cfg(cfg, args.decoder), _manifest(args.data, cfg), args.fraction, args.seed, cfg.optimizer,
        _downstream(cfg, "finetune", args), encoder_config=cfg.encoder if ckpt is None else None, symbols=cfg.symbols,
        val=_manifest(args.val_data, cfg), test=_manifest(args.test_data, cfg),
    )
    _report(run, args, cfg, "finetune")
    if args.save_model:
        run.checkpoint.save(args.save_model)
    log.info("acc %.4f ed1 %.4f (fraction %.3g, %d labels)", run.report.acc, run.report.ed1, args.fraction, run.report.config["n_labeled"])
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.ckpt)
    if ckpt.decoder_config is None:
        raise CheckpointError("checkpoint has no decoder; save one with --save-model")
    if args.decoder and args.decoder != ckpt.decoder_config.kind:
        raise CheckpointError(f"checkpoint holds a {ckpt.decoder_config.kind} decoder, not {args.decoder}")
    encoder = ckpt.build_encoder()
    decoder = ckpt.build_decoder(encoder)
    manifest = load_manifest(args.data)
    images = load_images(manifest, encoder.config.in_channels)
    tap = resolve_decoder_tap(encoder.config, ckpt.decoder_config.features)
    report = evaluate_model(encoder, decoder, manifest, images, tap, ckpt.decoder_config.max_len)
    report.config = {"checkpoint": str(args.ckpt), "data": str(args.data), "decoder": ckpt.decoder_config.kind}
    report.to_json(args.report)
    if args.dump_errors:
        preds = predict(encoder, decoder, images, tap, max_len=ckpt.decoder_config.max_len)
        dump_errors(args.dump_errors, preds, [e.text for e in manifest.entries], [e.path for e in manifest.entries])
    log.info("acc %.4f ed1 %.4f cer %.4f", report.acc, report.ed1, report.cer)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqclr", description="Sequence-to-sequence contrastive pretraining for text recognition.")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render a synthetic word-image dataset")
    r.add_argument("--out", required=True)
    r.add_argument("--num", type=int, required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--charset", help="file whose characters form the symbol set")
    r.add_argument("--symbols", help="symbol set given inline (alternative to --charset)")
    r.add_argument("--min-len", type=int, default=3)
    r.add_argument("--max-len", type=int, default=8)
    r.set_defaults(fn=cmd_render)

    t = sub.add_parser("pretrain", help="self-supervised pretraining")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path; run.json goes next to it")
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--checkpoint-dir", help="also save checkpoints at the lr milestones")
    t.add_argument("--run-log", help="path of the run log (default: run.json beside --out)")
    t.set_defaults(fn=cmd_pretrain)

    def supervised(sp):
        sp.add_argument("--decoder", required=True, choices=["ctc", "attention"])
        sp.add_argument("--data", required=True)
        sp.add_argument("--report", required=True)
        sp.add_argument("--config")
        sp.add_argument("--val-data")
        sp.add_argument("--test-data")
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--save-model", help="save encoder and trained decoder to this checkpoint")
        sp.add_argument("--run-log")

    d = sub.add_parser("decoder-eval", help="train a decoder on a frozen encoder")
    d.add_argument("--encoder", required=True)
    d.add_argument("--seed", type=int)
    d.add_argument("--full-augment", action="store_true", help="use the configured pipeline instead of the light one")
    supervised(d)
    d.set_defaults(fn=cmd_decoder_eval)

    f = sub.add_parser("finetune", help="fine-tune on a label fraction (--ckpt none: supervised baseline)")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--fraction", type=float, default=1.0)
    f.add_argument("--seed", type=int, default=0)
    supervised(f)
    f.set_defaults(fn=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate a saved encoder + decoder")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--decoder", choices=["ctc", "attention"])
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--dump-errors", help="write per-sample predictions to this CSV")
    e.set_defaults(fn=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError, DataError, ConfigurationError, FileNotFoundError, ValueError) as exc:
        print(f"seqclr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, AssertionError) as exc:
        print(f"seqclr {args.command}: incompatible state: {exc}", file=sys.stderr)
        return EXIT_STATE
    except TrainingDiverged as exc:
        print(f"seqclr {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
