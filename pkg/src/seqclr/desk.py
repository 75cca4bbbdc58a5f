"""Desk-scale experiments: a small synthetic corpus and the two qualitative comparisons.

``learning_signal`` pretrains the toy encoder, then trains CTC and attention
decoders on top of the frozen pretrained encoder and on top of a frozen
randomly initialised one. ``semi_supervised_trend`` fine-tunes from the
pretrained encoder and from scratch on the same 10% label subset.
"""

from __future__ import annotations

import dataclasses
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import DecoderConfig, ExperimentConfig, OptimizerSpec, ProtocolSpec, desk_config
from .contrastive import chance_level
from .data import Charset, Manifest, load_manifest, render_synthetic
from .encoder import build_encoder
from .training import Checkpoint, decoder_eval, finetune, pretrain

log = logging.getLogger(__name__)

DIGITS = "0123456789"


@dataclass
class DeskSettings:
    # digits keep the decoders learnable within a few hundred CPU steps
    symbols: str = DIGITS
    length_range: tuple[int, int] = (3, 5)
    n_train: int = 500
    n_test: int = 200
    train_seed: int = 1
    test_seed: int = 2
    seeds: tuple[int, ...] = (0, 1, 2)
    config: ExperimentConfig = field(default_factory=desk_config)
    # frozen features are cached, so a long decoder schedule stays cheap
    decoder_eval_protocol: ProtocolSpec = field(
        default_factory=lambda: ProtocolSpec.for_phase("decoder_eval", iterations=1000, augment=False, eval_every=250)
    )
    decoder_eval_optimizer: OptimizerSpec = field(default_factory=lambda: OptimizerSpec(lr_init=10.0))
    finetune_protocol: ProtocolSpec = field(
        default_factory=lambda: ProtocolSpec.for_phase("finetune", iterations=200, augment=True, eval_every=50)
    )
    finetune_optimizer: OptimizerSpec = field(default_factory=lambda: OptimizerSpec(lr_init=1.0))
    label_fraction: float = 0.1
    finetune_decoder: str = "ctc"

    def config_for_seed(self, seed: int) -> ExperimentConfig:
        cfg = dataclasses.replace(self.config)
        cfg.encoder = dataclasses.replace(cfg.encoder, seed=seed)
        cfg.seed = seed
        cfg.symbols = self.symbols
        return cfg


def make_corpus(root: str | Path, settings: DeskSettings | None = None) -> tuple[Manifest, Manifest]:
    """Render (or reuse) the train and test corpora under ``root``."""
    s = settings or DeskSettings()
    root = Path(root)
    charset = Charset.for_ctc(s.symbols)
    out = []
    for name, n, seed in (("train", s.n_train, s.train_seed), ("test", s.n_test, s.test_seed)):
        d = root / name
        if (d / "labels.tsv").exists():
            m = load_manifest(d)
            if len(m) == n:
                out.append(m)
                continue
        out.append(render_synthetic(d, n, charset, s.length_range, seed=seed))
    return out[0], out[1]


def pretrained_checkpoint(train: Manifest, seed: int, settings: DeskSettings | None = None, cache_dir: str | Path | None = None) -> Checkpoint:
    """Pretrain for one seed; reuses ``cache_dir/pretrain_<seed>.ckpt`` if present."""
    s = settings or DeskSettings()
    cfg = s.config_for_seed(seed)
    path = Path(cache_dir) / f"pretrain_{seed}.ckpt" if cache_dir is not None else None
    if path is not None and path.exists():
        return Checkpoint.load(path)
    t0 = time.time()
    ckpt = pretrain(train, cfg.encoder, cfg.mapping, cfg.optimizer, cfg.protocol, seed, cfg.tau, cfg.pipeline)
    log.info("pretrain seed %d: %.0fs, final loss %.4f", seed, time.time() - t0, ckpt.history[-1])
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        ckpt.save(path)
    return ckpt


def random_checkpoint(seed: int, settings: DeskSettings | None = None) -> Checkpoint:
    s = settings or DeskSettings()
    cfg = s.config_for_seed(seed)
    enc = build_encoder(cfg.encoder)
    return Checkpoint(encoder_config=cfg.encoder, encoder_state=enc.state_dict(), optimizer_spec=cfg.optimizer, seed=seed)


def final_loss(ckpt: Checkpoint, window: int = 20) -> float:
    """Mean per-term contrastive loss over the last ``window`` steps."""
    tail = ckpt.history[-window:]
    return sum(tail) / len(tail)


@dataclass
class LearningSignal:
    chance: float
    final_losses: list[float]
    # accuracy[decoder][init] -> one value per seed
    accuracy: dict[str, dict[str, list[float]]]

    def median(self, decoder: str, init: str) -> float:
        return statistics.median(self.accuracy[decoder][init])


def learning_signal(train: Manifest, test: Manifest, settings: DeskSettings | None = None, cache_dir: str | Path | None = None) -> LearningSignal:
    s = settings or DeskSettings()
    cfg = s.config
    batch = s.config.protocol.batch_size
    m = batch * cfg.mapping.num_instances if cfg.mapping.kind == "window_to_instance" else batch
    acc: dict[str, dict[str, list[float]]] = {k: {"pretrained": [], "random": []} for k in ("ctc", "attention")}
    losses = []
    for seed in s.seeds:
        pre = pretrained_checkpoint(train, seed, s, cache_dir)
        losses.append(final_loss(pre))
        rnd = random_checkpoint(seed, s)
        for kind in acc:
            for init, ckpt in (("pretrained", pre), ("random", rnd)):
                run = decoder_eval(
                    ckpt, DecoderConfig(kind=kind, hidden=cfg.decoder.hidden), train, s.decoder_eval_optimizer,
                    s.decoder_eval_protocol, seed=seed, symbols=s.symbols, test=test,
                )
                acc[kind][init].append(run.report.acc)
                log.info("decoder_eval seed %d %s %s: acc %.3f", seed, kind, init, run.report.acc)
    return LearningSignal(chance_level(m), losses, acc)


@dataclass
class SemiSupervisedTrend:
    fraction: float
    accuracy: dict[str, list[float]]

    def median(self, init: str) -> float:
        return statistics.median(self.accuracy[init])


def semi_supervised_trend(train: Manifest, test: Manifest, settings: DeskSettings | None = None, cache_dir: str | Path | None = None) -> SemiSupervisedTrend:
    s = settings or DeskSettings()
    acc: dict[str, list[float]] = {"pretrained": [], "scratch": []}
    for seed in s.seeds:
        cfg = s.config_for_seed(seed)
        pre = pretrained_checkpoint(train, seed, s, cache_dir)
        for init, ckpt in (("pretrained", pre), ("scratch", None)):
            run = finetune(
                ckpt, DecoderConfig(kind=s.finetune_decoder, hidden=cfg.decoder.hidden), train, s.label_fraction, seed,
                s.finetune_optimizer, s.finetune_protocol, encoder_config=cfg.encoder, symbols=s.symbols, test=test,
            )
            acc[init].append(run.report.acc)
            log.info("finetune seed %d %s: acc %.3f", seed, init, run.report.acc)
    return SemiSupervisedTrend(s.label_fraction, acc)
