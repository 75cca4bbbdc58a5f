"""Pre-training, decoder evaluation and fine-tuning loops.

All runs are single-process and fully determined by their configuration and
seed: batch order comes from ``(seed, epoch)`` permutations and every
augmented view from the ``(seed, epoch, image, draw)`` stream.
"""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import __version__
from .augment import PipelineSpec, augment_batch, light_pipeline
from .config import DecoderConfig, OptimizerSpec, ProtocolSpec
from .contrastive import MappingChoice, assemble_sets, chance_level, contrastive_loss
from .data import Manifest, load_images, split_manifest, subset_digest, subset_indices
from .decoders import build_decoder
from .encoder import EncoderConfig, ProjectionHead, SeqEncoder, build_encoder, build_head, parameter_digest, resolve_decoder_tap
from .metrics import MetricsReport, evaluate

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "seqclr-checkpoint/1"


class CheckpointError(Exception):
    """Checkpoint unreadable or incompatible with the requested architecture."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint_path: str | None = None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


# ---------------------------------------------------------------- optimizer


class AdaDeltaW(torch.optim.Optimizer):
    """AdaDelta with decoupled weight decay (``p <- p - lr * wd * p``)."""

    def __init__(self, params, lr: float = 1.0, rho: float = 0.95, eps: float = 1e-6, weight_decay: float = 0.0):
        super().__init__(params, dict(lr=lr, rho=rho, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            lr, rho, eps, wd = group["lr"], group["rho"], group["eps"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["square_avg"] = torch.zeros_like(p)
                    state["acc_delta"] = torch.zeros_like(p)
                sq, acc = state["square_avg"], state["acc_delta"]
                g = p.grad
                sq.mul_(rho).addcmul_(g, g, value=1 - rho)
                delta = acc.add(eps).sqrt_().div_(sq.add(eps).sqrt_()).mul_(g)
                acc.mul_(rho).addcmul_(delta, delta, value=1 - rho)
                if wd:
                    p.mul_(1 - lr * wd)
                p.add_(delta, alpha=-lr)


def make_optimizer(params, spec: OptimizerSpec) -> AdaDeltaW:
    return AdaDeltaW(params, lr=spec.lr_init, rho=spec.decay_rate, eps=spec.eps, weight_decay=spec.weight_decay)


def step_optimizer(optimizer: torch.optim.Optimizer, spec: OptimizerSpec, iteration: int, total: int) -> float:
    """Schedule, clip and apply one update. Returns the pre-clip gradient norm."""
    params = [p for g in optimizer.param_groups for p in g["params"] if p.grad is not None]
    for p in params:
        if not torch.isfinite(p.grad).all():
            raise FloatingPointError("non-finite gradient")
    norm = float(torch.nn.utils.clip_grad_norm_(params, spec.grad_clip)) if params else 0.0
    lr = spec.lr_at(iteration, total)
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.step()
    return norm


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    encoder_state: dict[str, torch.Tensor]
    head_state: dict[str, torch.Tensor] = field(default_factory=dict)
    optimizer_spec: OptimizerSpec = field(default_factory=OptimizerSpec)
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    iteration: int = 0
    seed: int = 0
    decoder_config: DecoderConfig | None = None
    decoder_symbols: str | None = None
    decoder_state: dict[str, torch.Tensor] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    history: list[float] = field(default_factory=list, repr=False)

    def header(self) -> dict:
        h = {
            "format": CHECKPOINT_FORMAT,
            "version": __version__,
            "encoder_config": self.encoder_config.to_dict(),
            "optimizer_spec": _plain(self.optimizer_spec),
            "iteration": self.iteration,
            "rng": {"seed": self.seed},
            "extra": self.extra,
        }
        if self.decoder_config is not None:
            h["decoder_config"] = _plain(self.decoder_config)
            h["decoder_symbols"] = self.decoder_symbols
        return h

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, state in (("encoder.", self.encoder_state), ("head.", self.head_state), ("optim.", self.optimizer_state), ("decoder.", self.decoder_state)):
            for k in sorted(state):
                out[prefix + k] = state[k].detach().cpu().contiguous()
        if self.history:
            out["meta.history"] = torch.tensor(self.history, dtype=torch.float64)
        return out

    def save(self, path: str | os.PathLike) -> None:
        buf = io.BytesIO()
        torch.save({"header": json.dumps(self.header(), sort_keys=True), "tensors": self.tensors()}, buf)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        try:
            blob = torch.load(path, map_location="cpu", weights_only=True)
            header = json.loads(blob["header"])
            tensors = blob["tensors"]
        except (OSError, KeyError, TypeError, ValueError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: unknown checkpoint format {header.get('format')!r}")
        groups: dict[str, dict] = {"encoder": {}, "head": {}, "optim": {}, "decoder": {}, "meta": {}}
        for name, t in tensors.items():
            prefix, _, rest = name.partition(".")
            if prefix not in groups:
                raise CheckpointError(f"{path}: unexpected tensor {name!r}")
            groups[prefix][rest] = t
        try:
            enc = EncoderConfig(**header["encoder_config"])
            opt = OptimizerSpec(**header["optimizer_spec"])
            dec = DecoderConfig(**header["decoder_config"]) if "decoder_config" in header else None
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: invalid header: {exc}") from None
        return cls(
            encoder_config=enc,
            encoder_state=groups["encoder"],
            head_state=groups["head"],
            optimizer_spec=opt,
            optimizer_state=groups["optim"],
            iteration=int(header["iteration"]),
            seed=int(header["rng"]["seed"]),
            decoder_config=dec,
            decoder_symbols=header.get("decoder_symbols"),
            decoder_state=groups["decoder"],
            extra=header.get("extra", {}),
            history=groups["meta"]["history"].tolist() if "history" in groups["meta"] else [],
        )

    def build_encoder(self, expected: EncoderConfig | None = None) -> SeqEncoder:
        """Rebuild the encoder and load its weights; the projection head is not part of it."""
        if expected is not None and _arch(expected) != _arch(self.encoder_config):
            raise CheckpointError(f"architecture mismatch: checkpoint {_arch(self.encoder_config)} vs requested {_arch(expected)}")
        enc = SeqEncoder(self.encoder_config)
        _load_state(enc, self.encoder_state, "encoder")
        return enc

    def build_head(self) -> ProjectionHead:
        enc = SeqEncoder(self.encoder_config)
        head = ProjectionHead(self.encoder_config.projection_head, enc.representation_dim, self.encoder_config.projected_dim)
        _load_state(head, self.head_state, "head")
        return head

    def build_decoder(self, encoder: SeqEncoder) -> nn.Module:
        if self.decoder_config is None:
            raise CheckpointError("checkpoint carries no decoder")
        tap = resolve_decoder_tap(self.encoder_config, self.decoder_config.features)
        dec = build_decoder(self.decoder_config.kind, encoder.feature_dim(tap), self.decoder_symbols, self.decoder_config.hidden)
        _load_state(dec, self.decoder_state, "decoder")
        return dec


def _plain(obj) -> dict:
    from .config import _to_dict

    return _to_dict(obj)


def _arch(cfg: EncoderConfig) -> dict:
    d = cfg.to_dict()
    d.pop("seed", None)
    return d


def _load_state(module: nn.Module, state: dict, what: str) -> None:
    expected = module.state_dict()
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"{what} parameters do not match the architecture (missing {missing[:3]}, unexpected {unexpected[:3]})")
    for k, t in state.items():
        if tuple(t.shape) != tuple(expected[k].shape):
            raise CheckpointError(f"{what}.{k}: shape {tuple(t.shape)} vs expected {tuple(expected[k].shape)}")
    module.load_state_dict(state)


def _optimizer_state(opt: AdaDeltaW, named: list[tuple[str, nn.Parameter]]) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in named:
        for k, v in opt.state.get(p, {}).items():
            out[f"{name}/{k}"] = v.clone()
    return out


def _restore_optimizer(opt: AdaDeltaW, named: list[tuple[str, nn.Parameter]], state: dict[str, torch.Tensor]) -> None:
    for name, p in named:
        sub = {k.split("/", 1)[1]: v.clone() for k, v in state.items() if k.split("/", 1)[0] == name}
        if sub:
            opt.state[p] = sub


# ---------------------------------------------------------------- pre-training


@dataclass
class StepRecord:
    step: int
    loss: float
    chance: float
    lr: float
    grad_norm: float


def effective_batch_size(protocol: ProtocolSpec, mapping: MappingChoice) -> int:
    if protocol.auto_reduce_batch and mapping.kind == "frame_to_instance":
        return max(1, protocol.batch_size // 4)
    return protocol.batch_size


def _batch_for_step(n: int, batch_size: int, seed: int, step: int) -> tuple[int, np.ndarray]:
    per_epoch = math.ceil(n / batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return epoch, perm[pos * batch_size : (pos + 1) * batch_size]


def pretrain(
    manifest: Manifest,
    encoder_config: EncoderConfig,
    mapping: MappingChoice,
    optimizer: OptimizerSpec,
    protocol: ProtocolSpec,
    seed: int,
    tau: float = 0.5,
    pipeline: PipelineSpec | None = None,
    images: np.ndarray | None = None,
    resume: Checkpoint | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
) -> Checkpoint:
    """Self-supervised SeqCLR training on the images of ``manifest`` (labels unused)."""
    pipeline = pipeline or PipelineSpec()
    if images is None:
        images = load_images(manifest, encoder_config.in_channels)
    n = len(images)
    if n == 0:
        raise ValueError("empty manifest")
    batch_size = effective_batch_size(protocol, mapping)
    if batch_size != protocol.batch_size:
        log.info("frame_to_instance: batch size reduced %d -> %d", protocol.batch_size, batch_size)
    total = protocol.iterations

    torch.manual_seed(seed)
    encoder = build_encoder(encoder_config)
    head = build_head(encoder_config, encoder.representation_dim)
    named = [(f"encoder.{k}", p) for k, p in encoder.named_parameters()] + [(f"head.{k}", p) for k, p in head.named_parameters()]
    opt = make_optimizer([p for _, p in named], optimizer)
    start = 0
    history: list[float] = []
    if resume is not None:
        _load_state(encoder, resume.encoder_state, "encoder")
        _load_state(head, resume.head_state, "head")
        _restore_optimizer(opt, named, resume.optimizer_state)
        start = resume.iteration
        history = list(resume.history)
    encoder.train()
    head.train()

    def snapshot(it: int) -> Checkpoint:
        return Checkpoint(
            encoder_config=encoder_config,
            encoder_state={k: v.detach().clone() for k, v in encoder.state_dict().items()},
            head_state={k: v.detach().clone() for k, v in head.state_dict().items()},
            optimizer_spec=optimizer,
            optimizer_state=_optimizer_state(opt, named),
            iteration=it,
            seed=seed,
            extra={
                "phase": "pretrain",
                "mapping": {"kind": mapping.kind, "num_instances": mapping.num_instances},
                "tau": tau,
                "batch_size": batch_size,
                "iterations": total,
                "pipeline": pipeline.to_dict(),
            },
            history=list(history),
        )

    milestones = {int(math.ceil(m * total)) for m in optimizer.milestones}
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    for step in range(start, total):
        epoch, idx = _batch_for_step(n, batch_size, seed, step)
        xa = augment_batch(images[idx], pipeline, seed, idx, draw=0, epoch=epoch)
        xb = augment_batch(images[idx], pipeline, seed, idx, draw=1, epoch=epoch)
        x = torch.from_numpy(np.concatenate([xa, xb]))
        r = encoder(x).frames
        p = head(r)
        pa, pb = p[: len(idx)], p[len(idx) :]
        za, zb = assemble_sets(pa, pb, mapping)
        loss = contrastive_loss(za, zb, tau, reduction="mean")
        value = float(loss.detach())
        if not math.isfinite(value):
            _diverge(snapshot, step, checkpoint_dir, "non-finite contrastive loss")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        try:
            norm = step_optimizer(opt, optimizer, step, total)
        except FloatingPointError:
            _diverge(snapshot, step, checkpoint_dir, "non-finite gradient")
        history.append(value)
        rec = StepRecord(step, value, chance_level(len(za)), optimizer.lr_at(step, total), norm)
        if on_step is not None:
            on_step(rec)
        if protocol.log_every and step % protocol.log_every == 0:
            log.info("pretrain step %d loss %.4f (chance %.4f)", step, value, rec.chance)
        if checkpoint_dir is not None and (step + 1) in milestones:
            snapshot(step + 1).save(Path(checkpoint_dir) / f"step_{step + 1}.ckpt")
    return snapshot(total)


def _diverge(snapshot: Callable[[int], Checkpoint], step: int, checkpoint_dir, what: str):
    path = None
    if checkpoint_dir is not None:
        path = str(Path(checkpoint_dir) / f"diverged_{step}.ckpt")
        snapshot(step).save(path)
    raise TrainingDiverged(f"{what} at step {step}", path)


# ---------------------------------------------------------------- supervised protocols


@torch.no_grad()
def predict(encoder: SeqEncoder, decoder: nn.Module, images: np.ndarray, tap: str, batch_size: int = 128, max_len: int = 25) -> list[str]:
    was = encoder.training, decoder.training
    encoder.eval()
    decoder.eval()
    out: list[str] = []
    for s in range(0, len(images), batch_size):
        frames = encoder(torch.from_numpy(images[s : s + batch_size]), tap).frames
        out += decoder.decode(frames) if decoder.kind == "ctc" else decoder.decode(frames, max_len)
    encoder.train(was[0])
    decoder.train(was[1])
    return out


def evaluate_model(encoder, decoder, manifest: Manifest, images: np.ndarray, tap: str, max_len: int = 25) -> MetricsReport:
    preds = predict(encoder, decoder, images, tap, max_len=max_len)
    return evaluate(preds, [e.text for e in manifest.entries])


@dataclass
class SupervisedRun:
    report: MetricsReport
    encoder: SeqEncoder
    decoder: nn.Module
    history: list[float]
    checkpoint: Checkpoint


def _train_supervised(
    encoder: SeqEncoder,
    decoder_cfg: DecoderConfig,
    symbols: str,
    train: Manifest,
    val: Manifest,
    test: Manifest | None,
    optimizer: OptimizerSpec,
    protocol: ProtocolSpec,
    seed: int,
    freeze: bool,
    pipeline: PipelineSpec | None,
    extra: dict,
) -> SupervisedRun:
    channels = encoder.config.in_channels
    tap = resolve_decoder_tap(encoder.config, decoder_cfg.features)
    decoder = build_decoder(decoder_cfg.kind, encoder.feature_dim(tap), symbols, decoder_cfg.hidden, seed)
    train_imgs = load_images(train, channels)
    val_imgs = load_images(val, channels)
    texts = [e.text for e in train.entries]
    pipeline = pipeline if pipeline is not None else light_pipeline()

    if freeze:
        for p in encoder.parameters():
            p.requires_grad_(False)
        encoder.eval()
        params = list(decoder.parameters())
    else:
        encoder.train()
        params = list(encoder.parameters()) + list(decoder.parameters())
    decoder.train()
    opt = make_optimizer(params, optimizer)

    cached = None
    if freeze and not protocol.augment:
        with torch.no_grad():
            cached = torch.cat([encoder(torch.from_numpy(train_imgs[s : s + 256]), tap).frames for s in range(0, len(train_imgs), 256)])

    total = protocol.iterations
    best_acc, best_state, best_step = -1.0, None, -1
    history = []

    def checkpoint_best():
        nonlocal best_acc, best_state, best_step
        rep = evaluate_model(encoder, decoder, val, val_imgs, tap, decoder_cfg.max_len)
        if rep.acc > best_acc:
            best_acc, best_step = rep.acc, step + 1
            best_state = (copy.deepcopy(encoder.state_dict()) if not freeze else None, copy.deepcopy(decoder.state_dict()))

    torch.manual_seed(seed)
    step = -1
    for step in range(total):
        epoch, idx = _batch_for_step(len(train), protocol.batch_size, seed, step)
        batch_texts = [texts[i] for i in idx]
        if cached is not None:
            frames = cached[torch.from_numpy(idx)]
        else:
            x = train_imgs[idx]
            if protocol.augment:
                x = augment_batch(x, pipeline, seed, idx, draw=0, epoch=epoch)
            x = torch.from_numpy(x)
            if freeze:
                with torch.no_grad():
                    frames = encoder(x, tap).frames
            else:
                frames = encoder(x, tap).frames
        loss = decoder.loss(frames, batch_texts)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite decoder loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        try:
            step_optimizer(opt, optimizer, step, total)
        except FloatingPointError:
            raise TrainingDiverged(f"non-finite gradient at step {step}") from None
        history.append(float(loss.detach()))
        if protocol.log_every and step % protocol.log_every == 0:
            log.info("%s step %d loss %.4f", protocol.phase, step, history[-1])
        if protocol.eval_every and (step + 1) % protocol.eval_every == 0 and step + 1 < total:
            checkpoint_best()
    checkpoint_best()
    enc_state, dec_state = best_state
    if enc_state is not None:
        encoder.load_state_dict(enc_state)
    decoder.load_state_dict(dec_state)

    final = test if test is not None else val
    report = evaluate_model(encoder, decoder, final, val_imgs if test is None else load_images(test, channels), tap, decoder_cfg.max_len)
    report.config = dict(extra, best_step=best_step, val_acc=best_acc, evaluated_on="test" if test is not None else "val", decoder=_plain(decoder_cfg), seed=seed)
    ckpt = Checkpoint(
        encoder_config=encoder.config,
        encoder_state={k: v.detach().clone() for k, v in encoder.state_dict().items()},
        optimizer_spec=optimizer,
        iteration=total,
        seed=seed,
        decoder_config=decoder_cfg,
        decoder_symbols=symbols,
        decoder_state={k: v.detach().clone() for k, v in decoder.state_dict().items()},
        extra={"phase": protocol.phase},
    )
    return SupervisedRun(report, encoder, decoder, history, ckpt)


def _splits(manifest: Manifest, val: Manifest | None, protocol: ProtocolSpec, seed: int) -> tuple[Manifest, Manifest]:
    if val is not None:
        return manifest, val
    return split_manifest(manifest, protocol.val_fraction, seed)


def decoder_eval(
    encoder_ckpt: Checkpoint,
    decoder: DecoderConfig | str,
    manifest: Manifest,
    optimizer: OptimizerSpec,
    protocol: ProtocolSpec,
    seed: int = 0,
    symbols: str | None = None,
    val: Manifest | None = None,
    test: Manifest | None = None,
    pipeline: PipelineSpec | None = None,
    expected_encoder: EncoderConfig | None = None,
) -> SupervisedRun:
    """Train a decoder on top of the frozen encoder; the projection head is dropped."""
    if not protocol.freeze_encoder:
        raise ValueError("decoder evaluation needs a frozen encoder")
    dec_cfg = DecoderConfig(kind=decoder) if isinstance(decoder, str) else decoder
    encoder = encoder_ckpt.build_encoder(expected_encoder)
    before = parameter_digest(encoder)
    train, val = _splits(manifest, val, protocol, seed)
    symbols = symbols or _symbols_of(manifest)
    run = _train_supervised(encoder, dec_cfg, symbols, train, val, test, optimizer, protocol, seed, True, pipeline,
                            {"protocol": "decoder_eval", "encoder_digest": before})
    after = parameter_digest(run.encoder)
    if after != before:
        raise AssertionError("encoder parameters changed during decoder evaluation")
    run.report.config["encoder_digest_after"] = after
    log.info("encoder digest unchanged: %s", after[:16])
    return run


def finetune(
    encoder_ckpt: Checkpoint | None,
    decoder: DecoderConfig | str,
    manifest: Manifest,
    fraction: float,
    seed: int,
    optimizer: OptimizerSpec,
    protocol: ProtocolSpec,
    encoder_config: EncoderConfig | None = None,
    symbols: str | None = None,
    val: Manifest | None = None,
    test: Manifest | None = None,
    pipeline: PipelineSpec | None = None,
) -> SupervisedRun:
    """Train encoder and decoder on a seeded label fraction.

    With ``encoder_ckpt=None`` this is the supervised-from-scratch baseline
    (``encoder_config`` required).
    """
    dec_cfg = DecoderConfig(kind=decoder) if isinstance(decoder, str) else decoder
    if encoder_ckpt is not None:
        encoder = encoder_ckpt.build_encoder(encoder_config)
        init = "pretrained"
    else:
        if encoder_config is None:
            raise ValueError("encoder_config is required without a checkpoint")
        encoder = build_encoder(encoder_config)
        init = "scratch"
    pool, val = _splits(manifest, val, protocol, seed)
    idx = subset_indices(len(pool), fraction, seed) if fraction < 1.0 else np.arange(len(pool))
    train = pool.select(idx)
    symbols = symbols or _symbols_of(manifest)
    extra = {
        "protocol": "finetune",
        "init": init,
        "fraction": fraction,
        "n_labeled": len(train),
        "subset_digest": subset_digest(idx),
    }
    return _train_supervised(encoder, dec_cfg, symbols, train, val, test, optimizer, protocol, seed, False, pipeline, extra)


def _symbols_of(manifest: Manifest) -> str:
    from .data import ALNUM_SYMBOLS

    seen = set("".join(e.text for e in manifest.entries))
    extra = sorted(seen - set(ALNUM_SYMBOLS))
    return ALNUM_SYMBOLS + "".join(extra)
