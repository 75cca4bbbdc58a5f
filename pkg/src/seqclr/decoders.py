"""CTC and attention text decoders."""

from __future__ import annotations

import warnings
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .data import BLANK, EOW, START, Charset

DECODER_KINDS = ("ctc", "attention")
MAX_DECODE_LEN = 25
_LOG_ZERO = -1e30


# ---------------------------------------------------------------- CTC


def ctc_collapse(path: Sequence, blank="-"):
    """Merge consecutive repeats, then drop blanks. Works on strings or id lists."""
    out = []
    prev = object()
    for c in path:
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return "".join(out) if isinstance(path, str) else out


def ctc_min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss_from_log_probs(
    log_probs: torch.Tensor,
    targets: Sequence[Sequence[int]],
    blank: int = 0,
    input_lengths: Sequence[int] | None = None,
) -> torch.Tensor:
    """Negative log-likelihood of each target under per-frame log-probabilities.

    ``log_probs`` is ``N x T x C``. Returns a length-N tensor; infeasible
    targets get ``+inf``. Forward recursion in log space over the
    blank-interleaved target ``l'`` of length ``2L + 1``.
    """
    n, T, _ = log_probs.shape
    lengths = list(input_lengths) if input_lengths is not None else [T] * n
    L = max((len(t) for t in targets), default=0)
    S = 2 * L + 1
    ext = torch.full((n, S), blank, dtype=torch.long)
    allow_skip = torch.zeros(n, S, dtype=torch.bool)
    for i, tgt in enumerate(targets):
        for k, c in enumerate(tgt):
            ext[i, 2 * k + 1] = c
            if k > 0 and c != tgt[k - 1]:
                allow_skip[i, 2 * k + 1] = True
    ext = ext.to(log_probs.device)
    allow_skip = allow_skip.to(log_probs.device)
    # finite sentinel: -inf here would turn unreachable states into NaN gradients
    neg_inf = torch.tensor(_LOG_ZERO, dtype=log_probs.dtype, device=log_probs.device)

    emit = log_probs.gather(2, ext.unsqueeze(1).expand(n, T, S))  # N x T x S
    alpha = torch.full((n, S), _LOG_ZERO, dtype=log_probs.dtype, device=log_probs.device)
    alpha[:, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 1] = emit[:, 0, 1]
    alphas = [alpha]
    for t in range(1, T):
        prev = alphas[-1]
        shift1 = torch.cat([neg_inf.expand(n, 1), prev[:, :-1]], dim=1)
        shift2 = torch.cat([neg_inf.expand(n, 2), prev[:, :-2]], dim=1)[:, :S]
        shift2 = torch.where(allow_skip, shift2, neg_inf)
        alphas.append(torch.logsumexp(torch.stack([prev, shift1, shift2]), dim=0) + emit[:, t])

    out = []
    for i, tgt in enumerate(targets):
        Ti = lengths[i]
        if ctc_min_frames(tgt) > Ti:
            out.append(torch.tensor(float("inf"), dtype=log_probs.dtype, device=log_probs.device))
            continue
        a = alphas[Ti - 1][i]
        last = 2 * len(tgt)
        ends = a[last] if last == 0 else torch.logsumexp(a[[last - 1, last]], dim=0)
        out.append(-ends)
    return torch.stack(out)


class CTCDecoder(nn.Module):
    """A fully connected layer from frames to ``|symbols| + 1`` logits (blank = id 0)."""

    kind = "ctc"

    def __init__(self, in_dim: int, charset: Charset):
        super().__init__()
        if charset.specials != (BLANK,):
            raise ValueError("CTC charset must have exactly the blank special")
        self.charset = charset
        self.fc = nn.Linear(in_dim, len(charset))

    @property
    def blank(self) -> int:
        return self.charset.index_of(BLANK)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.fc(frames)

    def loss(self, frames: torch.Tensor, texts: Sequence[str], reduction: str = "mean") -> torch.Tensor:
        log_probs = F.log_softmax(self(frames), dim=-1)
        targets = [self.charset.encode(t) for t in texts]
        losses = ctc_loss_from_log_probs(log_probs, targets, self.blank)
        bad = ~torch.isfinite(losses)
        if bad.any():
            warnings.warn(f"{int(bad.sum())} infeasible CTC target(s) skipped", RuntimeWarning, stacklevel=2)
            losses = losses[~bad]
        if reduction == "none":
            return losses
        if losses.numel() == 0:
            return frames.sum() * 0.0
        return losses.mean() if reduction == "mean" else losses.sum()

    @torch.no_grad()
    def decode(self, frames: torch.Tensor) -> list[str]:
        # argmax returns the first maximal index, i.e. ties go to the lowest id
        best = self(frames).argmax(dim=-1)
        return [self.charset.decode(ctc_collapse(row.tolist(), self.blank)) for row in best]


def ctc_loss(frames: torch.Tensor, target: str, decoder: CTCDecoder) -> torch.Tensor:
    """Single-sample CTC loss for a ``T x F`` feature map (``+inf`` if infeasible)."""
    ids = decoder.charset.encode(target)
    if ctc_min_frames(ids) > frames.shape[0]:
        warnings.warn(f"target of length {len(ids)} cannot fit {frames.shape[0]} frames", RuntimeWarning, stacklevel=2)
    log_probs = F.log_softmax(decoder(frames.unsqueeze(0)), dim=-1)
    return ctc_loss_from_log_probs(log_probs, [ids], decoder.blank)[0]


def ctc_greedy_decode(frames: torch.Tensor, decoder: CTCDecoder) -> str:
    return decoder.decode(frames.unsqueeze(0))[0]


# ---------------------------------------------------------------- attention


class AttentionDecoder(nn.Module):
    """Additive-attention LSTM decoder.

    e_t = a^T tanh(W s + V_att f_t + b); alpha = softmax(e); g = sum alpha_t f_t;
    (x, s) = LSTM(s, [g, onehot(y_prev)]); y = softmax(W0 x + b0).
    """

    kind = "attention"

    def __init__(self, in_dim: int, charset: Charset, hidden: int = 256, attn_dim: int | None = None):
        super().__init__()
        if charset.specials != (START, EOW):
            raise ValueError("attention charset must have specials ([S], [EOW])")
        self.charset = charset
        self.hidden = hidden
        attn_dim = attn_dim or hidden
        self.n_ids = len(charset)
        self.W = nn.Linear(hidden, attn_dim, bias=True)  # bias plays the role of b
        self.V_att = nn.Linear(in_dim, attn_dim, bias=False)
        self.a = nn.Linear(attn_dim, 1, bias=False)
        self.cell = nn.LSTMCell(in_dim + self.n_ids, hidden)
        self.out = nn.Linear(hidden, self.n_ids)
        mask = torch.zeros(self.n_ids)
        mask[charset.index_of(START)] = float("-inf")  # [S] is never emitted
        self.register_buffer("out_mask", mask, persistent=False)

    @property
    def start_id(self) -> int:
        return self.charset.index_of(START)

    @property
    def eow_id(self) -> int:
        return self.charset.index_of(EOW)

    def init_state(self, n: int, ref: torch.Tensor):
        z = ref.new_zeros(n, self.hidden)
        return z, z.clone()

    def step(self, frames: torch.Tensor, state, y_prev: torch.Tensor, proj_frames: torch.Tensor | None = None):
        """One decoding step. Returns (logits, new state, attention weights)."""
        s, c = state
        if proj_frames is None:
            proj_frames = self.V_att(frames)
        energies = self.a(torch.tanh(self.W(s).unsqueeze(1) + proj_frames)).squeeze(-1)  # N x T
        alpha = torch.softmax(energies, dim=-1)
        g = torch.bmm(alpha.unsqueeze(1), frames).squeeze(1)
        onehot = F.one_hot(y_prev, self.n_ids).to(frames.dtype)
        s, c = self.cell(torch.cat([g, onehot], dim=-1), (s, c))
        logits = self.out(s) + self.out_mask
        return logits, (s, c), alpha

    def forward(self, frames: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits ``N x L x n_ids`` for input ids ``N x L``."""
        n, L = inputs.shape
        state = self.init_state(n, frames)
        proj = self.V_att(frames)
        steps = []
        for t in range(L):
            logits, state, _ = self.step(frames, state, inputs[:, t], proj)
            steps.append(logits)
        return torch.stack(steps, dim=1)

    def _teacher_batch(self, texts: Sequence[str]):
        enc = [self.charset.encode(t) for t in texts]
        L = max(len(e) for e in enc) + 1
        inputs = torch.full((len(enc), L), self.eow_id, dtype=torch.long)
        targets = torch.full((len(enc), L), -100, dtype=torch.long)
        for i, e in enumerate(enc):
            seq_in = [self.start_id] + e
            seq_out = e + [self.eow_id]
            inputs[i, : len(seq_in)] = torch.tensor(seq_in)
            targets[i, : len(seq_out)] = torch.tensor(seq_out)
        return inputs, targets

    def loss(self, frames: torch.Tensor, texts: Sequence[str], reduction: str = "mean") -> torch.Tensor:
        """Sum over steps of the NLL of ``text + [EOW]``; averaged over the batch by default."""
        inputs, targets = self._teacher_batch(texts)
        logits = self(frames, inputs.to(frames.device))
        nll = F.cross_entropy(logits.transpose(1, 2), targets.to(frames.device), ignore_index=-100, reduction="none")
        per_sample = nll.sum(dim=1)
        if reduction == "none":
            return per_sample
        return per_sample.mean() if reduction == "mean" else per_sample.sum()

    @torch.no_grad()
    def decode(self, frames: torch.Tensor, max_len: int = MAX_DECODE_LEN) -> list[str]:
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        n = frames.shape[0]
        state = self.init_state(n, frames)
        proj = self.V_att(frames)
        y = torch.full((n,), self.start_id, dtype=torch.long, device=frames.device)
        done = torch.zeros(n, dtype=torch.bool, device=frames.device)
        out: list[list[int]] = [[] for _ in range(n)]
        for _ in range(max_len):
            logits, state, _ = self.step(frames, state, y, proj)
            y = logits.argmax(dim=-1)
            done = done | (y == self.eow_id)
            for i in torch.nonzero(~done).flatten().tolist():
                out[i].append(int(y[i]))
            if bool(done.all()):
                break
        return [self.charset.decode(ids) for ids in out]


def attention_step(frames: torch.Tensor, state, y_prev: torch.Tensor, decoder: AttentionDecoder):
    """(distribution over ids, new state, alpha) for one step."""
    logits, state, alpha = decoder.step(frames, state, y_prev)
    return torch.softmax(logits, dim=-1), state, alpha


def attention_decode(frames: torch.Tensor, decoder: AttentionDecoder, max_len: int = MAX_DECODE_LEN) -> str:
    return decoder.decode(frames.unsqueeze(0), max_len)[0]


def attention_loss(frames: torch.Tensor, target: str, decoder: AttentionDecoder) -> torch.Tensor:
    return decoder.loss(frames.unsqueeze(0), [target], reduction="sum")


def build_decoder(kind: str, in_dim: int, symbols: Sequence[str], hidden: int = 256, seed: int = 0) -> nn.Module:
    torch.manual_seed(seed)
    if kind == "ctc":
        return CTCDecoder(in_dim, Charset.for_ctc(symbols))
    if kind == "attention":
        return AttentionDecoder(in_dim, Charset.for_attention(symbols), hidden)
    raise ValueError(f"decoder must be one of {DECODER_KINDS}, got {kind!r}")
