"""Instance mapping and the symmetric NCE loss over aligned instance sets."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

MAPPINGS = ("all_to_instance", "window_to_instance", "frame_to_instance", "whole_map_flatten")
EPS = 1e-8


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class MappingChoice:
    kind: str = "window_to_instance"
    num_instances: int = 5  # T' for window_to_instance

    def __post_init__(self):
        if self.kind not in MAPPINGS:
            raise ValueError(f"mapping must be one of {MAPPINGS}, got {self.kind!r}")
        if self.num_instances < 1:
            raise ValueError(f"T' must be >= 1, got {self.num_instances}")


@dataclass
class InstanceSet:
    vectors: torch.Tensor  # M x F'
    image_index: torch.Tensor  # M
    instance_index: torch.Tensor  # M
    side: str

    def __len__(self) -> int:
        return self.vectors.shape[0]


def window_bounds(T: int, n: int) -> list[tuple[int, int]]:
    """Half-open frame windows of adaptive average pooling: [floor(jT/n), ceil((j+1)T/n))."""
    return [((j * T) // n, -((-(j + 1) * T) // n)) for j in range(n)]


def adaptive_pool_matrix(T: int, n: int, dtype=torch.float32) -> torch.Tensor:
    w = torch.zeros(n, T, dtype=dtype)
    for j, (lo, hi) in enumerate(window_bounds(T, n)):
        w[j, lo:hi] = 1.0 / (hi - lo)
    return w


def map_instances(frames: torch.Tensor, choice: MappingChoice) -> torch.Tensor:
    """m(.): ``(..., T, F)`` frames -> ``(..., T', F)`` instances (``T' = 1`` for flatten)."""
    if frames.shape[-2] < 1:
        raise ValueError("feature map has no frames")
    T = frames.shape[-2]
    if choice.kind == "all_to_instance":
        return frames.mean(dim=-2, keepdim=True)
    if choice.kind == "frame_to_instance":
        return frames
    if choice.kind == "whole_map_flatten":
        return frames.reshape(*frames.shape[:-2], 1, -1)
    n = choice.num_instances
    if n == 1:
        return frames.mean(dim=-2, keepdim=True)
    if n == T:
        return frames
    if n > T:
        raise ValueError(f"window mapping needs T' <= T, got T'={n}, T={T}")
    return adaptive_pool_matrix(T, n, frames.dtype).to(frames.device) @ frames


def instances_per_image(T: int, choice: MappingChoice) -> int:
    if choice.kind in ("all_to_instance", "whole_map_flatten"):
        return 1
    if choice.kind == "frame_to_instance":
        return T
    return choice.num_instances


def _flatten(instances: list[torch.Tensor], side: str) -> InstanceSet:
    vecs = torch.cat(instances, dim=0)
    img = torch.cat([torch.full((len(z),), i, dtype=torch.long) for i, z in enumerate(instances)])
    inst = torch.cat([torch.arange(len(z)) for z in instances])
    return InstanceSet(vecs, img, inst, side)


def assemble_sets(maps_a, maps_b, choice: MappingChoice) -> tuple[InstanceSet, InstanceSet]:
    """Collect the instances of a batch into two aligned sets.

    ``maps_a`` / ``maps_b`` are either ``N x T x F`` tensors or lists of
    per-image ``T_i x F`` tensors (variable-width mode).
    """
    if len(maps_a) != len(maps_b):
        raise AlignmentError(f"{len(maps_a)} maps on side a vs {len(maps_b)} on side b")
    za, zb = [], []
    for i, (pa, pb) in enumerate(zip(maps_a, maps_b)):
        if pa.shape != pb.shape:
            raise AlignmentError(f"image {i}: view shapes differ {tuple(pa.shape)} vs {tuple(pb.shape)}")
        za.append(map_instances(pa, choice))
        zb.append(map_instances(pb, choice))
    if choice.kind == "whole_map_flatten" and len({z.shape for z in za}) > 1:
        raise AlignmentError("whole_map_flatten needs a fixed frame count")
    return _flatten(za, "a"), _flatten(zb, "b")


def cosine_matrix(x: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    xn = x / x.norm(dim=-1, keepdim=True).clamp_min(eps)
    yn = y / y.norm(dim=-1, keepdim=True).clamp_min(eps)
    return xn @ yn.transpose(-1, -2)


def cosine(u: torch.Tensor, v: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return (u * v).sum(-1) / (u.norm(dim=-1).clamp_min(eps) * v.norm(dim=-1).clamp_min(eps))


def nce_term(anchor: torch.Tensor, positive: torch.Tensor, pool: torch.Tensor, tau: float, anchor_index: int) -> torch.Tensor:
    """-log softmax of sim(anchor, positive) against ``pool`` with the anchor itself removed.

    ``pool`` is an ``M x F`` tensor that contains the positive; ``anchor_index``
    is the anchor's row in ``pool``.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    keep = torch.ones(pool.shape[0], dtype=torch.bool)
    keep[anchor_index] = False
    sims = cosine(anchor.unsqueeze(0), pool[keep]) / tau
    return torch.logsumexp(sims, dim=0) - cosine(anchor, positive) / tau


def contrastive_loss(za: InstanceSet, zb: InstanceSet, tau: float = 0.5, reduction: str = "sum") -> torch.Tensor:
    """Symmetric NCE over the pooled set Z^a u Z^b.

    Other instances of the same image are negatives. ``reduction='mean'``
    divides the sum by the number of terms (2M).
    """
    if len(za) != len(zb):
        raise AlignmentError(f"|Z^a|={len(za)} != |Z^b|={len(zb)}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    m = len(za)
    z = torch.cat([za.vectors, zb.vectors], dim=0)
    if log.isEnabledFor(logging.DEBUG):
        n_zero = int((z.norm(dim=-1) < EPS).sum())
        if n_zero:
            log.debug("%d zero-norm instance(s); cosine is epsilon-guarded", n_zero)
    sims = cosine_matrix(z, z) / tau
    sims = sims.masked_fill(torch.eye(2 * m, dtype=torch.bool, device=z.device), float("-inf"))
    targets = torch.cat([torch.arange(m, 2 * m), torch.arange(0, m)]).to(z.device)
    terms = F.cross_entropy(sims, targets, reduction="none")
    if reduction == "sum":
        return terms.sum()
    if reduction == "mean":
        return terms.mean()
    if reduction == "none":
        return terms
    raise ValueError(f"unknown reduction {reduction!r}")


def chance_level(m: int) -> float:
    """Per-term loss when every similarity is equal: log(2M - 1)."""
    return math.log(2 * m - 1)


def loss_floor(m: int, tau: float) -> float:
    """Per-term loss with perfect positives and orthogonal negatives."""
    return math.log1p((2 * m - 2) * math.exp(-1.0 / tau))
