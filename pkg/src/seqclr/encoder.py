"""Base encoder f(.) and projection heads g(.).

Feature maps travel batch-first as ``N x T x F`` tensors: frame ``t`` is the
``t``-th column of the backbone output, ordered left to right.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable

import torch
from torch import nn

BACKBONES = ("toy_cnn", "resnet29")
REPRESENTATIONS = ("V", "H")
PROJECTION_HEADS = ("none", "mlp_per_frame", "bilstm")
DECODER_FEATURES = ("auto", "V", "H", "HV")


@dataclass
class EncoderConfig:
    backbone: str = "toy_cnn"
    in_channels: int = 1
    sequence_modeling: bool = True
    representation: str = "H"
    projection_head: str = "none"
    # mlp_per_frame output width; per-direction hidden size of the bilstm head
    projected_dim: int = 128
    lstm_hidden: int = 256
    lstm_layers: int = 2
    toy_widths: tuple[int, ...] = (32, 64, 128, 128)
    resnet_width: int = 512
    seed: int = 0

    def __post_init__(self):
        self.toy_widths = tuple(int(w) for w in self.toy_widths)
        self.validate()

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}, got {self.representation!r}")
        if self.projection_head not in PROJECTION_HEADS:
            raise ValueError(f"projection_head must be one of {PROJECTION_HEADS}, got {self.projection_head!r}")
        if self.representation == "H" and not self.sequence_modeling:
            raise ValueError("representation 'H' requires sequence_modeling")
        if self.backbone == "toy_cnn" and len(self.toy_widths) != 4:
            raise ValueError("toy_widths needs exactly 4 entries")
        if min(self.projected_dim, self.lstm_hidden, self.lstm_layers, self.in_channels) < 1:
            raise ValueError("sizes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["toy_widths"] = list(self.toy_widths)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class SequentialFeatureMap:
    frames: torch.Tensor  # N x T x F
    tap: str

    @property
    def T(self) -> int:
        return self.frames.shape[-2]

    @property
    def F(self) -> int:
        return self.frames.shape[-1]


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------- backbones


def _conv_bn_relu(cin: int, cout: int, k=3, s=1, p=1) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, k, s, p, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class ToyCNN(nn.Module):
    """Four conv blocks; 32 x 100 input -> 1 x 26 output columns.

    Horizontal geometry of each layer is listed in ``horizontal_layers`` so the
    receptive field of every frame can be computed exactly.
    """

    input_height = 32

    def __init__(self, in_channels: int = 1, widths=(32, 64, 128, 128)):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.body = nn.Sequential(
            *_conv_bn_relu(in_channels, w1),
            nn.MaxPool2d(2, 2),  # 16 x 50
            *_conv_bn_relu(w1, w2),
            nn.MaxPool2d(2, 2),  # 8 x 25
            *_conv_bn_relu(w2, w3),
            nn.MaxPool2d((2, 2), (2, 1), (0, 1)),  # 4 x 26
            *_conv_bn_relu(w3, w4),
            nn.MaxPool2d((2, 1), (2, 1)),  # 2 x 26
            *_conv_bn_relu(w4, w4, k=(2, 1), p=0),  # 1 x 26
        )
        self.out_channels = w4

    # (kernel, stride, padding) along the width axis
    horizontal_layers = ((3, 1, 1), (2, 2, 0), (3, 1, 1), (2, 2, 0), (3, 1, 1), (2, 1, 1), (3, 1, 1), (1, 1, 0), (1, 1, 0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def horizontal_receptive_fields(layers: Iterable[tuple[int, int, int]], n_out: int, in_width: int) -> list[tuple[int, int]]:
    """Inclusive input-column range that can influence each output column."""
    layers = list(layers)
    ranges = []
    for t in range(n_out):
        lo, hi = t, t
        for k, s, p in reversed(layers):
            lo, hi = lo * s - p, hi * s - p + k - 1
        ranges.append((max(lo, 0), min(hi, in_width - 1)))
    return ranges


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, 1, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        residual = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + residual)


class ResNet29(nn.Module):
    """The 29-layer ResNet used by common scene-text benchmarks (blocks 1-2-5-3).

    32 x 100 input -> ``width`` x 1 x 26.
    """

    input_height = 32

    def __init__(self, in_channels: int = 1, width: int = 512):
        super().__init__()
        c = [width // 4, width // 2, width, width]
        self.stem = nn.Sequential(*_conv_bn_relu(in_channels, width // 16), *_conv_bn_relu(width // 16, width // 8))
        self.pool1 = nn.MaxPool2d(2, 2)
        self.layer1 = self._stage(width // 8, c[0], 1)
        self.conv1 = nn.Sequential(*_conv_bn_relu(c[0], c[0]))
        self.pool2 = nn.MaxPool2d(2, 2)
        self.layer2 = self._stage(c[0], c[1], 2)
        self.conv2 = nn.Sequential(*_conv_bn_relu(c[1], c[1]))
        self.pool3 = nn.MaxPool2d(2, (2, 1), (0, 1))
        self.layer3 = self._stage(c[1], c[2], 5)
        self.conv3 = nn.Sequential(*_conv_bn_relu(c[2], c[2]))
        self.layer4 = self._stage(c[2], c[3], 3)
        self.conv4 = nn.Sequential(
            *_conv_bn_relu(c[3], c[3], k=2, s=(2, 1), p=(0, 1)),
            *_conv_bn_relu(c[3], c[3], k=2, s=1, p=0),
        )
        self.out_channels = c[3]

    @staticmethod
    def _stage(cin: int, cout: int, blocks: int) -> nn.Sequential:
        return nn.Sequential(*[BasicBlock(cin if i == 0 else cout, cout) for i in range(blocks)])

    def forward(self, x):
        x = self.pool1(self.stem(x))
        x = self.pool2(self.conv1(self.layer1(x)))
        x = self.pool3(self.conv2(self.layer2(x)))
        x = self.conv3(self.layer3(x))
        return self.conv4(self.layer4(x))


# shape trace of ResNet29 on a 1 x 32 x 100 input, width 512
RESNET29_TRACE = {"F": 512, "T": 26}


# ---------------------------------------------------------------- sequence modeling & heads


class BiLSTM(nn.Module):
    def __init__(self, in_dim: int, hidden: int, layers: int = 1):
        super().__init__()
        self.rnn = nn.LSTM(in_dim, hidden, num_layers=layers, batch_first=True, bidirectional=True)
        self.out_dim = 2 * hidden

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.rnn(x)[0]


class ProjectionHead(nn.Module):
    """g(.): identity, a frame-wise MLP, or a BiLSTM. Preserves the frame count."""

    def __init__(self, kind: str, in_dim: int, projected_dim: int = 128):
        super().__init__()
        self.kind = kind
        if kind == "none":
            self.net = nn.Identity()
            self.out_dim = in_dim
        elif kind == "mlp_per_frame":
            self.net = nn.Sequential(nn.Linear(in_dim, in_dim), nn.ReLU(inplace=True), nn.Linear(in_dim, projected_dim))
            self.out_dim = projected_dim
        elif kind == "bilstm":
            self.net = BiLSTM(in_dim, projected_dim)
            self.out_dim = 2 * projected_dim
        else:
            raise ValueError(f"unknown projection head {kind!r}")

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        return self.net(r)


def project(r: SequentialFeatureMap, head: ProjectionHead) -> SequentialFeatureMap:
    if r.tap not in ("V", "H"):
        raise ValueError(f"projection expects tap V or H, got {r.tap}")
    return SequentialFeatureMap(head(r.frames), "P")


class SeqEncoder(nn.Module):
    """Backbone + map-to-sequence + optional BiLSTM.

    The transformation stage is an identity slot (``self.transform``).
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.transform = nn.Identity()
        if config.backbone == "toy_cnn":
            self.backbone = ToyCNN(config.in_channels, config.toy_widths)
        else:
            self.backbone = ResNet29(config.in_channels, config.resnet_width)
        self.visual_dim = self.backbone.out_channels
        self.sequence = BiLSTM(self.visual_dim, config.lstm_hidden, config.lstm_layers) if config.sequence_modeling else None
        self.contextual_dim = self.sequence.out_dim if self.sequence is not None else None

    def feature_dim(self, tap: str) -> int:
        if tap == "V":
            return self.visual_dim
        if tap == "H":
            return self.contextual_dim
        if tap == "HV":
            return self.contextual_dim + self.visual_dim
        raise ValueError(f"unknown tap {tap!r}")

    @property
    def representation_dim(self) -> int:
        return self.feature_dim(self.config.representation)

    def extract_visual(self, x: torch.Tensor) -> SequentialFeatureMap:
        if x.dim() != 4 or x.shape[2] != self.backbone.input_height:
            raise ShapeError(f"expected N x C x {self.backbone.input_height} x W input, got {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} channel(s), got {x.shape[1]}")
        conv = self.backbone(self.transform(x))  # N x F x 1 x T
        return SequentialFeatureMap(conv.squeeze(2).transpose(1, 2).contiguous(), "V")

    def model_sequence(self, v: SequentialFeatureMap, concat: bool = False) -> SequentialFeatureMap:
        if v.tap != "V":
            raise ValueError("sequence modeling consumes the visual map")
        if self.sequence is None:
            raise ValueError("encoder built without sequence modeling")
        h = self.sequence(v.frames)
        if concat:
            return SequentialFeatureMap(torch.cat([h, v.frames], dim=-1), "HV")
        return SequentialFeatureMap(h, "H")

    def forward(self, x: torch.Tensor, tap: str | None = None) -> SequentialFeatureMap:
        tap = tap or self.config.representation
        v = self.extract_visual(x)
        if tap == "V":
            return v
        return self.model_sequence(v, concat=(tap == "HV"))


def build_encoder(config: EncoderConfig) -> SeqEncoder:
    torch.manual_seed(config.seed)
    return SeqEncoder(config)


def build_head(config: EncoderConfig, in_dim: int) -> ProjectionHead:
    torch.manual_seed(config.seed + 1)
    return ProjectionHead(config.projection_head, in_dim, config.projected_dim)


def resolve_decoder_tap(config: EncoderConfig, features: str = "auto") -> str:
    if features not in DECODER_FEATURES:
        raise ValueError(f"decoder features must be one of {DECODER_FEATURES}")
    if features == "auto":
        return config.representation
    if features in ("H", "HV") and not config.sequence_modeling:
        raise ValueError(f"decoder features {features} need sequence_modeling")
    return features


def parameter_digest(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_frames(width: int = 100) -> int:
    """Frame count of the toy backbone for a given input width."""
    w = width
    for k, s, p in ToyCNN.horizontal_layers:
        w = math.floor((w + 2 * p - k) / s) + 1
    return w
