"""Sequence-preserving augmentations for word images.

Every operator keeps the left-to-right layout of the text: there is no flip,
no rotation, and horizontal cropping is limited to a couple of percent per
side. Images are float arrays in ``[0, 1]`` with layout ``C x H x W``; pixel
values quoted on the 0..255 scale (e.g. the contrast pivot 127) are rescaled.

Operator semantics
------------------
linear_contrast   ``v' = 127 + alpha * (v - 127)`` on the 0..255 scale.
gaussian_blur     Gaussian kernel with standard deviation ``sigma`` (pixels),
                  kernel size ``2 * ceil(3 sigma) + 1``, reflected borders.
sharpen           3x3 correlation with ``(1 - alpha) * I + alpha * K`` where
                  ``K = [[-1,-1,-1], [-1, 8 + lightness, -1], [-1,-1,-1]]``.
crop_vertical     remove ``top`` and ``bottom`` fractions of the height, then
                  resize back (bilinear).
crop_horizontal   same with ``left`` / ``right`` fractions of the width.
perspective       four corners moved inwards by ``|N(0, scale)|`` of the image
                  size (independently per coordinate); the quadrilateral is
                  warped back onto the full frame.
piecewise_affine  a 4x4 grid of control points, each displaced by
                  ``N(0, scale)`` of the image height/width; every grid cell is
                  split into two triangles and the displacement is affine on
                  each triangle. Borders use edge replication.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import cv2
import numpy as np

from .data import TextImage

OP_KINDS = (
    "linear_contrast",
    "gaussian_blur",
    "sharpen",
    "crop_vertical",
    "crop_horizontal",
    "perspective",
    "piecewise_affine",
)

BLUR_SIGMA_PSEUDOCODE = (0.5, 1.5)
BLUR_SIGMA_PROSE = (0.5, 1.0)


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    param_ranges: dict[str, tuple[float, float]]

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        for name, (lo, hi) in self.param_ranges.items():
            if lo > hi:
                raise ValueError(f"{self.kind}.{name}: empty range ({lo}, {hi})")


@dataclass(frozen=True)
class BoundOp:
    kind: str
    params: dict[str, Any]


def default_ops(blur_sigma: tuple[float, float] = BLUR_SIGMA_PSEUDOCODE) -> tuple[AugmentOp, ...]:
    return (
        AugmentOp("linear_contrast", {"alpha": (0.5, 1.0)}),
        AugmentOp("gaussian_blur", {"sigma": tuple(blur_sigma)}),
        AugmentOp("crop_vertical", {"top": (0.0, 0.4), "bottom": (0.0, 0.4)}),
        AugmentOp("crop_horizontal", {"left": (0.0, 0.02), "right": (0.0, 0.02)}),
        AugmentOp("sharpen", {"alpha": (0.0, 0.5), "lightness": (0.0, 0.5)}),
        AugmentOp("piecewise_affine", {"scale": (0.02, 0.03)}),
        AugmentOp("perspective", {"scale": (0.01, 0.02)}),
    )


@dataclass(frozen=True)
class PipelineSpec:
    ops: tuple[AugmentOp, ...] = field(default_factory=default_ops)
    min_ops: int = 1
    max_ops: int = 5
    resize_back: bool = True

    def __post_init__(self):
        if not 1 <= self.min_ops <= self.max_ops <= len(self.ops):
            raise ValueError(
                f"need 1 <= min_ops <= max_ops <= {len(self.ops)}, got {self.min_ops}, {self.max_ops}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ops"] = [{"kind": op.kind, "param_ranges": {k: list(v) for k, v in op.param_ranges.items()}} for op in self.ops]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineSpec":
        ops = tuple(
            AugmentOp(o["kind"], {k: (float(v[0]), float(v[1])) for k, v in o["param_ranges"].items()})
            for o in d["ops"]
        )
        return cls(ops, int(d.get("min_ops", 1)), int(d.get("max_ops", 5)), bool(d.get("resize_back", True)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PipelineSpec":
        return cls.from_dict(json.loads(text))


def light_pipeline() -> PipelineSpec:
    """Light cropping, linear contrast and Gaussian blur, for decoder training."""
    return PipelineSpec(
        ops=(
            AugmentOp("linear_contrast", {"alpha": (0.5, 1.0)}),
            AugmentOp("gaussian_blur", {"sigma": BLUR_SIGMA_PSEUDOCODE}),
            AugmentOp("crop_vertical", {"top": (0.0, 0.1), "bottom": (0.0, 0.1)}),
            AugmentOp("crop_horizontal", {"left": (0.0, 0.02), "right": (0.0, 0.02)}),
        ),
        min_ops=1,
        max_ops=3,
    )


# ---------------------------------------------------------------- sampling


def _sample_params(op: AugmentOp, rng: np.random.Generator) -> dict[str, Any]:
    params = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in op.param_ranges.items()}
    if op.kind == "perspective":
        params["jitter"] = np.abs(rng.normal(0.0, params["scale"], size=(4, 2))).tolist()
    elif op.kind == "piecewise_affine":
        params["jitter"] = rng.normal(0.0, params["scale"], size=(4, 4, 2)).tolist()
    return params


def sample_pipeline(spec: PipelineSpec, rng: np.random.Generator) -> list[BoundOp]:
    k = int(rng.integers(spec.min_ops, spec.max_ops + 1))
    chosen = rng.permutation(len(spec.ops))[:k]  # distinct ops in random order
    return [BoundOp(spec.ops[i].kind, _sample_params(spec.ops[i], rng)) for i in chosen]


# ---------------------------------------------------------------- operators


def _hwc(pixels: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pixels.transpose(1, 2, 0))


def _chw(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        img = img[:, :, None]
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def _crop_resize(pixels: np.ndarray, top: float, bottom: float, left: float, right: float) -> np.ndarray:
    _, h, w = pixels.shape
    t, b = int(round(top * h)), int(round(bottom * h))
    l, r = int(round(left * w)), int(round(right * w))
    # keep at least one row/column
    if t + b >= h:
        b = max(0, h - 1 - t)
    if l + r >= w:
        r = max(0, w - 1 - l)
    if t == b == l == r == 0:
        return pixels.copy()
    sub = _hwc(pixels[:, t : h - b, l : w - r])
    return _chw(cv2.resize(sub, (w, h), interpolation=cv2.INTER_LINEAR))


def _linear_contrast(pixels: np.ndarray, alpha: float) -> np.ndarray:
    pivot = 127.0 / 255.0
    # written so that alpha == 1 is bit-exact
    return alpha * pixels + (1.0 - alpha) * pivot


def _gaussian_blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return pixels.copy()
    k = 2 * int(math.ceil(3 * sigma)) + 1
    return _chw(cv2.GaussianBlur(_hwc(pixels), (k, k), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT_101))


def sharpen_kernel(alpha: float, lightness: float) -> np.ndarray:
    identity = np.zeros((3, 3), np.float32)
    identity[1, 1] = 1.0
    effect = -np.ones((3, 3), np.float32)
    effect[1, 1] = 8.0 + lightness
    return (1.0 - alpha) * identity + alpha * effect


def _sharpen(pixels: np.ndarray, alpha: float, lightness: float) -> np.ndarray:
    return _chw(cv2.filter2D(_hwc(pixels), -1, sharpen_kernel(alpha, lightness), borderType=cv2.BORDER_REFLECT_101))


def _perspective(pixels: np.ndarray, jitter) -> np.ndarray:
    _, h, w = pixels.shape
    j = np.asarray(jitter, np.float32)
    # corners tl, tr, br, bl; jitter pulls each one towards the interior
    rel = np.array(
        [
            [j[0, 0], j[0, 1]],
            [1 - j[1, 0], j[1, 1]],
            [1 - j[2, 0], 1 - j[2, 1]],
            [j[3, 0], 1 - j[3, 1]],
        ],
        np.float32,
    )
    src = rel * np.array([w - 1, h - 1], np.float32)
    dst = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], np.float32)
    m = cv2.getPerspectiveTransform(src, dst)
    out = cv2.warpPerspective(_hwc(pixels), m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    return _chw(out)


def piecewise_affine_map(h: int, w: int, jitter) -> tuple[np.ndarray, np.ndarray]:
    """Sampling maps (map_x, map_y) for a triangulated control-point grid."""
    d = np.asarray(jitter, np.float32) * np.array([w, h], np.float32)  # rows x cols x (dx, dy)
    rows, cols = d.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    gy = ys / max(h - 1, 1) * (rows - 1)
    gx = xs / max(w - 1, 1) * (cols - 1)
    i = np.minimum(gy.astype(int), rows - 2)
    j = np.minimum(gx.astype(int), cols - 2)
    v = (gy - i)[..., None]
    u = (gx - j)[..., None]
    d00, d01 = d[i, j], d[i, j + 1]
    d10, d11 = d[i + 1, j], d[i + 1, j + 1]
    lower = (u + v) <= 1.0
    disp = np.where(
        lower,
        d00 + u * (d01 - d00) + v * (d10 - d00),
        d11 + (1 - u) * (d10 - d11) + (1 - v) * (d01 - d11),
    )
    return (xs + disp[..., 0]).astype(np.float32), (ys + disp[..., 1]).astype(np.float32)


def _piecewise_affine(pixels: np.ndarray, jitter) -> np.ndarray:
    _, h, w = pixels.shape
    mx, my = piecewise_affine_map(h, w, jitter)
    out = cv2.remap(_hwc(pixels), mx, my, interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    return _chw(out)


def apply_pixels(pixels: np.ndarray, op: BoundOp) -> np.ndarray:
    p = op.params
    if op.kind == "linear_contrast":
        out = _linear_contrast(pixels, p["alpha"])
    elif op.kind == "gaussian_blur":
        out = _gaussian_blur(pixels, p["sigma"])
    elif op.kind == "sharpen":
        out = _sharpen(pixels, p["alpha"], p["lightness"])
    elif op.kind == "crop_vertical":
        out = _crop_resize(pixels, p["top"], p["bottom"], 0.0, 0.0)
    elif op.kind == "crop_horizontal":
        out = _crop_resize(pixels, 0.0, 0.0, p["left"], p["right"])
    elif op.kind == "perspective":
        out = _perspective(pixels, p["jitter"])
    elif op.kind == "piecewise_affine":
        out = _piecewise_affine(pixels, p["jitter"])
    else:
        raise ValueError(f"unknown augmentation kind {op.kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32, copy=False)


def apply_op(img: TextImage, op: BoundOp) -> TextImage:
    return TextImage(apply_pixels(img.pixels, op), img.width_px, img.label)


# ---------------------------------------------------------------- views


@dataclass
class AugmentedPair:
    view_a: TextImage
    view_b: TextImage
    source_index: int


def view_rng(seed: int, index: int, draw: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index, draw])


def augment_pixels(pixels: np.ndarray, spec: PipelineSpec, rng: np.random.Generator) -> np.ndarray:
    out = pixels
    for op in sample_pipeline(spec, rng):
        out = apply_pixels(out, op)
    return out if out is not pixels else pixels.copy()


def augment_pair(img: TextImage, seed: int, index: int, spec: PipelineSpec | None = None) -> AugmentedPair:
    spec = spec or PipelineSpec()
    a = augment_pixels(img.pixels, spec, view_rng(seed, index, 0))
    b = augment_pixels(img.pixels, spec, view_rng(seed, index, 1))
    return AugmentedPair(TextImage(a, img.width_px, img.label), TextImage(b, img.width_px, img.label), index)


def augment_batch(images: np.ndarray, spec: PipelineSpec, seed: int, indices, draw: int, epoch: int = 0) -> np.ndarray:
    """Augment a stacked N x C x H x W batch; item ``n`` uses stream (seed, epoch, indices[n], draw)."""
    return np.stack([augment_pixels(images[n], spec, view_rng(seed, int(i), draw, epoch)) for n, i in enumerate(indices)])
