"""Word-image datasets: charset, TSV manifests, synthetic rendering, subsets, batching."""

from __future__ import annotations

import hashlib
import json
import math
import os
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np
from PIL import Image, ImageDraw, ImageFont

IMAGE_HEIGHT = 32
IMAGE_WIDTH = 100

BLANK = "[blank]"
START = "[S]"
EOW = "[EOW]"

# 52 case-sensitive letters, 10 digits, 32 punctuation marks and space
DEFAULT_SYMBOLS = string.ascii_letters + string.digits + string.punctuation + " "
ALNUM_SYMBOLS = string.ascii_letters + string.digits


class DataError(Exception):
    """Raised for unreadable or inconsistent datasets."""


class ManifestError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CharsetViolation(DataError):
    def __init__(self, offenders: list[tuple[int, str, str]]):
        self.offenders = offenders
        shown = ", ".join(f"line {ln}: {bad!r} in {text!r}" for ln, text, bad in offenders[:10])
        more = f" (+{len(offenders) - 10} more)" if len(offenders) > 10 else ""
        super().__init__(f"{len(offenders)} transcription(s) outside the charset: {shown}{more}")


class ConfigurationError(Exception):
    pass


@dataclass(frozen=True)
class Charset:
    """Symbol inventory with reserved special tokens.

    Specials take ids ``0..len(specials)-1``; symbols follow contiguously.
    """

    symbols: tuple[str, ...]
    specials: tuple[str, ...] = ()

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in charset")
        if any(len(s) != 1 for s in self.symbols):
            raise ValueError("symbols must be single characters")
        if set(self.symbols) & set(self.specials):
            raise ValueError("specials collide with symbols")
        object.__setattr__(self, "_ids", {s: i for i, s in enumerate(self.specials + self.symbols)})

    @classmethod
    def for_ctc(cls, symbols: Sequence[str] = DEFAULT_SYMBOLS) -> "Charset":
        return cls(tuple(symbols), (BLANK,))

    @classmethod
    def for_attention(cls, symbols: Sequence[str] = DEFAULT_SYMBOLS) -> "Charset":
        return cls(tuple(symbols), (START, EOW))

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "Charset":
        text = Path(path).read_text(encoding="utf-8").rstrip("\n")
        return cls(tuple(dict.fromkeys(text)))

    def with_specials(self, specials: Sequence[str]) -> "Charset":
        return Charset(self.symbols, tuple(specials))

    def __len__(self) -> int:
        return len(self.specials) + len(self.symbols)

    def index_of(self, token: str) -> int:
        return self._ids[token]

    def token_of(self, idx: int) -> str:
        return (self.specials + self.symbols)[idx]

    @property
    def first_symbol_id(self) -> int:
        return len(self.specials)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._ids[c] for c in text]
        except KeyError as exc:
            raise DataError(f"symbol {exc.args[0]!r} not in charset") from None

    def decode(self, ids: Sequence[int]) -> str:
        table = self.specials + self.symbols
        n = len(self.specials)
        return "".join(table[i] for i in ids if i >= n)

    def outside(self, text: str) -> str:
        return "".join(dict.fromkeys(c for c in text if c not in self._ids or c in self.specials))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    text: str


@dataclass(frozen=True)
class Manifest:
    root: Path
    entries: tuple[ManifestEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, i: int) -> Path:
        return self.root / self.entries[i].path

    def select(self, indices: Sequence[int]) -> "Manifest":
        return Manifest(self.root, tuple(self.entries[i] for i in indices))


@dataclass
class TextImage:
    pixels: np.ndarray  # C x H x W, float32 in [0, 1]
    width_px: int
    label: str | None = None


@dataclass
class LabeledBatch:
    images: np.ndarray  # N x C x H x W
    texts: list[str]
    indices: np.ndarray
    labels: list[list[int]] | None = None

    def __len__(self) -> int:
        return len(self.indices)


def load_manifest(path: str | os.PathLike, charset: Charset | None = None) -> Manifest:
    root = Path(path)
    tsv = root / "labels.tsv"
    if not tsv.is_file():
        raise DataError(f"missing {tsv}")
    entries = []
    offenders = []
    with open(tsv, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line:
                continue
            if "\t" not in line:
                raise ManifestError("expected '<relpath>\\t<transcription>'", lineno)
            rel, text = line.split("\t", 1)
            if not rel:
                raise ManifestError("empty image path", lineno)
            if not (root / rel).is_file():
                raise ManifestError(f"image not found: {rel}", lineno)
            if charset is not None:
                bad = charset.outside(text)
                if bad:
                    offenders.append((lineno, text, bad))
            entries.append(ManifestEntry(rel, text))
    if offenders:
        raise CharsetViolation(offenders)
    return Manifest(root, tuple(entries))


def write_manifest(manifest: Manifest, root: str | os.PathLike | None = None) -> Path:
    root = Path(root) if root is not None else manifest.root
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for e in manifest.entries:
            fh.write(f"{e.path}\t{e.text}\n")
    return root / "labels.tsv"


# ---------------------------------------------------------------- images


def preprocess(img: np.ndarray, channels: int = 1) -> np.ndarray:
    """uint8 HxW or HxWx3 array -> C x 32 x 100 float32 in [0, 1]."""
    if img.ndim == 3 and channels == 1:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2GRAY)
    elif img.ndim == 2 and channels == 3:
        img = cv2.cvtColor(img, cv2.COLOR_GRAY2RGB)
    img = cv2.resize(img, (IMAGE_WIDTH, IMAGE_HEIGHT), interpolation=cv2.INTER_LINEAR)
    arr = img.astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def load_image(path: str | os.PathLike, channels: int = 1, label: str | None = None) -> TextImage:
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        raw = np.asarray(im)
    return TextImage(preprocess(raw, channels), raw.shape[1], label)


def load_images(manifest: Manifest, channels: int = 1) -> np.ndarray:
    """All images of a manifest, preprocessed, as an N x C x 32 x 100 array.

    Reads image paths only, never transcriptions.
    """
    out = np.empty((len(manifest), channels, IMAGE_HEIGHT, IMAGE_WIDTH), np.float32)
    for i in range(len(manifest)):
        out[i] = load_image(manifest.image_path(i), channels).pixels
    return out


# ---------------------------------------------------------------- rendering

_FONT_DIRS = (
    "/usr/share/fonts",
    "/usr/local/share/fonts",
    os.path.expanduser("~/.fonts"),
)


def find_fonts() -> list[str]:
    found: list[str] = []
    dirs = list(_FONT_DIRS)
    try:
        import matplotlib

        dirs.append(os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "fonts", "ttf"))
    except ImportError:
        pass
    for d in dirs:
        if os.path.isdir(d):
            for dirpath, _, files in os.walk(d):
                found += [os.path.join(dirpath, f) for f in files if f.lower().endswith((".ttf", ".otf"))]
    # matplotlib ships several DejaVu variants; symbol/display faces render glyph boxes
    found = [f for f in found if not any(k in os.path.basename(f) for k in ("STIX", "cmex", "cmsy", "cmmi", "Display"))]
    return sorted(set(found))


def _usable_fonts(fonts: Sequence[str]) -> list[str]:
    ok = []
    for f in fonts:
        try:
            ImageFont.truetype(f, 20)
        except OSError:
            continue
        ok.append(f)
    return ok


def _render_word(text: str, font_path: str, rng: np.random.Generator) -> Image.Image:
    size = int(rng.integers(22, 33))
    font = ImageFont.truetype(font_path, size)
    left, top, right, bottom = font.getbbox(text)
    tw, th = right - left, bottom - top
    pad_l, pad_r = (int(v) for v in rng.integers(1, 8, size=2))
    pad_t, pad_b = (int(v) for v in rng.integers(1, 6, size=2))
    w, h = max(tw, 1) + pad_l + pad_r, max(th, 1) + pad_t + pad_b
    bg = int(rng.integers(170, 256))
    fg = int(rng.integers(0, max(1, bg - 110)))
    im = Image.new("L", (w, h), bg)
    ImageDraw.Draw(im).text((pad_l - left, pad_t - top), text, fill=fg, font=font)
    arr = np.asarray(im).astype(np.float32)
    arr += rng.normal(0.0, rng.uniform(0.0, 6.0), arr.shape)
    return Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8), "L")


def render_synthetic(
    out_dir: str | os.PathLike,
    num: int,
    charset: Charset | None = None,
    length_range: tuple[int, int] = (3, 8),
    fonts: Sequence[str] | None = None,
    seed: int = 0,
) -> Manifest:
    """Render ``num`` random words to PNG files plus ``labels.tsv``.

    Item ``i`` depends only on ``(seed, i)``, so the output is reproducible and
    order-independent.
    """
    if num < 1:
        raise ValueError("num must be >= 1")
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid length range {length_range}")
    symbols = charset.symbols if charset is not None else tuple(ALNUM_SYMBOLS)
    symbols = tuple(s for s in symbols if not s.isspace())
    fonts = _usable_fonts(fonts if fonts is not None else find_fonts())
    if not fonts:
        raise ConfigurationError("no usable TrueType font found")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    width = len(str(num - 1))
    entries = []
    for i in range(num):
        rng = np.random.default_rng([seed, i])
        n = int(rng.integers(lo, hi + 1))
        text = "".join(symbols[j] for j in rng.integers(0, len(symbols), size=n))
        font = fonts[int(rng.integers(0, len(fonts)))]
        rel = f"images/{i:0{width}d}.png"
        _render_word(text, font, rng).save(out / rel, format="PNG")
        entries.append(ManifestEntry(rel, text))
    manifest = Manifest(out, tuple(entries))
    write_manifest(manifest)
    return manifest


# ---------------------------------------------------------------- subsets & batches


def subset_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = math.ceil(fraction * n - 1e-9)
    perm = np.random.default_rng([seed, n]).permutation(n)
    # prefixes of one permutation, so smaller fractions nest inside larger ones
    return np.sort(perm[:k])


def subset_labels(manifest: Manifest, fraction: float, seed: int) -> Manifest:
    if fraction == 1.0:
        return manifest
    return manifest.select(subset_indices(len(manifest), fraction, seed))


def subset_digest(indices: Sequence[int]) -> str:
    return hashlib.sha256(",".join(str(int(i)) for i in indices).encode()).hexdigest()[:16]


def write_subset_sidecar(path: str | os.PathLike, manifest: Manifest, fraction: float, seed: int) -> dict:
    idx = subset_indices(len(manifest), fraction, seed)
    record = {
        "root": str(manifest.root),
        "size": len(manifest),
        "fraction": fraction,
        "seed": seed,
        "indices": [int(i) for i in idx],
        "digest": subset_digest(idx),
    }
    Path(path).write_text(json.dumps(record, indent=1), encoding="utf-8")
    return record


def split_manifest(manifest: Manifest, heldout_fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    held = set(subset_indices(len(manifest), heldout_fraction, seed).tolist())
    keep = [i for i in range(len(manifest)) if i not in held]
    return manifest.select(keep), manifest.select(sorted(held))


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def iter_index_batches(n: int, batch_size: int, seed: int, epoch: int = 0) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if n == 0:
        raise DataError("empty manifest")
    perm = epoch_permutation(n, seed, epoch)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def make_batches(
    manifest: Manifest,
    batch_size: int,
    shuffle_seed: int,
    epoch: int = 0,
    images: np.ndarray | None = None,
    charset: Charset | None = None,
    channels: int = 1,
) -> Iterator[LabeledBatch]:
    """One epoch of labeled batches; the final short batch is kept."""
    if images is None:
        images = load_images(manifest, channels)
    for idx in iter_index_batches(len(manifest), batch_size, shuffle_seed, epoch):
        texts = [manifest.entries[i].text for i in idx]
        labels = [charset.encode(t) for t in texts] if charset is not None else None
        yield LabeledBatch(images[idx], texts, idx, labels)
