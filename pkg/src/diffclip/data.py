"""Procedural shape images with templated captions.

Each sample is a coloured shape on a uniform-noise background, captioned
``"a {size} {color} {shape} at the {position}"``. Splits are made by
(shape, color) combination so held-out splits contain only combinations never
seen during training.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import EOT_ID, PAD_ID
from .serialize import load_tensor, save_tensor

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "white")
SIZES = ("small", "large")
POSITIONS = ("top", "bottom", "left", "right", "center")
COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
}
IMAGE_SIZE = 32
MAX_NOISE = 0.3
SPLITS = ("train", "val", "test")
TEMPLATE = "a {size} {color} {shape} at the {position}"


class DatasetError(ValueError):
    pass


class TokenizeError(ValueError):
    pass


@dataclass(frozen=True)
class SampleSpec:
    shape: str
    color: str
    size: str
    position: str
    noise: float = 0.0

    def __post_init__(self):
        for value, allowed in ((self.shape, SHAPES), (self.color, COLORS),
                               (self.size, SIZES), (self.position, POSITIONS)):
            if value not in allowed:
                raise DatasetError(f"{value!r} not one of {allowed}")
        if not 0.0 <= self.noise <= MAX_NOISE:
            raise DatasetError(f"noise amplitude {self.noise} outside [0, {MAX_NOISE}]")

    @property
    def caption(self) -> str:
        return TEMPLATE.format(size=self.size, color=self.color, shape=self.shape,
                               position=self.position)

    @property
    def combo(self) -> tuple[str, str]:
        return self.shape, self.color


def class_names() -> list[tuple[str, str]]:
    """The (shape, color) class set used for zero-shot and probe evaluation."""
    return list(itertools.product(SHAPES, COLORS))


def class_index(shape: str, color: str) -> int:
    return SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


# -- rendering -------------------------------------------------------------------

_CENTERS = {"top": (8, 16), "bottom": (23, 16), "left": (16, 8), "right": (16, 23),
            "center": (16, 16)}
_RADII = {"small": 3, "large": 6}


def shape_mask(spec: SampleSpec, side: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean ``[side, side]`` footprint of the shape (integer geometry)."""
    cy, cx = _CENTERS[spec.position]
    cy, cx = cy * side // IMAGE_SIZE, cx * side // IMAGE_SIZE
    r = _RADII[spec.size] * side // IMAGE_SIZE
    yy, xx = np.mgrid[0:side, 0:side]
    dy, dx = yy - cy, xx - cx
    if spec.shape == "circle":
        m = dy * dy + dx * dx <= r * r
    elif spec.shape == "square":
        m = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif spec.shape == "triangle":
        # apex up, base on row cy + r
        m = (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)
    else:
        arm = max(1, r // 3)
        m = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    return m


def render(spec: SampleSpec, seed: int, side: int = IMAGE_SIZE) -> np.ndarray:
    """``[3, side, side]`` image in [0, 1]; deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, 1.0, size=(3, side, side)) * spec.noise
    m = shape_mask(spec, side)
    for c, value in enumerate(COLOR_RGB[spec.color]):
        img[c][m] = value
    return np.clip(img, 0.0, 1.0)


# -- vocabulary and tokenisation ----------------------------------------------------

class Vocabulary:
    """Ordered token list; id 0 is PAD and id 1 is EOT."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != ["<pad>", "<eot>"]:
            raise DatasetError("vocabulary must start with <pad>, <eot>")
        if len(set(tokens)) != len(tokens):
            raise DatasetError("duplicate vocabulary tokens")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.ids

    @classmethod
    def default(cls) -> "Vocabulary":
        words = ["<pad>", "<eot>"]
        for w in TEMPLATE.replace("{", " ").replace("}", " ").split():
            if w in ("size", "color", "shape", "position"):
                group = {"size": SIZES, "color": COLORS, "shape": SHAPES,
                         "position": POSITIONS}[w]
                words.extend(g for g in group if g not in words)
            elif w not in words:
                words.append(w)
        return cls(words)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def tokenize(caption: str, vocab: Vocabulary, context_len: int) -> np.ndarray:
    words = caption.lower().split()
    if len(words) > context_len - 1:
        raise TokenizeError(f"{len(words)} words do not fit context {context_len} with EOT")
    unknown = [w for w in words if w not in vocab]
    if unknown:
        raise TokenizeError(f"unknown word(s): {', '.join(unknown)}")
    ids = np.full(context_len, PAD_ID, dtype=np.int64)
    ids[:len(words)] = [vocab.ids[w] for w in words]
    ids[len(words)] = EOT_ID
    return ids


def detokenize(ids, vocab: Vocabulary) -> str:
    out = []
    for i in np.asarray(ids).tolist():
        if i == EOT_ID:
            break
        out.append(vocab.tokens[i])
    return " ".join(out)


def tokenize_batch(captions: Sequence[str], vocab: Vocabulary, context_len: int) -> np.ndarray:
    return np.stack([tokenize(c, vocab, context_len) for c in captions])


# -- corpus ---------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray  # [N, 3, H, W]
    tokens: np.ndarray  # [N, L]

    def __post_init__(self):
        if len(self.images) != len(self.tokens) or len(self.images) < 1:
            raise DatasetError("batch needs N >= 1 aligned images and token rows")
        if not np.all((self.tokens == EOT_ID).sum(axis=1) == 1):
            raise DatasetError("every token row must contain exactly one EOT")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class Sample:
    id: int
    spec: SampleSpec
    split: str
    image_file: str


def assign_combos(fractions: Sequence[float], seed: int) -> dict[tuple[str, str], str]:
    """Map every (shape, color) combination to a split.

    Each split with a non-zero fraction gets at least one combination
    (when there are enough combinations), so held-out splits never share a
    combination with train.
    """
    combos = class_names()
    order = np.random.default_rng([seed, 1]).permutation(len(combos))
    live = [i for i, f in enumerate(fractions) if f > 0]
    counts = [0] * len(fractions)
    for i in live:
        counts[i] = int(round(fractions[i] * len(combos)))
    if len(live) <= len(combos):
        for i in live:
            counts[i] = max(counts[i], 1)
    # give any rounding surplus/deficit to the largest split
    big = max(live, key=lambda i: fractions[i])
    counts[big] += len(combos) - sum(counts)
    out = {}
    pos = 0
    for split_idx, c in enumerate(counts):
        for j in order[pos:pos + c]:
            out[combos[j]] = SPLITS[split_idx]
        pos += c
    return out


def sample_specs(n: int, seed: int) -> list[SampleSpec]:
    rng = np.random.default_rng([seed, 0])
    shp = rng.integers(len(SHAPES), size=n)
    col = rng.integers(len(COLORS), size=n)
    siz = rng.integers(len(SIZES), size=n)
    pos = rng.integers(len(POSITIONS), size=n)
    noise = rng.uniform(0.0, MAX_NOISE, size=n)
    return [SampleSpec(SHAPES[a], COLORS[b], SIZES[c], POSITIONS[d], float(e))
            for a, b, c, d, e in zip(shp, col, siz, pos, noise)]


def _image_seed(seed: int, idx: int) -> list[int]:
    return [seed, 2, idx]


def build_corpus(out_dir, n: int, fractions: Sequence[float] = (0.8, 0.1, 0.1),
                 seed: int = 0) -> Path:
    """Render ``n`` samples into ``out_dir`` (manifest.tsv, vocab.txt, images/)."""
    if n < 10:
        raise DatasetError("corpus needs n >= 10")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions {fractions} must be three non-negative values summing to 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    split_of = assign_combos(fractions, seed)
    lines = ["id\tcaption\tshape\tcolor\tsize\tposition\tnoise\tsplit\timage"]
    for i, spec in enumerate(sample_specs(n, seed)):
        fname = f"images/{i:06d}.dtns"
        save_tensor(out / fname, render(spec, _image_seed(seed, i)))
        lines.append("\t".join([str(i), spec.caption, spec.shape, spec.color, spec.size,
                                spec.position, repr(spec.noise), split_of[spec.combo], fname]))
    Vocabulary.default().save(out / "vocab.txt")
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def manifest_hash(out_dir) -> str:
    return hashlib.sha256((Path(out_dir) / "manifest.tsv").read_bytes()).hexdigest()


class Corpus:
    """An on-disk dataset loaded into memory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.tsv"
        if not manifest.exists():
            raise FileNotFoundError(f"no manifest.tsv under {self.root}")
        self.vocab = Vocabulary.load(self.root / "vocab.txt")
        self.samples: list[Sample] = []
        rows = manifest.read_text(encoding="utf-8").splitlines()[1:]
        for row in rows:
            f = row.split("\t")
            spec = SampleSpec(f[2], f[3], f[4], f[5], float(f[6]))
            self.samples.append(Sample(int(f[0]), spec, f[7], f[8]))
        self._images: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def images(self) -> np.ndarray:
        if self._images is None:
            self._images = np.stack([load_tensor(self.root / s.image_file) for s in self.samples])
        return self._images

    def indices(self, split: str | None = None) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.samples) if split is None or s.split == split],
                        dtype=np.int64)

    def captions(self, idx) -> list[str]:
        return [self.samples[i].spec.caption for i in idx]

    def labels(self, idx) -> np.ndarray:
        return np.array([class_index(*self.samples[i].spec.combo) for i in idx], dtype=np.int64)

    def batch(self, idx, context_len: int) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.images[idx], tokenize_batch(self.captions(idx), self.vocab, context_len))
