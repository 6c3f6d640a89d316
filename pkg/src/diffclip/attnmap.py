"""Query-conditioned attention heatmaps over image patches.

The map combines the last vision layer's class-token attention over patches
(for differential layers the effective ``A1 - lam*A2``, clamped at zero) with
how well each projected patch token matches the text query.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Vocabulary, tokenize
from .encoders import ModelWeights, encode_text, vision_tokens


def heatmap_from(cls_attention: np.ndarray, patch_cosine: np.ndarray) -> np.ndarray:
    """Combine head-averaged attention ``[P]`` with patch/query cosine ``[P]``.

    Cosines are mapped to [0, 1] before modulation; the result is scaled so its
    maximum is 1 (a map with no mass becomes all ones).
    """
    att = np.clip(np.asarray(cls_attention, dtype=np.float64), 0.0, None)
    sim = (1.0 + np.clip(np.asarray(patch_cosine, dtype=np.float64), -1.0, 1.0)) / 2.0
    heat = att * sim
    top = heat.max()
    if not top > 0:
        return np.ones_like(heat)
    return heat / top


def attention_map(model: ModelWeights, image, query: str, vocab: Vocabulary) -> np.ndarray:
    """``[g, g]`` heatmap in [0, 1] (g = image side / patch) for one image."""
    cfg = model.image_cfg
    tokens = tokenize(query, vocab, model.text_cfg.context_length)
    probe: list[dict] = []
    x = vision_tokens(model, np.asarray(image, dtype=np.float64), probe=probe)
    attn = probe[-1]["attn"][0]  # [h, N, N]
    cls_att = np.clip(attn[:, 0, 1:], 0.0, None).mean(axis=0)
    patches = x.data[0, 1:] @ model.params["visual.proj"].data
    patches /= np.linalg.norm(patches, axis=1, keepdims=True)
    text = encode_text(model, tokens[None]).data[0]
    g = cfg.image_size // cfg.patch_size
    return heatmap_from(cls_att, patches @ text).reshape(g, g)


def write_pgm(path, heat: np.ndarray, upscale: int = 1) -> None:
    """Binary greyscale PGM (P5, maxval 255)."""
    img = np.kron(np.asarray(heat), np.ones((upscale, upscale)))
    pix = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_csv(path, heat: np.ndarray) -> None:
    rows = [",".join(repr(float(v)) for v in row) for row in np.asarray(heat)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def export(model: ModelWeights, image, query: str, vocab: Vocabulary, out_prefix,
           upscale: int = 8) -> tuple[Path, Path, np.ndarray]:
    heat = attention_map(model, image, query, vocab)
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    pgm, csv = prefix.with_suffix(".pgm"), prefix.with_suffix(".csv")
    write_pgm(pgm, heat, upscale)
    write_csv(csv, heat)
    return pgm, csv, heat
