"""Small synthetic multimodal corpora for offline runs.

Each item carries a text bit (which word pool its text is drawn from) and an
image bit (dark vs. bright picture). ``separable`` corpora set both bits to
the label; ``xor`` corpora label an item fake when exactly one bit is set, so
neither modality alone says anything about the label.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

POOLS = (
    ("harbor", "council", "budget", "rainfall", "museum", "orchestra", "library", "bridge", "election", "farmers",
     "hospital", "railway", "school", "festival", "report", "survey"),
    ("miracle", "shocking", "secret", "aliens", "banned", "exposed", "conspiracy", "cure", "hoax", "leaked",
     "unbelievable", "hidden", "viral", "celebrity", "scandal", "outrage"),
)
FILLER = ("the", "a", "of", "in", "today", "news", "people", "city", "says", "new", "after", "about")

KINDS = ("separable", "xor")


def _text(rng: np.random.Generator, bit: int, n_words: int = 12) -> tuple[str, str]:
    words = []
    for _ in range(n_words):
        pool = POOLS[bit] if rng.random() < 0.8 else FILLER
        words.append(pool[rng.integers(len(pool))])
    title = " ".join(words[:4]).capitalize()
    body = " ".join(words[4:]) + "."
    return title, body


def _image(rng: np.random.Generator, bit: int, size: int = 48) -> Image.Image:
    base = np.array([200.0, 170.0, 120.0]) if bit else np.array([40.0, 60.0, 110.0])
    noise = rng.normal(0.0, 25.0, (size, size, 3))
    arr = np.clip(base + noise, 0, 255).astype(np.uint8)
    return Image.fromarray(arr, "RGB")


def make_corpus(out_dir: str | Path, n: int = 200, kind: str = "separable", seed: int = 0) -> Path:
    """Write ``manifest.csv`` and ``images/*.png`` under ``out_dir``; return the manifest path."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    if kind == "xor":
        cells = np.arange(n) % 4
        rng.shuffle(cells)
        text_bits, image_bits = cells // 2, cells % 2
        labels = text_bits ^ image_bits
    else:
        labels = rng.permutation(np.arange(n) % 2)
        text_bits = image_bits = labels
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "title", "text", "image_url", "label"])
        for i in range(n):
            rid = f"syn{i:05d}"
            title, body = _text(rng, int(text_bits[i]))
            _image(rng, int(image_bits[i])).save(img_dir / f"{rid}.png")
            writer.writerow([rid, title, body, f"images/{rid}.png", "fake" if labels[i] else "real"])
    return manifest
