from __future__ import annotations

import logging

import numpy as np

from .datasets import Dataset

logger = logging.getLogger(__name__)

# Seven-segment glyphs: a top, b upper right, c lower right, d bottom, e lower left, f upper left, g middle.
SEGMENTS: dict[int, str] = {
    0: "abcdef",
    1: "bc",
    2: "abdeg",
    3: "abcdg",
    4: "bcfg",
    5: "acdfg",
    6: "acdefg",
    7: "abc",
    8: "abcdefg",
    9: "abcdfg",
}


def _segment_boxes(top: int, left: int, width: int, height: int, thick: int) -> dict[str, tuple[int, int, int, int]]:
    """(row0, row1, col0, col1) for each segment of a glyph anchored at (top, left)."""
    mid = top + height // 2
    bottom = top + height - 1
    right = left + width - 1
    return {
        "a": (top, top + thick, left, right + 1),
        "d": (bottom - thick + 1, bottom + 1, left, right + 1),
        "g": (mid - thick // 2, mid - thick // 2 + thick, left, right + 1),
        "f": (top, mid + 1, left, left + thick),
        "e": (mid, bottom + 1, left, left + thick),
        "b": (top, mid + 1, right - thick + 1, right + 1),
        "c": (mid, bottom + 1, right - thick + 1, right + 1),
    }


def render_digit(digit: int, rng: np.random.Generator, size: int = 16, noise: float = 0.15, dropout: float = 0.05) -> np.ndarray:
    """One ``(1, size, size)`` glyph with jitter, stroke variation, dropped segments and pixel noise."""
    canvas = np.zeros((size, size), dtype=np.float64)
    width = size // 2 + int(rng.integers(-1, 2))
    height = size - size // 4 + int(rng.integers(-1, 2))
    thick = int(rng.integers(1, 3))
    top = int(rng.integers(0, size - height + 1))
    left = int(rng.integers(0, size - width + 1))
    boxes = _segment_boxes(top, left, width, height, thick)
    for segment in SEGMENTS[digit]:
        if rng.random() < dropout:
            continue
        r0, r1, c0, c1 = boxes[segment]
        canvas[r0:r1, c0:c1] = np.maximum(canvas[r0:r1, c0:c1], rng.uniform(0.6, 1.0))
    canvas += rng.normal(0.0, noise, canvas.shape)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)[None, :, :]


def make_digits(count: int, seed: int, size: int = 16, noise: float = 0.15, dropout: float = 0.05) -> Dataset:
    """Balanced, shuffled synthetic digit set; identical for identical arguments."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    labels = rng.permutation(np.arange(count) % 10)
    images = np.stack([render_digit(int(d), rng, size, noise, dropout) for d in labels]) if count else np.zeros((0, 1, size, size))
    logger.info("rendered %d synthetic %dx%d digits", count, size, size)
    return Dataset(images, labels)
