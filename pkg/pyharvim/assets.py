"""
Bundled desk-scale assets: a 5x7 bitmap font for the glyph atlas and procedural toy corpora.
"""
import math
from typing import Dict

import numpy as np

from .tensor import SeededRng

# 7 rows by 5 columns, '#' is ink
FONT: Dict[str, tuple] = {
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    "D": ("###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "G": (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "I": (".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "J": ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"),
    "O": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
}

GLYPH_HEIGHT = 7
GLYPH_WIDTH = 5
TOY_CORPUS_SIZE = 20
TOY_IMAGE_SIDE = 32


def font_bitmap(char: str) -> np.ndarray:
    rows = FONT[char]
    return np.array([[1.0 if cell == "#" else 0.0 for cell in row] for row in rows])


def _textured_patch(rng: SeededRng, side: int) -> np.ndarray:
    rows, cols = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    frequency = rng.uniform(3.0, 8.0)
    angle = rng.uniform(0.0, math.pi)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    wave = np.sin(2.0 * math.pi * frequency * (math.cos(angle) * cols + math.sin(angle) * rows) + phase)
    across, down = rng.uniform(2.0, 5.0), rng.uniform(2.0, 5.0)
    checker = np.sign(np.sin(2.0 * math.pi * across * cols) * np.sin(2.0 * math.pi * down * rows))
    grain = rng.normal((side, side), 0.08).astype(np.float64)
    return 0.5 + 0.22 * wave + 0.12 * checker + grain


def _flat_patch(rng: SeededRng, side: int) -> np.ndarray:
    rows, cols = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    level = rng.uniform(0.3, 0.7)
    return level + 0.05 * rng.uniform(-1.0, 1.0) * rows + 0.05 * rng.uniform(-1.0, 1.0) * cols


def half_textured_image(side: int, rng: SeededRng, textured: str = "right") -> np.ndarray:
    """ One flat half and one detail-rich half; textured is one of left/right/top/bottom """
    rows, cols = np.mgrid[0:side, 0:side]
    regions = {
        "left": cols < side // 2,
        "right": cols >= side // 2,
        "top": rows < side // 2,
        "bottom": rows >= side // 2,
    }
    if textured not in regions:
        raise ValueError(f"unknown textured half {textured!r}")
    image = np.where(regions[textured], _textured_patch(rng, side), _flat_patch(rng, side))
    return np.clip(image, 0.0, 1.0).reshape(-1)


def toy_corpus(count: int = TOY_CORPUS_SIZE, side: int = TOY_IMAGE_SIDE, seed: int = 0) -> np.ndarray:
    """
    Procedural grayscale images in [0, 1], one flattened image per row. Each image mixes a
    flat region with a textured one so watermark placement matters.
    """
    images = []
    for index in range(count):
        rng = SeededRng(seed, 1).spawn(index)
        halves = ("left", "right", "top", "bottom")
        images.append(half_textured_image(side, rng, halves[int(rng.integers(0, len(halves)))]))
    return np.stack(images) if images else np.zeros((0, side * side))


def two_moons(rng: SeededRng, count: int, noise: float = 0.1) -> np.ndarray:
    """ Classic 2-D two-moons toy density """
    outer = count // 2
    inner = count - outer
    outer_angle = np.linspace(0.0, math.pi, outer)
    inner_angle = np.linspace(0.0, math.pi, inner)
    points = np.concatenate(
        [
            np.stack([np.cos(outer_angle), np.sin(outer_angle)], axis=1),
            np.stack([1.0 - np.cos(inner_angle), 0.5 - np.sin(inner_angle)], axis=1),
        ]
    )
    points = points + rng.normal(points.shape, noise).astype(np.float64)
    return points[rng.permutation(count)]
