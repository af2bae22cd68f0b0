"""Privacy and text-quality metrics.

Image metrics compare an original against an adversarial reconstruction
(lower similarity means better privacy). Text metrics describe generated
captions. Images are read from and written to the plain PNM formats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .textenc import tokenize

PSNR_INF = "inf"
SSIM_WINDOW = 8
SSIM_STRIDE = 4
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


@dataclass(frozen=True)
class RasterImage:
    """8-bit image, samples shaped (height, width, channels)."""

    samples: np.ndarray

    def __post_init__(self):
        s = self.samples
        if s.ndim != 3 or s.shape[2] not in (1, 3):
            raise ValueError(f"samples must be (h, w, 1|3), got {s.shape}")
        if s.dtype != np.uint8:
            raise ValueError(f"samples must be uint8, got {s.dtype}")

    @classmethod
    def from_array(cls, arr) -> "RasterImage":
        a = np.asarray(arr)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.size and (a.min() < 0 or a.max() > 255):
            raise ValueError("samples outside [0, 255]")
        return cls(a.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return self.samples.shape[2]


def _pair(a: RasterImage, b: RasterImage) -> tuple[np.ndarray, np.ndarray]:
    if a.samples.shape != b.samples.shape:
        raise ValueError(f"image shapes differ: {a.samples.shape} vs {b.samples.shape}")
    return a.samples.astype(float), b.samples.astype(float)


def mse(a: RasterImage, b: RasterImage) -> float:
    x, y = _pair(a, b)
    return float(np.mean((x - y) ** 2))


def psnr_from_mse(err: float, max_value: float = 255.0) -> float | str:
    if err < 0:
        raise ValueError("mse must be non-negative")
    if err == 0:
        return PSNR_INF
    return 10.0 * math.log10(max_value**2 / err)


def psnr(a: RasterImage, b: RasterImage, max_value: float = 255.0) -> float | str:
    """Peak signal-to-noise ratio in dB; identical images give the ``"inf"`` sentinel."""
    return psnr_from_mse(mse(a, b), max_value)


def ssim(a: RasterImage, b: RasterImage) -> float:
    """Mean SSIM over 8x8 windows at stride 4, averaged across channels."""
    x, y = _pair(a, b)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[1]}x{x.shape[0]}")
    w = (SSIM_WINDOW, SSIM_WINDOW)
    # windows: (rows, cols, channels, 8, 8)
    wx = sliding_window_view(x, w, axis=(0, 1))[::SSIM_STRIDE, ::SSIM_STRIDE]
    wy = sliding_window_view(y, w, axis=(0, 1))[::SSIM_STRIDE, ::SSIM_STRIDE]
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = wx.var(axis=(-2, -1))
    vy = wy.var(axis=(-2, -1))
    cov = ((wx - mx[..., None, None]) * (wy - my[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def srra(
    reconstructed: Sequence[np.ndarray],
    gallery: Sequence[tuple[str, np.ndarray]],
    truth: Sequence[str],
) -> float:
    """Re-identification success rate in percent (lower is more private).

    A probe counts as re-identified when its maximum-inner-product gallery
    match carries its true identity; the earliest gallery entry wins ties.
    """
    if len(reconstructed) != len(truth):
        raise ValueError(f"{len(reconstructed)} reconstructions but {len(truth)} identities")
    if not reconstructed:
        raise ValueError("no reconstructions to score")
    if not gallery:
        raise ValueError("empty gallery")
    G = np.stack([np.asarray(v, dtype=float) for _, v in gallery])
    ids = [i for i, _ in gallery]
    hits = 0
    for probe, who in zip(reconstructed, truth):
        p = np.asarray(probe, dtype=float)
        if p.shape != (G.shape[1],):
            raise ValueError(f"probe dimension {p.shape} != gallery dimension {G.shape[1]}")
        hits += ids[int(np.argmax(G @ p))] == who
    return 100.0 * hits / len(truth)


# -- text ------------------------------------------------------------------------


@dataclass(frozen=True)
class Lexicons:
    descriptive: frozenset[str]
    markers: frozenset[str]
    entities: frozenset[str]

    @classmethod
    def from_dict(cls, d: dict) -> "Lexicons":
        return cls(*(frozenset(w.lower() for w in d[k]) for k in ("descriptive", "markers", "entities")))


def load_lexicons(path: str | Path | None = None) -> Lexicons:
    if path is None:
        raw = resources.files("rlvlm").joinpath("data/lexicons.json").read_text("utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    return Lexicons.from_dict(json.loads(raw))


@dataclass(frozen=True)
class TextStats:
    words: int
    unique_words: int
    detail_density: float
    entities: int
    modifiers: int


def text_stats(text: str, lexicons: Lexicons | None = None) -> TextStats:
    """Word counts plus lexicon-based detail density, entity and modifier counts.

    density = (descriptive tokens + subordinate markers) / all tokens
    """
    lex = lexicons or load_lexicons()
    tokens = tokenize(text)
    if not tokens:
        return TextStats(0, 0, 0.0, 0, 0)
    modifiers = sum(t in lex.descriptive for t in tokens)
    markers = sum(t in lex.markers for t in tokens)
    entities = sum(t in lex.entities for t in tokens)
    return TextStats(len(tokens), len(set(tokens)), (modifiers + markers) / len(tokens), entities, modifiers)


def semantic_similarity(text_a: str, text_b: str, embedder: Callable[[str], np.ndarray]) -> float:
    if not text_a.strip() or not text_b.strip():
        raise ValueError("semantic similarity of empty text")
    a = np.asarray(embedder(text_a), dtype=float)
    b = np.asarray(embedder(text_b), dtype=float)
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


# -- detection -------------------------------------------------------------------


@dataclass(frozen=True)
class DetectionGrid:
    """Per-cell object indicator (cells,) and class distribution (cells, classes).

    Set ``normalized=False`` for raw detector scores that need not sum to 1.
    """

    indicator: np.ndarray
    probs: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        ind = np.asarray(self.indicator)
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2 or ind.shape != (p.shape[0],):
            raise ValueError(f"indicator {ind.shape} and probs {p.shape} disagree")
        if not np.isin(ind, (0, 1)).all():
            raise ValueError("indicator entries must be 0 or 1")
        if self.normalized and not np.allclose(p.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise ValueError("class probabilities must sum to 1 per cell")


def detection_loss(truth: DetectionGrid, pred: DetectionGrid) -> float:
    """Sum over occupied cells (per ``truth``) of squared class-probability errors."""
    p = np.asarray(truth.probs, dtype=float)
    q = np.asarray(pred.probs, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"grid shapes differ: {p.shape} vs {q.shape}")
    occupied = np.asarray(truth.indicator, dtype=float)[:, None]
    return float(np.sum(occupied * (p - q) ** 2))


# -- PNM io ----------------------------------------------------------------------


def _pnm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(data[start:pos])
    return tokens, pos


def decode_pnm(data: bytes) -> RasterImage:
    """Parse P2/P3 (plain) or P5/P6 (binary) images with maxval <= 255."""
    header, pos = _pnm_tokens(data, 4)
    magic = header[0]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in header[1:])
    except ValueError as exc:
        raise ValueError("malformed PNM header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise ValueError(f"unsupported PNM geometry {w}x{h} maxval {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    n = w * h * channels
    if magic in (b"P2", b"P3"):
        values = data[pos:].split()
        if len(values) < n:
            raise ValueError(f"PNM has {len(values)} samples, expected {n}")
        arr = np.array([int(v) for v in values[:n]], dtype=np.int64)
    else:
        raw = data[pos + 1 : pos + 1 + n]
        if len(raw) != n:
            raise ValueError("truncated PNM raster")
        arr = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if arr.min() < 0 or arr.max() > maxval:
        raise ValueError("PNM sample exceeds maxval")
    if maxval != 255:
        arr = np.rint(arr * (255 / maxval)).astype(np.int64)
    return RasterImage(arr.reshape(h, w, channels).astype(np.uint8))


def read_pnm(path: str | Path) -> RasterImage:
    return decode_pnm(Path(path).read_bytes())


def encode_pnm(img: RasterImage) -> bytes:
    """Plain-text P2 (gray) or P3 (colour)."""
    magic = "P2" if img.channels == 1 else "P3"
    lines = [magic, f"{img.width} {img.height}", "255"]
    for row in img.samples.reshape(img.height, -1):
        lines.append(" ".join(str(int(v)) for v in row))
    return ("\n".join(lines) + "\n").encode("ascii")


def write_pnm(path: str | Path, img: RasterImage) -> None:
    Path(path).write_bytes(encode_pnm(img))
