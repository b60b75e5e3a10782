"""Test-problem generators on equidistant grids, plus CSV / PGM ingestion."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import as_histogram
from .errors import DegenerateHistogramError, InvalidInputError, ParseError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    """``points_per_axis**dimension`` equidistant points in the unit cube, endpoints included."""

    dimension: int
    points_per_axis: int

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise InvalidInputError(f"grid dimension must be 1 or 2, got {self.dimension}")
        if self.points_per_axis < 1:
            raise InvalidInputError("points_per_axis must be positive")

    @property
    def n(self):
        return self.points_per_axis ** self.dimension

    def points(self):
        """Grid points as an ``(n, d)`` array, row-major for ``d = 2``."""
        x = np.linspace(0.0, 1.0, self.points_per_axis)
        if self.dimension == 1:
            return x[:, None]
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        return np.column_stack([X1.ravel(), X2.ravel()])


def squared_euclidean_cost(grid_a: GridSpec, grid_b: GridSpec | None = None) -> np.ndarray:
    if grid_b is None:
        grid_b = grid_a
    if grid_a.dimension != grid_b.dimension:
        raise ShapeError("grids have different dimensions")
    x = grid_a.points()
    y = grid_b.points()
    C = np.zeros((x.shape[0], y.shape[0]))
    for k in range(x.shape[1]):
        C += (x[:, k, None] - y[None, :, k]) ** 2
    return C


def gaussian_pair_2d(points_per_axis=20):
    """Two offset Gaussian bumps on the unit square, normalized to unit mass.

    Source centred at (1/3, 1/3) with width factor 36, target at (2/3, 2/3)
    with factor 9, each plus a constant 0.1.
    """
    if points_per_axis < 2:
        raise InvalidInputError("points_per_axis must be at least 2")
    grid = GridSpec(2, points_per_axis)
    x = grid.points()
    a = np.exp(-36 * ((x[:, 0] - 1 / 3) ** 2 + (x[:, 1] - 1 / 3) ** 2)) + 1e-1
    b = np.exp(-9 * ((x[:, 0] - 2 / 3) ** 2 + (x[:, 1] - 2 / 3) ** 2)) + 1e-1
    return a / a.sum(), b / b.sum(), grid


def bump_pair_1d(n=1000):
    """Bimodal source and single-bump target on ``n`` points of [0, 1]."""
    if n < 2:
        raise InvalidInputError("n must be at least 2")
    grid = GridSpec(1, n)
    x = grid.points()[:, 0]
    a = np.exp(-100 * (x - 0.2) ** 2) + np.exp(-20 * np.abs(x - 0.4)) + 1e-2
    b = np.exp(-100 * (x - 0.6) ** 2) + 1e-2
    return a / a.sum(), b / b.sum(), grid


def digit_blob(seed=0, size=28):
    """Synthetic grayscale image: two random anisotropic Gaussian strokes.

    A stand-in for handwritten-digit images; pixels lie in [0, 255] and the
    background is exactly zero.
    """
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, size)
    X1, X2 = np.meshgrid(t, t, indexing="ij")
    img = np.zeros((size, size))
    for _ in range(2):
        c = rng.uniform(0.3, 0.7, size=2)
        theta = rng.uniform(0, np.pi)
        s_long, s_short = rng.uniform(0.15, 0.25), rng.uniform(0.03, 0.06)
        d1 = (X1 - c[0]) * np.cos(theta) + (X2 - c[1]) * np.sin(theta)
        d2 = -(X1 - c[0]) * np.sin(theta) + (X2 - c[1]) * np.cos(theta)
        img += np.exp(-0.5 * ((d1 / s_long) ** 2 + (d2 / s_short) ** 2))
    img = 255.0 * img / img.max()
    # digits have empty background
    img[img < 10.0] = 0.0
    return np.round(img)


def image_histogram(pixels, gamma=0.0):
    """Flatten row-major, add ``gamma`` to every pixel, normalize to unit mass."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if np.any(pixels < 0):
        raise InvalidInputError("pixel values must be nonnegative")
    if gamma < 0:
        raise InvalidInputError("offset gamma must be nonnegative")
    h = pixels.ravel() + gamma
    if h.sum() <= 0:
        raise DegenerateHistogramError("image is all zero and gamma = 0")
    return h / h.sum()


def median_cost_scale(C) -> float:
    """Median of all entries of ``C`` (midpoint of the two central values for even counts)."""
    C = np.asarray(C, dtype=np.float64)
    if C.size == 0:
        raise ShapeError("cost matrix is empty")
    return float(np.median(C))


def load_histogram_csv(path, return_normalized=False):
    """Read one nonnegative decimal per line.

    Blank lines are skipped. The vector is renormalized when its mass
    differs from 1 by more than 1e-9; with ``return_normalized=True`` the
    result is ``(histogram, was_normalized)``.
    """
    values = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                x = float(text)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: cannot parse {text!r} as a number") from None
            if not np.isfinite(x):
                raise ParseError(f"{path}:{lineno}: non-finite value {text!r}")
            if x < 0:
                raise InvalidInputError(f"{path}:{lineno}: negative value {text!r}")
            values.append(x)
    if not values:
        raise ParseError(f"{path}: no values")
    h = np.array(values)
    total = h.sum()
    if total <= 0:
        raise DegenerateHistogramError(f"{path}: total mass is zero")
    normalized = abs(total - 1.0) > 1e-9
    if normalized:
        logger.info("%s: mass %r renormalized to 1", path, total)
        h = h / total
    else:
        h = as_histogram(h)
    return (h, normalized) if return_normalized else h


def _pgm_tokens(data, pos, count):
    """Read ``count`` whitespace-separated ASCII tokens, skipping ``#`` comments."""
    tokens = []
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise ParseError(f"unexpected end of PGM data at byte {pos}")
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tok = data[start:pos]
        if not tok.isdigit():
            raise ParseError(f"invalid PGM token {tok!r} at byte {start}")
        tokens.append(int(tok))
    return tokens, pos


def load_image_pgm(path) -> np.ndarray:
    """Parse a binary (P5) or ASCII (P2) grayscale PGM into a float array."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ParseError(f"{path}: not a P2/P5 PGM file (magic {magic!r} at byte 0)")
    (width, height, maxval), pos = _pgm_tokens(data, 2, 3)
    if width < 1 or height < 1:
        raise ParseError(f"{path}: bad dimensions {width}x{height}")
    if not 0 < maxval <= 65535:
        raise ParseError(f"{path}: maxval {maxval} outside 1..65535")
    count = width * height
    if magic == b"P2":
        pixels, _ = _pgm_tokens(data, pos, count)
        img = np.array(pixels, dtype=np.float64)
    else:
        # exactly one whitespace byte separates the header from the raster
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        if len(data) - pos < need:
            raise ParseError(f"{path}: raster truncated at byte {len(data)}, need {pos + need}")
        img = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(np.float64)
    if np.any(img > maxval):
        bad = int(np.argmax(img > maxval))
        raise ParseError(f"{path}: pixel {bad} exceeds maxval {maxval}")
    return img.reshape(height, width)


def write_image_pgm(path, pixels, maxval=255):
    """Write a P2 (ASCII) PGM; used for exporting synthetic inputs."""
    img = np.asarray(np.round(pixels), dtype=np.int64)
    h, w = img.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in img]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
