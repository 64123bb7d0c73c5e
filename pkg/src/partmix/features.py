"""Oriented-gradient feature grids, pyramids, window extraction, and PCA.

The descriptor is a per-cell histogram of unsigned gradient orientations
(9 bins over [0, 180)), block-normalized over the four 2x2 cell
neighborhoods containing each cell and clipped at 0.2, so every feature
value lies in [0, CLIP_MAX]. One cell of border is trimmed after
normalization because border cells lack complete neighborhoods.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidAnnotationError, SizedInputError, WindowBoundsError

logger = logging.getLogger(__name__)

N_ORIENTATIONS = 9
CLIP_MAX = 0.2
NORM_EPS = 1e-4
DESCRIPTOR_DIM = 4 * N_ORIENTATIONS  # four block-normalized copies per cell
DEFAULT_CELL_SIZE = 8


@dataclass
class FeatureGrid:
    """Dense per-cell feature array at one scale.

    ``border`` records how many cells were trimmed from each side of the
    raster-aligned cell lattice (1 for descriptor output, 0 for grids built
    directly in feature space), so detections can be mapped back to pixels.
    """

    cells: np.ndarray  # (rows, cols, D) float64
    cell_size: int
    scale: float = 1.0
    border: int = 0

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.cells.ndim != 3:
            raise ValueError(f"cells must be 3-D, got shape {self.cells.shape}")
        if self.cells.shape[0] < 1 or self.cells.shape[1] < 1:
            raise ValueError("feature grid must have at least one cell")
        if not np.all(np.isfinite(self.cells)):
            raise ValueError("feature grid contains non-finite values")

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def depth(self) -> int:
        return self.cells.shape[2]

    def cell_to_pixel_box(self, y: int, x: int, h: int, w: int) -> tuple[float, float, float, float]:
        """Map a cell-coordinate window to an (x, y, w, h) pixel rect in the original image."""
        cs = self.cell_size / self.scale
        px = (x + self.border) * cs
        py = (y + self.border) * cs
        return (px, py, w * cs, h * cs)


@dataclass
class FeaturePyramid:
    levels: list[FeatureGrid]
    scale_step: float
    truncated: bool = False


@dataclass
class WindowDescriptor:
    """Flat row-major feature vector of an (h, w, D) window."""

    values: np.ndarray
    shape: tuple[int, int, int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        h, w, d = self.shape
        if self.values.size != h * w * d:
            raise ValueError(
                f"descriptor length {self.values.size} != {h}*{w}*{d}"
            )


def _gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centered-difference gradients (one-sided at the raster edge)."""
    gy, gx = np.gradient(image.astype(np.float64, copy=False))
    return gy, gx


def _cell_histograms(image: np.ndarray, cell_size: int) -> np.ndarray:
    """Magnitude-weighted orientation histograms per complete cell."""
    h, w = image.shape
    rows = h // cell_size
    cols = w // cell_size
    gy, gx = _gradients(image)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)  # [-pi, pi]
    ang = np.mod(ang, np.pi)  # unsigned orientation in [0, pi)
    bins = np.minimum((ang / (np.pi / N_ORIENTATIONS)).astype(np.int64), N_ORIENTATIONS - 1)

    # Only pixels inside complete cells vote.
    hy = rows * cell_size
    wx = cols * cell_size
    mag = mag[:hy, :wx]
    bins = bins[:hy, :wx]

    cell_r = np.repeat(np.arange(rows), cell_size)[:, None]
    cell_c = np.repeat(np.arange(cols), cell_size)[None, :]
    flat_idx = (cell_r * cols + cell_c) * N_ORIENTATIONS + bins
    hist = np.zeros(rows * cols * N_ORIENTATIONS, dtype=np.float64)
    np.add.at(hist, flat_idx.ravel(), mag.ravel())
    return hist.reshape(rows, cols, N_ORIENTATIONS)


def _normalize_cells(hist: np.ndarray) -> np.ndarray:
    """Four block-normalized, clipped copies of every interior cell."""
    rows, cols, _ = hist.shape
    energy = np.sum(hist * hist, axis=2)
    # block (i, j) covers cells {i, i+1} x {j, j+1}
    block = energy[:-1, :-1] + energy[1:, :-1] + energy[:-1, 1:] + energy[1:, 1:]
    norm = np.sqrt(block) + NORM_EPS

    out = np.empty((rows - 2, cols - 2, DESCRIPTOR_DIM), dtype=np.float64)
    inner = hist[1:-1, 1:-1, :]
    # the four blocks containing interior cell (i, j), i,j >= 1:
    # NW=(i-1,j-1), NE=(i-1,j), SW=(i,j-1), SE=(i,j)
    quadrants = (
        norm[:-1, :-1],
        norm[:-1, 1:],
        norm[1:, :-1],
        norm[1:, 1:],
    )
    for k, q in enumerate(quadrants):
        out[:, :, k * N_ORIENTATIONS:(k + 1) * N_ORIENTATIONS] = np.minimum(
            inner / q[:, :, None], CLIP_MAX
        )
    return out


def compute_features(image: np.ndarray, cell_size: int = DEFAULT_CELL_SIZE) -> FeatureGrid:
    """Compute the oriented-gradient descriptor grid of a grayscale raster.

    Raises SizedInputError when the image cannot produce at least one
    interior cell after the one-cell border trim (each axis must be at
    least 3 * cell_size pixels).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("expected a 2-D grayscale raster")
    rows = image.shape[0] // cell_size
    cols = image.shape[1] // cell_size
    if rows < 3 or cols < 3:
        raise SizedInputError(
            f"image {image.shape} too small for cell_size={cell_size}: "
            f"needs at least {3 * cell_size} pixels per axis"
        )
    hist = _cell_histograms(image, cell_size)
    cells = _normalize_cells(hist)
    return FeatureGrid(cells=cells, cell_size=cell_size, scale=1.0, border=1)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic bilinear resize with half-pixel-center alignment."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if out_h == h and out_w == w:
        return image.copy()
    sy = h / out_h
    sx = w / out_w
    yy = np.clip((np.arange(out_h) + 0.5) * sy - 0.5, 0.0, h - 1.0)
    xx = np.clip((np.arange(out_w) + 0.5) * sx - 0.5, 0.0, w - 1.0)
    y0 = np.floor(yy).astype(np.int64)
    x0 = np.floor(xx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (yy - y0)[:, None]
    wx = (xx - x0)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - wx) + image[np.ix_(y0, x1)] * wx
    bot = image[np.ix_(y1, x0)] * (1 - wx) + image[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def build_pyramid(
    image: np.ndarray,
    cell_size: int = DEFAULT_CELL_SIZE,
    scale_step: float = 2 ** 0.5,
    n_levels: int = 5,
) -> FeaturePyramid:
    """Multi-scale feature pyramid; level i is the image at scale scale_step**-i.

    Levels whose rescaled image is too small for the descriptor are dropped
    (truncation is recorded and logged, not an error).
    """
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    if scale_step <= 1.0:
        raise ValueError("scale_step must be > 1")
    image = np.asarray(image, dtype=np.float64)
    levels = []
    truncated = False
    for i in range(n_levels):
        scale = float(scale_step) ** (-i)
        oh = int(round(image.shape[0] * scale))
        ow = int(round(image.shape[1] * scale))
        if oh < 3 * cell_size or ow < 3 * cell_size:
            truncated = True
            logger.warning(
                "pyramid truncated at level %d/%d (scaled image %dx%d too small)",
                i, n_levels, oh, ow,
            )
            break
        resized = image if i == 0 else bilinear_resize(image, oh, ow)
        grid = compute_features(resized, cell_size)
        grid.scale = scale
        levels.append(grid)
    if not levels:
        raise SizedInputError("image too small for even the first pyramid level")
    return FeaturePyramid(levels=levels, scale_step=float(scale_step), truncated=truncated)


def extract_window(grid: FeatureGrid, origin: tuple[int, int], h: int, w: int) -> WindowDescriptor:
    """Copy an (h, w) cell window starting at origin=(y, x), row-major."""
    y, x = origin
    if h < 1 or w < 1:
        raise WindowBoundsError("window dims must be positive")
    if y < 0 or x < 0 or y + h > grid.rows or x + w > grid.cols:
        raise WindowBoundsError(
            f"window origin={origin} size=({h},{w}) outside grid "
            f"({grid.rows},{grid.cols})"
        )
    block = grid.cells[y:y + h, x:x + w, :]
    return WindowDescriptor(values=block.ravel(), shape=(h, w, grid.depth))


def warp_to_canonical(
    image: np.ndarray,
    bbox: tuple[float, float, float, float],
    canonical_shape: tuple[int, int],
    cell_size: int = DEFAULT_CELL_SIZE,
) -> WindowDescriptor:
    """Warp a bbox crop to a canonical cell shape and return its descriptor.

    The crop is expanded by two canonical cells of context per side (with
    edge replication outside the raster) so the retained cells have fully
    defined normalization neighborhoods; cell-aligned identity warps are
    bit-exact against direct extraction.
    """
    image = np.asarray(image, dtype=np.float64)
    bx, by, bw, bh = (float(v) for v in bbox)
    if bw <= 0 or bh <= 0:
        raise InvalidAnnotationError(f"degenerate bbox {bbox}")
    ih, iw = image.shape
    if bx < 0 or by < 0 or bx + bw > iw or by + bh > ih:
        raise InvalidAnnotationError(f"bbox {bbox} outside image {image.shape}")
    ch, cw = canonical_shape
    if ch < 1 or cw < 1:
        raise ValueError("canonical_shape must be positive")

    pad = 2
    pad_y = pad * bh / ch
    pad_x = pad * bw / cw
    ry0, rh = by - pad_y, bh + 2 * pad_y
    rx0, rw = bx - pad_x, bw + 2 * pad_x
    th = (ch + 2 * pad) * cell_size
    tw = (cw + 2 * pad) * cell_size

    # sample the expanded region at half-pixel centers, edge-replicated
    yy = np.clip(ry0 + (np.arange(th) + 0.5) * rh / th - 0.5, 0.0, ih - 1.0)
    xx = np.clip(rx0 + (np.arange(tw) + 0.5) * rw / tw - 0.5, 0.0, iw - 1.0)
    y0 = np.floor(yy).astype(np.int64)
    x0 = np.floor(xx).astype(np.int64)
    y1 = np.minimum(y0 + 1, ih - 1)
    x1 = np.minimum(x0 + 1, iw - 1)
    wy = (yy - y0)[:, None]
    wx = (xx - x0)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - wx) + image[np.ix_(y0, x1)] * wx
    bot = image[np.ix_(y1, x0)] * (1 - wx) + image[np.ix_(y1, x1)] * wx
    warped = top * (1 - wy) + bot * wy

    grid = compute_features(warped, cell_size)  # (ch + 2, cw + 2) after trim
    return extract_window(grid, (1, 1), ch, cw)


@dataclass
class PCAReduction:
    """Projection of window descriptors onto the top-variance subspace."""

    values: np.ndarray          # (n, out_dim [+1 with aspects])
    components: np.ndarray      # (out_dim, d), zero rows past the data rank
    mean: np.ndarray            # (d,)
    eigenvalues: np.ndarray     # covariance eigenvalues, descending
    rank_deficient: bool = False
    aspects_appended: bool = field(default=False)


def pca_reduce(
    vectors,
    out_dim: int = 32,
    aspects: np.ndarray | None = None,
) -> PCAReduction:
    """Project descriptors to out_dim principal coordinates.

    ``vectors`` is an (n, d) array or a list of WindowDescriptor. When the
    data rank is below out_dim the trailing coordinates are zero-padded and
    flagged. ``aspects`` (per-sample bbox aspect ratios) are appended
    unscaled as a final coordinate when given.
    """
    if isinstance(vectors, np.ndarray):
        data = np.asarray(vectors, dtype=np.float64)
    else:
        data = np.stack([np.asarray(v.values, dtype=np.float64) for v in vectors])
    n, d = data.shape
    if n <= out_dim:
        raise ValueError(f"need more than out_dim={out_dim} samples, got {n}")

    mean = data.mean(axis=0)
    centered = data - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    # deterministic sign: largest-magnitude loading of each component positive
    for i in range(vt.shape[0]):
        j = int(np.argmax(np.abs(vt[i])))
        if vt[i, j] < 0:
            vt[i] = -vt[i]

    tol = max(n, d) * np.finfo(np.float64).eps * (svals[0] if svals.size else 0.0)
    rank = int(np.sum(svals > tol))
    k = min(out_dim, vt.shape[0])
    components = np.zeros((out_dim, d), dtype=np.float64)
    take = min(k, rank)
    components[:take] = vt[:take]
    values = centered @ components.T
    if take < out_dim:
        values[:, take:] = 0.0

    eigenvalues = np.zeros(out_dim, dtype=np.float64)
    m = min(out_dim, svals.size)
    eigenvalues[:m] = (svals[:m] ** 2) / n

    rank_deficient = rank < out_dim
    if aspects is not None:
        aspects = np.asarray(aspects, dtype=np.float64).reshape(-1)
        if aspects.size != n:
            raise ValueError("aspects length must match sample count")
        values = np.hstack([values, aspects[:, None]])
    return PCAReduction(
        values=values,
        components=components,
        mean=mean,
        eigenvalues=eigenvalues,
        rank_deficient=rank_deficient,
        aspects_appended=aspects is not None,
    )


_GRID_MAGIC_FIELDS = 4  # rows, cols, D, cell_size as little-endian u32


def save_grid(grid: FeatureGrid, path) -> None:
    """Write a grid to the flat binary format (u32 header + f32 data)."""
    header = struct.pack(
        "<4I", grid.rows, grid.cols, grid.depth, grid.cell_size
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(grid.cells.astype("<f4").tobytes(order="C"))


def load_grid(path, scale: float = 1.0, border: int = 0) -> FeatureGrid:
    """Read a grid written by save_grid. Scale is not stored in the format."""
    with open(path, "rb") as f:
        raw = f.read()
    hdr_size = 4 * _GRID_MAGIC_FIELDS
    if len(raw) < hdr_size:
        raise ValueError(f"grid file {path} truncated (no header)")
    rows, cols, depth, cell_size = struct.unpack("<4I", raw[:hdr_size])
    expected = rows * cols * depth * 4
    body = raw[hdr_size:]
    if len(body) != expected:
        raise ValueError(
            f"grid file {path}: expected {expected} data bytes, got {len(body)}"
        )
    cells = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(rows, cols, depth)
    return FeatureGrid(cells=cells, cell_size=cell_size, scale=scale, border=border)
