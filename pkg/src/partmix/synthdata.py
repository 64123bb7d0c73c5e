"""Deterministic synthetic detection data with subcategory structure and a
long-tail distribution over part-offset shapes.

Objects are composites: a root patch plus P-1 part patches at offsets drawn
from a per-subcategory shape library whose frequencies follow a power law
p_k proportional to (k+1)^-tail. Two rendering modes share all sampling
logic: pixel mode draws oriented bars into grayscale rasters; feature mode
writes the patterns straight into FeatureGrid channels (channel 0 carries
the subcategory's root sign mask, channel j carries part j), which keeps
inference tests independent of descriptor details.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError
from .evaluate import GroundTruth, save_ground_truth
from .features import FeatureGrid, save_grid

MAX_PLACE_TRIES = 50


@dataclass
class SynthConfig:
    n_subcategories: int = 2
    parts_per_object: int = 3           # P, including the root
    shape_tail_exponent: float = 2.0    # power-law over shape patterns, > 1
    noise_level: float = 0.05
    n_images: int = 20
    image_size: int = 128               # pixels per side
    seed: int = 0
    world_seed: int | None = None       # class definition; defaults to seed
    n_shapes: int = 16                  # library size per subcategory
    n_negative_images: int = 0          # object-free images appended
    n_objects_per_image: int = 1
    root_cells: int = 6
    part_cells: int = 2
    cell_size: int = 8
    amplitude: float = 0.2
    part_amplitude: float | None = None  # defaults to amplitude
    shape_jitter: float = 0.0           # per-part chance of a 1-cell nudge

    def __post_init__(self):
        positive = (self.n_subcategories, self.parts_per_object,
                    self.noise_level + 1, self.n_images, self.image_size,
                    self.n_shapes, self.n_objects_per_image, self.root_cells,
                    self.part_cells, self.cell_size, self.amplitude,
                    self.effective_part_amplitude)
        if any(v <= 0 for v in positive):
            raise ValidationError("synth config values must be positive")
        if self.shape_tail_exponent <= 1.0:
            raise ValidationError("shape_tail_exponent must be > 1")
        if self.part_cells > self.root_cells:
            raise ValidationError("parts must fit inside the root extent")
        if self.image_size < self.root_cells * self.cell_size:
            raise ValidationError("image too small for the object extent")
        if not 0.0 <= self.shape_jitter <= 1.0:
            raise ValidationError("shape_jitter is a probability")

    @property
    def depth(self) -> int:
        return self.parts_per_object + 1

    @property
    def effective_world_seed(self) -> int:
        """Seed behind the subcategory masks and shape libraries.

        Fresh-seed draws of the same world (train vs held-out test) share
        this while varying ``seed``.
        """
        return self.seed if self.world_seed is None else self.world_seed

    @property
    def effective_part_amplitude(self) -> float:
        return self.amplitude if self.part_amplitude is None else self.part_amplitude

    @property
    def grid_cells(self) -> int:
        return self.image_size // self.cell_size


@dataclass
class SynthSample:
    image_id: str
    data: object                 # pixel array or FeatureGrid
    placements: np.ndarray       # (n_objects, P, 2) cell coords, row 0 root
    subcategories: list
    shape_indices: list
    boxes: list                  # (x, y, w, h) pixel rects, one per object


@dataclass
class SynthDataset:
    samples: list
    ground_truths: list
    shape_library: dict          # subcategory -> (n_shapes, P-1, 2) offsets
    root_masks: dict             # subcategory -> (root, root) sign mask
    config: SynthConfig
    mode: str = "feature"


def shape_power_law(n_shapes: int, tail_exponent: float) -> np.ndarray:
    """p_k proportional to (k+1)^-tail over shape indices 0..n_shapes-1."""
    p = (np.arange(n_shapes) + 1.0) ** (-float(tail_exponent))
    return p / p.sum()


def draw_shape_indices(rng, n: int, n_shapes: int, tail_exponent: float) -> np.ndarray:
    cdf = np.cumsum(shape_power_law(n_shapes, tail_exponent))
    return np.searchsorted(cdf, rng.random(n), side="right").astype(np.int64)


def build_shape_library(config: SynthConfig) -> dict:
    """Distinct per-subcategory offset patterns, deterministic in the seed."""
    lib = {}
    hi = config.root_cells - config.part_cells
    n_links = config.parts_per_object - 1
    for s in range(config.n_subcategories):
        if n_links == 0:
            lib[s] = np.zeros((config.n_shapes, 0, 2), dtype=np.int64)
            continue
        rng = np.random.default_rng([config.effective_world_seed, 1000 + s])
        shapes = []
        seen = set()
        tries = 0
        while len(shapes) < config.n_shapes:
            cand = rng.integers(0, hi + 1, size=(n_links, 2))
            key = tuple(map(tuple, cand))
            tries += 1
            if key not in seen:
                seen.add(key)
                shapes.append(cand)
            elif tries > 200 * config.n_shapes:
                raise DataError(
                    f"cannot draw {config.n_shapes} distinct shapes "
                    f"inside a {config.root_cells}-cell root"
                )
        lib[s] = np.stack(shapes)
    return lib


def build_root_masks(config: SynthConfig) -> dict:
    masks = {}
    for s in range(config.n_subcategories):
        rng = np.random.default_rng([config.effective_world_seed, 2000 + s])
        masks[s] = rng.choice([-1.0, 1.0],
                              size=(config.root_cells, config.root_cells))
    return masks


def _sample_objects(config, rng, library):
    """Object descriptors for one image: placements, labels, shape indices."""
    cells = config.grid_cells
    hi = cells - config.root_cells
    n_links = config.parts_per_object - 1
    part_hi = config.root_cells - config.part_cells
    chosen = []
    for _ in range(config.n_objects_per_image):
        for attempt in range(MAX_PLACE_TRIES):
            s = int(rng.integers(0, config.n_subcategories))
            k = int(draw_shape_indices(rng, 1, config.n_shapes,
                                       config.shape_tail_exponent)[0])
            z1 = rng.integers(0, hi + 1, size=2)
            offsets = library[s][k].copy()
            for j in range(n_links):
                if config.shape_jitter > 0 and rng.random() < config.shape_jitter:
                    offsets[j] = np.clip(
                        offsets[j] + rng.integers(-1, 2, size=2), 0, part_hi)
            box = (z1[1], z1[0], config.root_cells, config.root_cells)
            overlap = any(
                not (box[0] + box[2] <= b[0] or b[0] + b[2] <= box[0]
                     or box[1] + box[3] <= b[1] or b[1] + b[3] <= box[1])
                for (_, _, _, b) in chosen
            )
            if not overlap:
                chosen.append((s, k, np.vstack([z1[None, :], z1 + offsets]), box))
                break
        else:
            raise DataError(
                f"could not place {config.n_objects_per_image} objects in "
                f"{MAX_PLACE_TRIES} tries"
            )
    return chosen


def _render_feature(config, rng, objects, masks):
    cells = config.grid_cells
    grid = rng.normal(0.0, config.noise_level,
                      size=(cells, cells, config.depth))
    for s, _, placements, _ in objects:
        y, x = placements[0]
        r = config.root_cells
        grid[y:y + r, x:x + r, 0] += config.amplitude * masks[s]
        for j in range(config.parts_per_object - 1):
            py, px = placements[j + 1]
            pc = config.part_cells
            grid[py:py + pc, px:px + pc, j + 1] += config.effective_part_amplitude
    return FeatureGrid(grid, cell_size=config.cell_size)


def _bar_patch(size: int, angle: float) -> np.ndarray:
    """Bright oriented bar through the patch center, values in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = cx = (size - 1) / 2.0
    across = np.abs((yy - cy) * np.cos(angle) - (xx - cx) * np.sin(angle))
    along = np.abs((yy - cy) * np.sin(angle) + (xx - cx) * np.cos(angle))
    return ((across <= 1.2) & (along <= 0.45 * size)).astype(np.float64)


def _render_pixels(config, rng, objects):
    img = np.clip(
        rng.normal(128.0, 48.0 * config.noise_level,
                   size=(config.image_size, config.image_size)), 0, 255)
    cs = config.cell_size
    P = config.parts_per_object
    for s, _, placements, _ in objects:
        y, x = placements[0] * cs
        r = config.root_cells * cs
        # root: rectangle outline, 2 px, brightness keyed to the subcategory
        level = 210.0 + 40.0 * (s % 2)
        img[y:y + 2, x:x + r] = level
        img[y + r - 2:y + r, x:x + r] = level
        img[y:y + r, x:x + 2] = level
        img[y:y + r, x + r - 2:x + r] = level
        for j in range(P - 1):
            py, px = placements[j + 1] * cs
            pc = config.part_cells * cs
            bar = _bar_patch(pc, np.pi * (j + 1) / P)
            patch = img[py:py + pc, px:px + pc]
            img[py:py + pc, px:px + pc] = np.where(bar > 0, 255.0, patch)
    return img


def _object_records(config, objects):
    cs = config.cell_size
    placements = np.stack([pl for _, _, pl, _ in objects])
    subcats = [s for s, _, _, _ in objects]
    shapes = [k for _, k, _, _ in objects]
    boxes = [(float(b[0] * cs), float(b[1] * cs),
              float(b[2] * cs), float(b[3] * cs)) for _, _, _, b in objects]
    return placements, subcats, shapes, boxes


def generate(config: SynthConfig, mode: str = "feature") -> SynthDataset:
    """Deterministic dataset; per-image streams come from [seed, image_index].

    mode "feature" emits FeatureGrids; mode "pixel" emits grayscale rasters
    of oriented-bar composites. Appends config.n_negative_images object-free
    images after the positives.
    """
    if mode not in ("feature", "pixel"):
        raise ValidationError(f"unknown mode {mode!r}")
    library = build_shape_library(config)
    masks = build_root_masks(config)
    samples = []
    truths = []
    for i in range(config.n_images + config.n_negative_images):
        rng = np.random.default_rng([config.seed, i])
        negative = i >= config.n_images
        image_id = f"img_{i:04d}"
        objects = [] if negative else _sample_objects(config, rng, library)
        if mode == "feature":
            data = _render_feature(config, rng, objects, masks)
        else:
            data = _render_pixels(config, rng, objects)
        if objects:
            placements, subcats, shapes, boxes = _object_records(config, objects)
        else:
            placements = np.zeros((0, config.parts_per_object, 2), dtype=np.int64)
            subcats, shapes, boxes = [], [], []
        samples.append(SynthSample(image_id=image_id, data=data,
                                   placements=placements,
                                   subcategories=subcats,
                                   shape_indices=shapes, boxes=boxes))
        truths.append(GroundTruth(image_id=image_id, boxes=list(boxes),
                                  difficult=[False] * len(boxes)))
    return SynthDataset(samples=samples, ground_truths=truths,
                        shape_library=library, root_masks=masks,
                        config=config, mode=mode)


def shape_histogram(placements, q: float = 1.0):
    """Counts of distinct quantized relative-offset shapes, descending.

    placements: iterable of (P, 2) absolute part coordinates. Returns a list
    of (shape_key, count) with count descending, key ascending on ties;
    q = inf collapses everything into one bin.
    """
    counts = {}
    P = None
    for pl in placements:
        pl = np.asarray(pl)
        if P is None:
            P = pl.shape[0]
        elif pl.shape[0] != P:
            raise ValidationError("inconsistent part counts across placements")
        off = pl[1:] - pl[0]
        if np.isinf(q):
            quantized = np.zeros_like(off)
        elif q > 0:
            quantized = (np.rint(off / q) * q).astype(np.int64)
        else:
            quantized = off.astype(np.int64)
        key = tuple(tuple(int(v) for v in row) for row in quantized)
        counts[key] = counts.get(key, 0) + 1
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def write_dataset(dataset: SynthDataset, out_dir) -> Path:
    """Images (PGM or binary grids) + gt.json + placements.json + index.json."""
    from .data_io import sha256_file, write_pgm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for sample in dataset.samples:
        if dataset.mode == "pixel":
            path = out / f"{sample.image_id}.pgm"
            write_pgm(path, sample.data)
        else:
            path = out / f"{sample.image_id}.grid"
            save_grid(sample.data, path)
        index.append({"id": sample.image_id, "path": path.name,
                      "sha256": sha256_file(path)})
    save_ground_truth(dataset.ground_truths, out / "gt.json")
    placements = [
        {
            "image_id": s.image_id,
            "subcategories": [int(v) for v in s.subcategories],
            "shape_indices": [int(v) for v in s.shape_indices],
            "placements": [np.asarray(p).tolist() for p in s.placements],
        }
        for s in dataset.samples
    ]
    (out / "placements.json").write_text(json.dumps(placements, indent=1))
    cfg = dataset.config
    geometry = {"root_cells": cfg.root_cells, "part_cells": cfg.part_cells,
                "cell_size": cfg.cell_size,
                "parts_per_object": cfg.parts_per_object}
    (out / "index.json").write_text(json.dumps(
        {"mode": dataset.mode, "geometry": geometry, "images": index},
        indent=1))
    return out
