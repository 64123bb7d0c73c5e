"""Model containers shared by training, scoring, and serialization.

Conventions used throughout:
  - spatial pairs are (y, x) in cell coordinates
  - springs are (beta_y, beta_x) per non-root part, deformation cost
    beta_y*dy^2 + beta_x*dx^2 subtracted from the score
  - anchors and anchor sets are integer (y, x) offsets of each non-root
    part relative to the root location
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

BETA_MIN = 1e-6  # smallest admissible spring stiffness for deformable variants


@dataclass
class PlattScaling:
    """Sigmoid score calibration P(y=1|s) = 1 / (1 + exp(a*s + b)), a < 0."""

    a: float
    b: float
    clamped: bool = False

    def prob(self, scores):
        scores = np.asarray(scores, dtype=np.float64)
        with np.errstate(over="ignore", under="ignore"):
            return 1.0 / (1.0 + np.exp(self.a * scores + self.b))


@dataclass
class Template:
    """Rigid linear template scored by dot product plus bias."""

    weights: np.ndarray  # (h, w, D)
    bias: float = 0.0
    platt: PlattScaling | None = None
    mixture_id: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ValidationError(f"template weights must be (h, w, D), got {self.weights.shape}")
        if self.weights.shape[0] < 1 or self.weights.shape[1] < 1:
            raise ValidationError("template must span at least one cell")
        if not np.all(np.isfinite(self.weights)):
            raise ValidationError("template weights must be finite")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.weights.shape

    def score(self, window_values: np.ndarray) -> float:
        return float(np.dot(self.weights.ravel(), np.asarray(window_values).ravel()) + self.bias)


@dataclass
class MixtureModel:
    """Independent rigid templates combined by max over components."""

    templates: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.templates:
            raise ValidationError("mixture needs at least one template")
        ids = [t.mixture_id for t in self.templates]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"mixture_ids must be unique, got {ids}")

    @property
    def K(self) -> int:
        return len(self.templates)


@dataclass
class PartFilter:
    """Appearance filter of one part; part_id 0 is the root."""

    part_id: int
    weights: np.ndarray  # (h, w, D)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ValidationError(f"part weights must be (h, w, D), got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValidationError("part weights must be finite")

    @property
    def dims(self) -> tuple[int, int]:
        return self.weights.shape[:2]


VARIANTS = ("dpm", "epm", "edpm")


@dataclass
class StarModel:
    """Star-structured part model: root plus P-1 parts tied only to the root.

    variant selects the placement space:
      dpm  - single anchor per part, quadratic deformation around it
      epm  - placements restricted to exemplar anchor sets, scored with the
             dpm deformation at each exemplar shape
      edpm - exemplar anchor sets with quadratic deformation around each
    """

    parts: list                       # [PartFilter], parts[0] is the root
    springs: np.ndarray | None = None     # (P-1, 2) of (beta_y, beta_x)
    anchors: np.ndarray | None = None     # (P-1, 2) int, dpm/epm base anchors
    anchor_sets: np.ndarray | None = None  # (M, P-1, 2) int, epm/edpm exemplars
    variant: str = "dpm"
    bias: float = 0.0
    platt: PlattScaling | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if not self.parts:
            raise ValidationError("star model needs a root part")
        n_links = len(self.parts) - 1

        if n_links:
            if self.springs is None:
                raise ValidationError("multi-part model needs springs")
            self.springs = np.asarray(self.springs, dtype=np.float64).reshape(n_links, 2)
            floor = BETA_MIN if self.variant in ("dpm", "edpm") else 0.0
            if np.any(self.springs < floor):
                raise ValidationError(
                    f"springs must be >= {floor} for variant {self.variant}"
                )
        if self.variant in ("dpm", "epm"):
            if n_links:
                if self.anchors is None:
                    raise ValidationError(f"{self.variant} needs base anchors")
                self.anchors = np.asarray(self.anchors, dtype=np.int64).reshape(n_links, 2)
                root_h, root_w = self.parts[0].dims
                for j, part in enumerate(self.parts[1:]):
                    ay, ax = self.anchors[j]
                    ph, pw = part.dims
                    if ay < 0 or ax < 0 or ay + ph > root_h or ax + pw > root_w:
                        raise ValidationError(
                            f"part {j + 1} anchor {(int(ay), int(ax))} places its "
                            f"window outside the root extent"
                        )
        if self.variant in ("epm", "edpm"):
            if self.anchor_sets is None or len(self.anchor_sets) == 0:
                raise ValidationError(f"{self.variant} needs a nonempty anchor set list")
            self.anchor_sets = np.asarray(self.anchor_sets, dtype=np.int64)
            if n_links:
                self.anchor_sets = self.anchor_sets.reshape(-1, n_links, 2)
            else:
                self.anchor_sets = self.anchor_sets.reshape(-1, 0, 2)

    @property
    def P(self) -> int:
        return len(self.parts)

    @property
    def M(self) -> int:
        if self.anchor_sets is None:
            return 1
        return self.anchor_sets.shape[0]
