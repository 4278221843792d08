"""Paired two-domain feature scenes on a labeled grid.

A scene pair shares one content sample per position (content is
domain-agnostic) while each domain draws its own style sample around
domain-specific per-class prototypes. Class 0 is the background; foreground
classes paint 1-3 rectangles each, later rectangles overriding earlier ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GenerationError, ShapeError, ValidationError
from .memory import ClassCluster
from .numerics import l2_normalize_rows
from .serialize import matrix_text

SCENE_FORMAT_VERSION = 1

_MIN_BOX_SIDE = 2


def _check_overlap(overlap: float, name: str) -> None:
    if not 0.0 <= overlap < 1.0:
        raise GenerationError(f"{name} must be in [0, 1), got {overlap}")


def _content_prototypes(rng: np.random.Generator, k: int, channels: int, crowding: float) -> np.ndarray:
    """K unit rows; each foreground row is blended toward the background row.

    ``crowding`` is the blend weight: 0 leaves independent random directions,
    values near 1 park every foreground class on top of the background, which
    is the regime where class-restricted addressing has to earn its keep.
    """
    _check_overlap(crowding, "content_overlap")
    rows = l2_normalize_rows(rng.standard_normal((k, channels)))
    for i in range(1, k):
        rows[i] = (1.0 - crowding) * rows[i] + crowding * rows[0]
    return l2_normalize_rows(rows)


def _style_prototypes(rng: np.random.Generator, k: int, channels: int, overlap: float) -> np.ndarray:
    """K unit rows around one shared direction, pairwise cosine ~ ``overlap``.

    Styles within a domain are globally similar (one rendering condition)
    with per-class variation on top.
    """
    _check_overlap(overlap, "style_overlap")
    base = rng.standard_normal(channels)
    base /= np.linalg.norm(base)
    ratio = np.sqrt(overlap / (1.0 - overlap)) if overlap > 0.0 else 0.0
    mix = ratio / (1.0 + ratio)
    rows = l2_normalize_rows(rng.standard_normal((k, channels)))
    return l2_normalize_rows(mix * base[None, :] + (1.0 - mix) * rows)


@dataclass(frozen=True)
class DomainSpec:
    """Generative model of one scene pair distribution."""

    classes: int
    input_channels: int
    height: int
    width: int
    noise_sigma: float
    content_prototypes: np.ndarray
    style_prototypes_x: np.ndarray
    style_prototypes_y: np.ndarray

    def __post_init__(self):
        if self.classes < 2:
            raise GenerationError("need at least background plus one foreground class")
        if self.noise_sigma < 0.0:
            raise GenerationError("noise sigma must be non-negative")
        for name in ("content_prototypes", "style_prototypes_x", "style_prototypes_y"):
            protos = getattr(self, name)
            if protos.shape != (self.classes, self.input_channels):
                raise GenerationError(f"{name} shape {protos.shape} mismatches spec")
            sims = protos @ protos.T
            off_diag = sims[~np.eye(self.classes, dtype=bool)]
            if off_diag.size and off_diag.max() > 1.0 - 1e-9:
                raise GenerationError(f"{name} contains coinciding prototypes")

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        classes: int = 4,
        input_channels: int = 16,
        height: int = 16,
        width: int = 16,
        noise_sigma: float = 0.05,
        content_overlap: float = 0.0,
        style_overlap: float = 0.0,
    ) -> "DomainSpec":
        """Draw prototypes; order is content, style_x, style_y.

        ``content_overlap`` crowds foreground content classes toward the
        background, ``style_overlap`` is the pairwise similarity of the
        per-class style directions within each domain.
        """
        return cls(
            classes=classes,
            input_channels=input_channels,
            height=height,
            width=width,
            noise_sigma=noise_sigma,
            content_prototypes=_content_prototypes(rng, classes, input_channels, content_overlap),
            style_prototypes_x=_style_prototypes(rng, classes, input_channels, style_overlap),
            style_prototypes_y=_style_prototypes(rng, classes, input_channels, style_overlap),
        )

    @property
    def positions(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class Box:
    """Half-open rectangle [top, bottom) x [left, right) labeled with a class."""

    class_id: int
    top: int
    bottom: int
    left: int
    right: int


@dataclass
class FeatureScene:
    """Per-position content/style features with class labels, P = H * W."""

    content: np.ndarray
    style: np.ndarray
    labels: np.ndarray
    boxes: list[Box]
    height: int
    width: int

    @property
    def positions(self) -> int:
        return self.labels.shape[0]


def generate_scene_pair(
    spec: DomainSpec, rng: np.random.Generator
) -> tuple[FeatureScene, FeatureScene]:
    """One paired scene per domain, identical labels and content samples.

    Draw order: boxes per foreground class, then content noise, then style
    noise for x, then style noise for y.
    """
    h, w = spec.height, spec.width
    if h < _MIN_BOX_SIDE or w < _MIN_BOX_SIDE:
        raise GenerationError(f"grid {h}x{w} too small for {_MIN_BOX_SIDE}-wide boxes")
    max_side_h = max(_MIN_BOX_SIDE, h // 3)
    max_side_w = max(_MIN_BOX_SIDE, w // 3)

    grid = np.zeros((h, w), dtype=np.int64)
    boxes: list[Box] = []
    for class_id in range(1, spec.classes):
        for _ in range(int(rng.integers(1, 4))):
            box_h = int(rng.integers(_MIN_BOX_SIDE, max_side_h + 1))
            box_w = int(rng.integers(_MIN_BOX_SIDE, max_side_w + 1))
            top = int(rng.integers(0, h - box_h + 1))
            left = int(rng.integers(0, w - box_w + 1))
            box = Box(class_id, top, top + box_h, left, left + box_w)
            grid[box.top : box.bottom, box.left : box.right] = class_id
            boxes.append(box)

    labels = grid.reshape(-1)
    p = spec.positions
    sigma = spec.noise_sigma
    content = spec.content_prototypes[labels] + sigma * rng.standard_normal((p, spec.input_channels))
    style_x = spec.style_prototypes_x[labels] + sigma * rng.standard_normal((p, spec.input_channels))
    style_y = spec.style_prototypes_y[labels] + sigma * rng.standard_normal((p, spec.input_channels))

    scene_x = FeatureScene(content, style_x, labels.copy(), list(boxes), h, w)
    scene_y = FeatureScene(content.copy(), style_y, labels.copy(), list(boxes), h, w)
    return scene_x, scene_y


def cluster_by_class(scene: FeatureScene) -> list[ClassCluster]:
    """One cluster per class present, ascending class id, positions preserved."""
    clusters = []
    for class_id in np.unique(scene.labels):
        positions = np.flatnonzero(scene.labels == class_id)
        clusters.append(
            ClassCluster(
                class_id=int(class_id),
                content=scene.content[positions],
                style=scene.style[positions],
                positions=positions,
            )
        )
    return clusters


def save_scene(scene: FeatureScene, path: str | Path) -> None:
    boxes_text = ", ".join(
        f"[{b.class_id}, {b.top}, {b.bottom}, {b.left}, {b.right}]" for b in scene.boxes
    )
    parts = [
        "{",
        f'  "version": {SCENE_FORMAT_VERSION},',
        f'  "height": {scene.height},',
        f'  "width": {scene.width},',
        f'  "labels": [{", ".join(str(int(v)) for v in scene.labels)}],',
        f'  "boxes": [{boxes_text}],',
        f'  "content": {matrix_text(scene.content, "  ")},',
        f'  "style": {matrix_text(scene.style, "  ")}',
        "}",
        "",
    ]
    Path(path).write_text("\n".join(parts))


def load_scene(path: str | Path) -> FeatureScene:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"scene file {path}: {exc}") from exc
    if doc.get("version") != SCENE_FORMAT_VERSION:
        raise ValidationError(f"unsupported scene version {doc.get('version')!r}")
    height, width = int(doc["height"]), int(doc["width"])
    labels = np.asarray(doc["labels"], dtype=np.int64)
    content = np.asarray(doc["content"], dtype=np.float64)
    style = np.asarray(doc["style"], dtype=np.float64)
    if labels.shape[0] != height * width:
        raise ValidationError("labels length must equal height * width")
    if content.ndim != 2 or content.shape != style.shape or content.shape[0] != labels.shape[0]:
        raise ShapeError(f"content {content.shape} / style {style.shape} inconsistent")
    boxes = [Box(*(int(v) for v in row)) for row in doc["boxes"]]
    return FeatureScene(content, style, labels, boxes, height, width)
