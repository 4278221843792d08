"""Learnable affine encoders and the per-iteration training pipeline.

One content and one style encoder per domain stand in for the feature
extractors upstream of the memory. Forward, backward, and the Adam step are
hand-written so the whole gradient path (loss -> read -> encoder) is explicit
and checkable by finite differences.

A training iteration runs: encode both domains, cluster by class, read the
memory per cluster, form the weighted loss, backpropagate into the encoders,
apply Adam, then fold the iteration's features into the memory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .memory import ClassCluster, MemoryBank, read, read_backward, update
from .numerics import AdamState, adam_step
from .objectives import ContrastiveConfig, LossTerm, contrastive_loss, triplet_loss
from .serialize import matrix_text, vector_text
from .synthdata import FeatureScene

ENCODER_FORMAT_VERSION = 1

_DOMAINS = ("x", "y")


@dataclass
class LinearEncoder:
    """Row-wise affine map with per-parameter Adam state."""

    weight: np.ndarray
    bias: np.ndarray
    weight_state: AdamState
    bias_state: AdamState

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
    ) -> "LinearEncoder":
        if in_channels < 1 or out_channels < 1:
            raise ShapeError("encoder needs at least one input and output channel")
        weight = rng.standard_normal((out_channels, in_channels)) / np.sqrt(in_channels)
        bias = np.zeros(out_channels)
        return cls(
            weight=weight,
            bias=bias,
            weight_state=AdamState.for_param(weight.shape, learning_rate, beta1, beta2),
            bias_state=AdamState.for_param(bias.shape, learning_rate, beta1, beta2),
        )

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


def forward(enc: LinearEncoder, inputs: np.ndarray) -> np.ndarray:
    """Affine map over rows: inputs @ W.T + b."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != enc.in_channels:
        raise ShapeError(f"inputs shape {inputs.shape} incompatible with W {enc.weight.shape}")
    return inputs @ enc.weight.T + enc.bias


def backward(
    enc: LinearEncoder, inputs: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_weight, d_bias, d_inputs) for a prior forward call."""
    inputs = np.asarray(inputs, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (inputs.shape[0], enc.out_channels):
        raise ShapeError(
            f"upstream shape {upstream.shape}, expected {(inputs.shape[0], enc.out_channels)}"
        )
    return upstream.T @ inputs, upstream.sum(axis=0), upstream @ enc.weight


def apply_gradients(enc: LinearEncoder, grad_weight: np.ndarray, grad_bias: np.ndarray) -> None:
    enc.weight = adam_step(enc.weight, grad_weight, enc.weight_state)
    enc.bias = adam_step(enc.bias, grad_bias, enc.bias_state)


@dataclass
class EncoderSet:
    """Content and style encoders for both domains."""

    content_x: LinearEncoder
    content_y: LinearEncoder
    style_x: LinearEncoder
    style_y: LinearEncoder

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
    ) -> "EncoderSet":
        make = lambda: LinearEncoder.create(rng, in_channels, out_channels, learning_rate, beta1, beta2)
        return cls(content_x=make(), content_y=make(), style_x=make(), style_y=make())

    def content(self, domain: str) -> LinearEncoder:
        return self.content_x if domain == "x" else self.content_y

    def style(self, domain: str) -> LinearEncoder:
        return self.style_x if domain == "x" else self.style_y

    def all(self) -> tuple[LinearEncoder, ...]:
        return (self.content_x, self.content_y, self.style_x, self.style_y)


@dataclass(frozen=True)
class TrainSettings:
    """Per-iteration knobs consumed by train_step."""

    objective: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    rec_weight: float = 1.0
    loss_variant: str = "contrastive"
    triplet_margin: float = 1.0
    class_aware: bool = True
    update_memory: bool = True

    def __post_init__(self):
        if self.loss_variant not in ("contrastive", "triplet"):
            raise ConfigError(f"unknown loss variant {self.loss_variant!r}")
        if self.rec_weight < 0.0:
            raise ConfigError("rec_weight must be non-negative")
        if self.triplet_margin < 0.0:
            raise ConfigError("triplet_margin must be non-negative")


@dataclass
class LossReport:
    """Unweighted loss values plus per-position positive item assignments."""

    key_loss: float
    value_loss: float
    rec_loss: float
    total: float
    key_positives: dict[str, np.ndarray]
    value_positives: dict[str, np.ndarray]


@dataclass
class ForwardPass:
    """Encoded features, their loss gradients, and the per-class clusters."""

    content: dict[str, np.ndarray]
    style: dict[str, np.ndarray]
    grad_content: dict[str, np.ndarray]
    grad_style: dict[str, np.ndarray]
    clusters: dict[str, list[ClassCluster]]


def _encoded_clusters(
    scene: FeatureScene,
    content: np.ndarray,
    style: np.ndarray,
    bank: MemoryBank,
    class_aware: bool,
) -> list[ClassCluster]:
    if class_aware:
        class_ids = np.unique(scene.labels)
        return [
            ClassCluster(
                class_id=int(cid),
                content=content[positions],
                style=style[positions],
                positions=positions,
            )
            for cid in class_ids
            for positions in (np.flatnonzero(scene.labels == cid),)
        ]
    if len(bank.layout.entries) != 1:
        raise ConfigError("pooled training needs a single-partition bank layout")
    positions = np.arange(scene.positions)
    return [ClassCluster(bank.layout.entries[0].class_id, content, style, positions)]


def _item_loss(
    queries: np.ndarray, items: np.ndarray, pool: np.ndarray, settings: TrainSettings
) -> LossTerm:
    if settings.loss_variant == "contrastive":
        return contrastive_loss(queries, items, pool, settings.objective)
    return triplet_loss(queries, items, pool, settings.triplet_margin)


def compute_losses(
    encoders: EncoderSet,
    bank: MemoryBank,
    scene_x: FeatureScene,
    scene_y: FeatureScene,
    settings: TrainSettings,
) -> tuple[LossReport, ForwardPass]:
    """Forward pass over a scene pair against a frozen bank.

    Returns the loss report plus encoded features with the analytic gradient
    of the weighted total loss with respect to each encoded feature matrix.
    Neither the encoders nor the bank are modified.
    """
    if scene_x.positions != scene_y.positions:
        raise ShapeError("paired scenes must have the same number of positions")
    scenes = {"x": scene_x, "y": scene_y}
    content = {d: forward(encoders.content(d), scenes[d].content) for d in _DOMAINS}
    style = {d: forward(encoders.style(d), scenes[d].style) for d in _DOMAINS}
    clusters = {
        d: _encoded_clusters(scenes[d], content[d], style[d], bank, settings.class_aware)
        for d in _DOMAINS
    }

    p_total = scene_x.positions
    cfg = settings.objective
    grad_content = {d: np.zeros_like(content[d]) for d in _DOMAINS}
    grad_style = {d: np.zeros_like(style[d]) for d in _DOMAINS}
    key_positives = {d: np.full(p_total, -1, dtype=np.intp) for d in _DOMAINS}
    value_positives = {d: np.full(p_total, -1, dtype=np.intp) for d in _DOMAINS}
    key_loss = value_loss = rec_loss = 0.0

    for d in _DOMAINS:
        opposite = "y" if d == "x" else "x"
        same_values = bank.values_x if d == "x" else bank.values_y
        for cluster in clusters[d]:
            offset, count = bank.layout.span(cluster.class_id)
            pool = np.arange(offset, offset + count)

            term_k = _item_loss(cluster.content, bank.keys, pool, settings)
            key_loss += term_k.value
            grad_content[d][cluster.positions] += cfg.key_weight * term_k.grad
            key_positives[d][cluster.positions] = term_k.positives

            term_v = _item_loss(cluster.style, same_values, pool, settings)
            value_loss += term_v.value
            grad_style[d][cluster.positions] += cfg.value_weight * term_v.grad
            value_positives[d][cluster.positions] = term_v.positives

            # style reconstruction through the read: the cross-domain mixture
            # should reproduce the paired scene's encoded style
            result = read(bank, cluster, d)
            target = style[opposite][cluster.positions]
            diff = result.aggregated_style - target
            rec_loss += float(np.sum(diff * diff)) / p_total
            upstream = (2.0 / p_total) * diff
            grad_content[d][cluster.positions] += settings.rec_weight * read_backward(
                bank, cluster, d, upstream
            )
            grad_style[opposite][cluster.positions] -= settings.rec_weight * upstream

    total = cfg.key_weight * key_loss + cfg.value_weight * value_loss + settings.rec_weight * rec_loss
    report = LossReport(key_loss, value_loss, rec_loss, total, key_positives, value_positives)
    return report, ForwardPass(content, style, grad_content, grad_style, clusters)


def train_step(
    encoders: EncoderSet,
    bank: MemoryBank,
    scene_x: FeatureScene,
    scene_y: FeatureScene,
    settings: TrainSettings,
) -> tuple[LossReport, MemoryBank]:
    """One training iteration.

    The encoders are updated in place through their Adam states; the returned
    bank is a new object (reads and losses always use the iteration's
    starting bank). Input scenes are never modified.
    """
    report, fwd = compute_losses(encoders, bank, scene_x, scene_y, settings)

    scenes = {"x": scene_x, "y": scene_y}
    for d in _DOMAINS:
        gw, gb, _ = backward(encoders.content(d), scenes[d].content, fwd.grad_content[d])
        apply_gradients(encoders.content(d), gw, gb)
        gw, gb, _ = backward(encoders.style(d), scenes[d].style, fwd.grad_style[d])
        apply_gradients(encoders.style(d), gw, gb)

    for enc in encoders.all():
        if not (np.all(np.isfinite(enc.weight)) and np.all(np.isfinite(enc.bias))):
            raise ValidationError("encoder parameters became non-finite")

    if not settings.update_memory:
        return report, bank

    by_class_x = {c.class_id: c for c in fwd.clusters["x"]}
    by_class_y = {c.class_id: c for c in fwd.clusters["y"]}
    new_bank = bank
    for class_id in sorted(set(by_class_x) | set(by_class_y)):
        new_bank = update(new_bank, by_class_x.get(class_id), by_class_y.get(class_id))
    return report, new_bank


# --- persistence ---


def save_encoders(encoders: EncoderSet, path: str | Path) -> None:
    """Checkpoint weights and biases (optimizer state is not persisted)."""
    blocks = []
    for name in ("content_x", "content_y", "style_x", "style_y"):
        enc: LinearEncoder = getattr(encoders, name)
        blocks.append(
            f'    "{name}": {{\n'
            f'      "weight": {matrix_text(enc.weight, "      ")},\n'
            f'      "bias": {vector_text(enc.bias)}\n'
            "    }"
        )
    first = encoders.content_x
    parts = [
        "{",
        f'  "version": {ENCODER_FORMAT_VERSION},',
        f'  "in_channels": {first.in_channels},',
        f'  "out_channels": {first.out_channels},',
        '  "encoders": {',
        ",\n".join(blocks),
        "  }",
        "}",
        "",
    ]
    Path(path).write_text("\n".join(parts))


def load_encoders(
    path: str | Path,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
) -> EncoderSet:
    """Load a checkpoint; Adam states start fresh."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"encoder file {path}: {exc}") from exc
    if doc.get("version") != ENCODER_FORMAT_VERSION:
        raise ValidationError(f"unsupported encoder version {doc.get('version')!r}")
    loaded = {}
    for name in ("content_x", "content_y", "style_x", "style_y"):
        block = doc.get("encoders", {}).get(name)
        if block is None:
            raise ValidationError(f"encoder file missing {name!r}")
        weight = np.asarray(block["weight"], dtype=np.float64)
        bias = np.asarray(block["bias"], dtype=np.float64)
        if weight.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weight.shape[0]:
            raise ValidationError(f"encoder {name!r} has inconsistent shapes")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise ValidationError(f"encoder {name!r} contains non-finite values")
        loaded[name] = LinearEncoder(
            weight=weight,
            bias=bias,
            weight_state=AdamState.for_param(weight.shape, learning_rate, beta1, beta2),
            bias_state=AdamState.for_param(bias.shape, learning_rate, beta1, beta2),
        )
    return EncoderSet(**loaded)
