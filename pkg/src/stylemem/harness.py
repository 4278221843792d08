"""Experiment orchestration: configuration, training loop, evaluation, CSV.

A run is fully determined by its resolved configuration (which includes the
seed): scene streams, bank and encoder initialization, and evaluation scenes
are all derived from the seed through fixed stream keys, and no artifact
contains timestamps, so reruns are byte-identical.

Config files are JSON. A file may name a ``preset`` ("toy" or "full") and
override any subset of keys; the expansion to a fully explicit config is
logged and written to the output directory as resolved_config.json. Keys:

  memory_mode        "class-aware" (partitioned addressing) or "single"
                     (one pooled partition, class info ignored in training)
  loss_variant       "contrastive" or "triplet"
  layout             ordered [{"class": id, "count": n}, ...]; also the
                     reference partition map used by the purity metric
  channels           memory/encoder output width C
  temperature        contrastive softmax temperature
  key_loss_weight    weight of the key-side item loss
  value_loss_weight  weight of the value-side item loss
  rec_loss_weight    weight of the read-reconstruction term
  triplet_margin     hinge margin for the triplet variant
  learning_rate, adam_beta1, adam_beta2
  iterations         training iterations T
  update_every       fold features into memory every k-th iteration
  seed               root seed
  eval_scenes        held-out scene pairs for the final evaluation
  assignment_scenes  eval scenes exported to assignments.csv
  scene              {classes, input_channels, height, width, noise_sigma,
                      content_overlap, style_overlap}
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .encoder import (
    EncoderSet,
    LossReport,
    TrainSettings,
    compute_losses,
    forward,
    save_encoders,
    train_step,
)
from .errors import ConfigError
from .memory import MemoryBank, MemoryLayout, init_bank, load_bank, read_global, save_bank
from .numerics import cosine_rows, split_rng
from .objectives import ContrastiveConfig
from .serialize import fmt_float
from .synthdata import DomainSpec, FeatureScene, generate_scene_pair

log = logging.getLogger(__name__)

METRICS_HEADER = "iter,key_loss,value_loss,rec_loss,util_entropy,purity,fidelity"

# stream keys under the root seed (see numerics.split_rng)
STREAM_SPEC = 0
STREAM_BANK = 1
STREAM_ENCODERS = 2
STREAM_TRAIN = 3
STREAM_EVAL = 4

# class id of the single pooled partition in "single" memory mode
POOLED_CLASS_ID = -1

_SCENE_KEYS = (
    "classes",
    "input_channels",
    "height",
    "width",
    "noise_sigma",
    "content_overlap",
    "style_overlap",
)

_TOP_KEYS = (
    "preset",
    "memory_mode",
    "loss_variant",
    "layout",
    "channels",
    "temperature",
    "key_loss_weight",
    "value_loss_weight",
    "rec_loss_weight",
    "triplet_margin",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "iterations",
    "update_every",
    "seed",
    "eval_scenes",
    "assignment_scenes",
    "scene",
)

PRESETS: dict[str, dict] = {
    "toy": {
        "memory_mode": "class-aware",
        "loss_variant": "contrastive",
        "layout": [
            {"class": 1, "count": 3},
            {"class": 2, "count": 2},
            {"class": 3, "count": 2},
            {"class": 0, "count": 3},
        ],
        "channels": 16,
        "temperature": 0.1,
        "key_loss_weight": 1.0,
        "value_loss_weight": 0.5,
        "rec_loss_weight": 1.0,
        "triplet_margin": 1.0,
        "learning_rate": 1e-3,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "iterations": 2000,
        "update_every": 2,
        "seed": 19,
        "eval_scenes": 100,
        "assignment_scenes": 4,
        "scene": {
            "classes": 4,
            "input_channels": 16,
            "height": 16,
            "width": 16,
            "noise_sigma": 0.05,
            "content_overlap": 0.75,
            "style_overlap": 0.98,
        },
    },
    "full": {
        "memory_mode": "class-aware",
        "loss_variant": "contrastive",
        "layout": [
            {"class": 1, "count": 5},
            {"class": 2, "count": 3},
            {"class": 3, "count": 2},
            {"class": 0, "count": 10},
        ],
        "channels": 256,
        "temperature": 0.1,
        "key_loss_weight": 1.0,
        "value_loss_weight": 0.5,
        "rec_loss_weight": 1.0,
        "triplet_margin": 1.0,
        "learning_rate": 1e-3,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "iterations": 2000,
        "update_every": 2,
        "seed": 19,
        "eval_scenes": 100,
        "assignment_scenes": 4,
        "scene": {
            "classes": 4,
            "input_channels": 64,
            "height": 16,
            "width": 16,
            "noise_sigma": 0.05,
            "content_overlap": 0.75,
            "style_overlap": 0.98,
        },
    },
}


@dataclass(frozen=True)
class SceneConfig:
    classes: int
    input_channels: int
    height: int
    width: int
    noise_sigma: float
    content_overlap: float
    style_overlap: float


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str | None
    memory_mode: str
    loss_variant: str
    layout: tuple[tuple[int, int], ...]
    channels: int
    temperature: float
    key_loss_weight: float
    value_loss_weight: float
    rec_loss_weight: float
    triplet_margin: float
    learning_rate: float
    adam_beta1: float
    adam_beta2: float
    iterations: int
    update_every: int
    seed: int
    eval_scenes: int
    assignment_scenes: int
    scene: SceneConfig

    @property
    def n_items(self) -> int:
        return sum(count for _, count in self.layout)

    def reference_layout(self) -> MemoryLayout:
        """The class partition map; used for addressing in class-aware mode
        and as the purity reference in both modes."""
        return MemoryLayout.from_counts(self.layout)

    def bank_layout(self) -> MemoryLayout:
        if self.memory_mode == "class-aware":
            return self.reference_layout()
        return MemoryLayout.from_counts([(POOLED_CLASS_ID, self.n_items)])

    def settings(self, update_memory: bool = True) -> TrainSettings:
        return TrainSettings(
            objective=ContrastiveConfig(
                temperature=self.temperature,
                key_weight=self.key_loss_weight,
                value_weight=self.value_loss_weight,
            ),
            rec_weight=self.rec_loss_weight,
            loss_variant=self.loss_variant,
            triplet_margin=self.triplet_margin,
            class_aware=self.memory_mode == "class-aware",
            update_memory=update_memory,
        )

    def domain_spec(self) -> DomainSpec:
        return DomainSpec.create(
            split_rng(self.seed, STREAM_SPEC),
            classes=self.scene.classes,
            input_channels=self.scene.input_channels,
            height=self.scene.height,
            width=self.scene.width,
            noise_sigma=self.scene.noise_sigma,
            content_overlap=self.scene.content_overlap,
            style_overlap=self.scene.style_overlap,
        )

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["layout"] = [{"class": cid, "count": count} for cid, count in self.layout]
        return doc


def resolve_config(raw: dict) -> dict:
    """Expand a (possibly preset-based) config dict to a fully explicit one."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(_TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    preset = raw.get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (have {sorted(PRESETS)})")
    resolved: dict = json.loads(json.dumps(PRESETS[preset])) if preset else {}
    resolved["preset"] = preset

    overrides = []
    for key, value in raw.items():
        if key == "preset":
            continue
        if key == "scene":
            if not isinstance(value, dict):
                raise ConfigError("scene must be an object")
            bad = set(value) - set(_SCENE_KEYS)
            if bad:
                raise ConfigError(f"unknown scene keys: {sorted(bad)}")
            resolved.setdefault("scene", {}).update(value)
        else:
            resolved[key] = value
        overrides.append(key)

    missing = [k for k in _TOP_KEYS if k != "preset" and k not in resolved]
    if missing:
        raise ConfigError(f"config missing keys: {missing}")
    missing_scene = [k for k in _SCENE_KEYS if k not in resolved["scene"]]
    if missing_scene:
        raise ConfigError(f"scene config missing keys: {missing_scene}")
    log.info("resolved config: preset=%r, overridden keys=%s", preset, sorted(overrides))
    return resolved


def config_from_dict(resolved: dict) -> ExperimentConfig:
    """Validate a resolved config dict and build the typed config."""
    try:
        layout_entries = tuple(
            (int(e["class"]), int(e["count"])) for e in resolved["layout"]
        )
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"layout entries need 'class' and 'count': {exc}") from exc
    scene_raw = resolved["scene"]
    cfg = ExperimentConfig(
        preset=resolved.get("preset"),
        memory_mode=str(resolved["memory_mode"]),
        loss_variant=str(resolved["loss_variant"]),
        layout=layout_entries,
        channels=int(resolved["channels"]),
        temperature=float(resolved["temperature"]),
        key_loss_weight=float(resolved["key_loss_weight"]),
        value_loss_weight=float(resolved["value_loss_weight"]),
        rec_loss_weight=float(resolved["rec_loss_weight"]),
        triplet_margin=float(resolved["triplet_margin"]),
        learning_rate=float(resolved["learning_rate"]),
        adam_beta1=float(resolved["adam_beta1"]),
        adam_beta2=float(resolved["adam_beta2"]),
        iterations=int(resolved["iterations"]),
        update_every=int(resolved["update_every"]),
        seed=int(resolved["seed"]),
        eval_scenes=int(resolved["eval_scenes"]),
        assignment_scenes=int(resolved["assignment_scenes"]),
        scene=SceneConfig(
            classes=int(scene_raw["classes"]),
            input_channels=int(scene_raw["input_channels"]),
            height=int(scene_raw["height"]),
            width=int(scene_raw["width"]),
            noise_sigma=float(scene_raw["noise_sigma"]),
            content_overlap=float(scene_raw["content_overlap"]),
            style_overlap=float(scene_raw["style_overlap"]),
        ),
    )
    if cfg.memory_mode not in ("class-aware", "single"):
        raise ConfigError(f"memory_mode must be 'class-aware' or 'single', got {cfg.memory_mode!r}")
    if cfg.loss_variant not in ("contrastive", "triplet"):
        raise ConfigError(f"loss_variant must be 'contrastive' or 'triplet', got {cfg.loss_variant!r}")
    if cfg.temperature <= 0.0:
        raise ConfigError("temperature must be > 0")
    for name in ("key_loss_weight", "value_loss_weight", "rec_loss_weight", "triplet_margin"):
        if getattr(cfg, name) < 0.0:
            raise ConfigError(f"{name} must be non-negative")
    if cfg.learning_rate <= 0.0:
        raise ConfigError("learning_rate must be > 0")
    if not (0.0 <= cfg.adam_beta1 < 1.0 and 0.0 <= cfg.adam_beta2 < 1.0):
        raise ConfigError("adam betas must lie in [0, 1)")
    if cfg.iterations < 0:
        raise ConfigError("iterations must be >= 0")
    if cfg.update_every < 1:
        raise ConfigError("update_every must be >= 1")
    if cfg.channels < 1:
        raise ConfigError("channels must be >= 1")
    if cfg.eval_scenes < 1:
        raise ConfigError("eval_scenes must be >= 1")
    if not 0 <= cfg.assignment_scenes <= cfg.eval_scenes:
        raise ConfigError("assignment_scenes must lie in [0, eval_scenes]")
    if any(cid == POOLED_CLASS_ID for cid, _ in cfg.layout):
        raise ConfigError(f"class id {POOLED_CLASS_ID} is reserved for pooled mode")
    if cfg.scene.classes < 2:
        raise ConfigError("scene.classes must be >= 2")
    if cfg.scene.input_channels < 1:
        raise ConfigError("scene.input_channels must be >= 1")
    if cfg.scene.height < 2 or cfg.scene.width < 2:
        raise ConfigError("scene grid must be at least 2x2")
    if cfg.scene.noise_sigma < 0.0:
        raise ConfigError("scene.noise_sigma must be non-negative")
    for name in ("content_overlap", "style_overlap"):
        if not 0.0 <= getattr(cfg.scene, name) < 1.0:
            raise ConfigError(f"scene.{name} must lie in [0, 1)")
    cfg.reference_layout()  # surfaces layout errors early
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    return config_from_dict(resolve_config(raw))


def _render_json(value, indent: str = "") -> str:
    """Deterministic JSON with floats at 17 significant digits."""
    if isinstance(value, dict):
        if not value:
            return "{}"
        inner = ",\n".join(
            f'{indent}  {json.dumps(k)}: {_render_json(value[k], indent + "  ")}'
            for k in sorted(value)
        )
        return "{\n" + inner + "\n" + indent + "}"
    if isinstance(value, list):
        return "[" + ", ".join(_render_json(v, indent) for v in value) + "]"
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, float):
        return fmt_float(value)
    return json.dumps(value)


@dataclass
class MetricsRow:
    """One evaluation snapshot; purity and fidelity use test-time reads."""

    iteration: int
    key_loss: float
    value_loss: float
    rec_loss: float
    util_entropy: float
    purity: float
    fidelity: float

    def csv_line(self) -> str:
        return ",".join(
            [str(self.iteration)]
            + [
                fmt_float(v)
                for v in (
                    self.key_loss,
                    self.value_loss,
                    self.rec_loss,
                    self.util_entropy,
                    self.purity,
                    self.fidelity,
                )
            ]
        )


@dataclass
class RunResult:
    bank: MemoryBank
    encoders: EncoderSet
    metrics: list[MetricsRow]
    final_eval: MetricsRow


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0.0]
    return float(-np.sum(nz * np.log(nz)))


@dataclass
class _EvalAccumulator:
    alpha_sum: np.ndarray
    queries: int = 0
    purity_hits: int = 0
    fidelity_sum: float = 0.0

    def entropy(self) -> float:
        return _entropy(self.alpha_sum / self.alpha_sum.sum())

    def purity(self) -> float:
        return self.purity_hits / self.queries

    def fidelity(self) -> float:
        return self.fidelity_sum / self.queries


def _accumulate_pair(
    acc: _EvalAccumulator,
    bank: MemoryBank,
    encoders: EncoderSet,
    scene_x: FeatureScene,
    scene_y: FeatureScene,
    ref_layout: MemoryLayout,
    collect=None,
) -> None:
    """Test-time metrics of one scene pair (global reads, no class labels)."""
    spans = {e.class_id: (e.offset, e.count) for e in ref_layout.entries}
    scenes = {"x": scene_x, "y": scene_y}
    for d in ("x", "y"):
        opposite = "y" if d == "x" else "x"
        content = forward(encoders.content(d), scenes[d].content)
        result = read_global(bank, content, d)
        target = forward(encoders.style(opposite), scenes[opposite].style)

        acc.alpha_sum += result.weights.sum(axis=0)
        acc.queries += content.shape[0]
        acc.fidelity_sum += float(cosine_rows(result.aggregated_style, target).sum())
        top = np.argmax(result.weights, axis=1)
        labels = scenes[d].labels
        for class_id, (offset, count) in spans.items():
            mask = labels == class_id
            acc.purity_hits += int(np.sum((top[mask] >= offset) & (top[mask] < offset + count)))
        if collect is not None:
            collect(d, labels, top, result.weights, content)


def _pair_metrics(
    bank: MemoryBank,
    encoders: EncoderSet,
    scene_x: FeatureScene,
    scene_y: FeatureScene,
    ref_layout: MemoryLayout,
) -> tuple[float, float, float]:
    acc = _EvalAccumulator(alpha_sum=np.zeros(bank.n_items))
    _accumulate_pair(acc, bank, encoders, scene_x, scene_y, ref_layout)
    return acc.entropy(), acc.purity(), acc.fidelity()


def run_training(cfg: ExperimentConfig, out_dir: str | Path) -> RunResult:
    """Train for cfg.iterations scene pairs and write all artifacts.

    Artifacts: resolved_config.json, metrics.csv (one row per iteration),
    bank.json, encoders.json, final_eval.json, assignments.csv.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(_render_json(cfg.to_dict()) + "\n")

    spec = cfg.domain_spec()
    bank = init_bank(cfg.bank_layout(), cfg.channels, split_rng(cfg.seed, STREAM_BANK))
    encoders = EncoderSet.create(
        split_rng(cfg.seed, STREAM_ENCODERS),
        cfg.scene.input_channels,
        cfg.channels,
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
    )
    ref_layout = cfg.reference_layout()

    log.info(
        "training: mode=%s loss=%s N=%d C=%d T=%d seed=%d",
        cfg.memory_mode, cfg.loss_variant, cfg.n_items, cfg.channels, cfg.iterations, cfg.seed,
    )
    metrics: list[MetricsRow] = []
    for t in range(cfg.iterations):
        scene_x, scene_y = generate_scene_pair(spec, split_rng(cfg.seed, STREAM_TRAIN, t))
        settings = cfg.settings(update_memory=(t % cfg.update_every == 0))
        report, bank = train_step(encoders, bank, scene_x, scene_y, settings)
        entropy, purity, fidelity = _pair_metrics(bank, encoders, scene_x, scene_y, ref_layout)
        metrics.append(
            MetricsRow(t, report.key_loss, report.value_loss, report.rec_loss, entropy, purity, fidelity)
        )

    lines = [METRICS_HEADER] + [row.csv_line() for row in metrics]
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    save_bank(bank, out / "bank.json")
    save_encoders(encoders, out / "encoders.json")

    final_eval = evaluate(
        bank, encoders, cfg, cfg.eval_scenes, assignments_path=out / "assignments.csv"
    )
    (out / "final_eval.json").write_text(_render_json(asdict(final_eval)) + "\n")
    log.info(
        "done: purity=%.4f fidelity=%.4f entropy=%.4f", final_eval.purity,
        final_eval.fidelity, final_eval.util_entropy,
    )
    return RunResult(bank, encoders, metrics, final_eval)


def evaluate(
    bank: MemoryBank,
    encoders: EncoderSet,
    cfg: ExperimentConfig,
    scene_count: int,
    assignments_path: str | Path | None = None,
) -> MetricsRow:
    """Metrics over fresh held-out scenes using test-time global reads.

    Loss fields are per-scene means of the training objective (computed with
    the training-time class pools, without touching bank or encoders). When
    ``assignments_path`` is set, the first cfg.assignment_scenes scenes also
    dump one row per query: scene, domain, position, label, assigned item,
    its weight, and the encoded content features (for external projection).
    """
    if scene_count < 1:
        raise ConfigError("evaluation needs at least one scene")
    spec = cfg.domain_spec()
    ref_layout = cfg.reference_layout()
    settings = cfg.settings(update_memory=False)

    acc = _EvalAccumulator(alpha_sum=np.zeros(bank.n_items))
    loss_sums = np.zeros(3)
    assignment_lines: list[str] = []

    for i in range(scene_count):
        scene_x, scene_y = generate_scene_pair(spec, split_rng(cfg.seed, STREAM_EVAL, i))
        report, _ = compute_losses(encoders, bank, scene_x, scene_y, settings)
        loss_sums += (report.key_loss, report.value_loss, report.rec_loss)

        collect = None
        if assignments_path is not None and i < cfg.assignment_scenes:
            def collect(d, labels, top, weights, content, _scene=i):
                for p in range(labels.shape[0]):
                    features = ",".join(fmt_float(v) for v in content[p])
                    assignment_lines.append(
                        f"{_scene},{d},{p},{labels[p]},{top[p]},"
                        f"{fmt_float(weights[p, top[p]])},{features}"
                    )
        _accumulate_pair(acc, bank, encoders, scene_x, scene_y, ref_layout, collect)

    if assignments_path is not None:
        feature_names = ",".join(f"c{i}" for i in range(bank.channels))
        header = f"scene,domain,position,label,item,weight,{feature_names}"
        Path(assignments_path).write_text("\n".join([header] + assignment_lines) + "\n")

    return MetricsRow(
        iteration=cfg.iterations,
        key_loss=float(loss_sums[0]) / scene_count,
        value_loss=float(loss_sums[1]) / scene_count,
        rec_loss=float(loss_sums[2]) / scene_count,
        util_entropy=acc.entropy(),
        purity=acc.purity(),
        fidelity=acc.fidelity(),
    )


def inspect_bank(path: str | Path) -> str:
    """Human-readable bank summary: layout, norms, key similarity structure."""
    bank = load_bank(path)
    lines = [
        f"bank file: {path}",
        f"items: {bank.n_items}, channels: {bank.channels}",
        "layout:",
    ]
    for e in bank.layout.entries:
        lines.append(f"  class {e.class_id}: items [{e.offset}, {e.offset + e.count})")

    lines.append("item norms (key / value_x / value_y):")
    for i in range(bank.n_items):
        lines.append(
            f"  {i:3d}  "
            f"{np.linalg.norm(bank.keys[i]):.9f}  "
            f"{np.linalg.norm(bank.values_x[i]):.9f}  "
            f"{np.linalg.norm(bank.values_y[i]):.9f}"
        )

    lines.append("pairwise key cosine:")
    if bank.n_items < 2:
        lines.append("  (single item, no pairs)")
    else:
        sims = bank.keys @ bank.keys.T
        for i in range(bank.n_items):
            lines.append(f"  {i:3d}  " + " ".join(f"{sims[i, j]:+.3f}" for j in range(bank.n_items)))

        lines.append("partition key similarity (mean cosine):")
        for e in bank.layout.entries:
            block = slice(e.offset, e.offset + e.count)
            inside = sims[block, block]
            off_diag = inside[~np.eye(e.count, dtype=bool)]
            intra = f"{off_diag.mean():+.3f}" if off_diag.size else "n/a"
            outside_mask = np.ones(bank.n_items, dtype=bool)
            outside_mask[block] = False
            inter = (
                f"{sims[block][:, outside_mask].mean():+.3f}"
                if outside_mask.any()
                else "n/a"
            )
            lines.append(f"  class {e.class_id}: intra {intra}, inter {inter}")
    return "\n".join(lines)
