import json
import math

import numpy as np
import pytest

from stylemem.cli import main as cli_main
from stylemem.encoder import EncoderSet, LinearEncoder
from stylemem.errors import ConfigError, ValidationError
from stylemem.harness import (
    PRESETS,
    MetricsRow,
    config_from_dict,
    evaluate,
    inspect_bank,
    load_config,
    resolve_config,
    run_training,
)
from stylemem.memory import MemoryBank, init_bank, load_bank, save_bank
from stylemem.numerics import AdamState, l2_normalize_rows, make_rng


def toy_config(**overrides):
    raw = {"preset": "toy"}
    raw.update(overrides)
    return config_from_dict(resolve_config(raw))


def tiny_config(**overrides):
    base = {
        "preset": "toy",
        "iterations": 5,
        "eval_scenes": 2,
        "assignment_scenes": 1,
        "scene": {"height": 6, "width": 6},
    }
    base.update(overrides)
    return config_from_dict(resolve_config(base))


# --- config resolution ---


def test_preset_expansion_covers_all_keys():
    cfg = toy_config()
    assert cfg.n_items == 10
    assert cfg.channels == 16
    assert cfg.layout == ((1, 3), (2, 2), (3, 2), (0, 3))
    assert cfg.scene.height == 16


def test_full_preset_scale():
    raw = resolve_config({"preset": "full"})
    cfg = config_from_dict(raw)
    assert cfg.n_items == 20
    assert cfg.channels == 256
    assert cfg.layout == ((1, 5), (2, 3), (3, 2), (0, 10))


def test_explicit_config_requires_every_key():
    with pytest.raises(ConfigError, match="missing"):
        resolve_config({"memory_mode": "class-aware"})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        resolve_config({"preset": "toy", "typo_key": 1})
    with pytest.raises(ConfigError, match="unknown scene keys"):
        resolve_config({"preset": "toy", "scene": {"depth": 3}})
    with pytest.raises(ConfigError, match="unknown preset"):
        resolve_config({"preset": "huge"})


def test_scene_overrides_merge_into_preset():
    cfg = toy_config(scene={"noise_sigma": 0.2})
    assert cfg.scene.noise_sigma == 0.2
    assert cfg.scene.height == 16  # untouched preset value


def test_config_range_validation():
    with pytest.raises(ConfigError):
        toy_config(temperature=0.0)
    with pytest.raises(ConfigError):
        toy_config(update_every=0)
    with pytest.raises(ConfigError):
        toy_config(memory_mode="dual")
    with pytest.raises(ConfigError):
        toy_config(scene={"content_overlap": 1.0})
    with pytest.raises(ConfigError):
        toy_config(layout=[{"class": -1, "count": 10}])


def test_ablation_configs_differ_only_in_two_keys():
    variants = {}
    for mode in ("class-aware", "single"):
        for loss in ("contrastive", "triplet"):
            resolved = resolve_config(
                {"preset": "toy", "memory_mode": mode, "loss_variant": loss}
            )
            variants[(mode, loss)] = resolved
    base = variants[("class-aware", "contrastive")]
    for key_pair, resolved in variants.items():
        diff = {
            k
            for k in base
            if json.dumps(resolved[k], sort_keys=True) != json.dumps(base[k], sort_keys=True)
        }
        assert diff <= {"memory_mode", "loss_variant"}, (key_pair, diff)


def test_load_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"preset": "toy", "iterations": 3}))
    cfg = load_config(path)
    assert cfg.iterations == 3
    path.write_text("{broken")
    with pytest.raises(ConfigError):
        load_config(path)


# --- training runs ---


def test_run_artifacts_and_metrics_shape(tmp_path):
    cfg = tiny_config()
    result = run_training(cfg, tmp_path)
    for name in (
        "resolved_config.json",
        "metrics.csv",
        "bank.json",
        "encoders.json",
        "final_eval.json",
        "assignments.csv",
    ):
        assert (tmp_path / name).exists(), name
    lines = (tmp_path / "metrics.csv").read_text().strip().split("\n")
    assert lines[0] == "iter,key_loss,value_loss,rec_loss,util_entropy,purity,fidelity"
    assert len(lines) == 1 + cfg.iterations
    for row in result.metrics:
        assert 0.0 <= row.purity <= 1.0
        assert 0.0 <= row.util_entropy <= math.log(cfg.n_items) + 1e-12
        assert -1.0 <= row.fidelity <= 1.0
        for v in (row.key_loss, row.value_loss, row.rec_loss):
            assert np.isfinite(v)


def test_zero_iteration_run(tmp_path):
    cfg = tiny_config(iterations=0)
    result = run_training(cfg, tmp_path)
    assert result.metrics == []
    lines = (tmp_path / "metrics.csv").read_text().strip().split("\n")
    assert len(lines) == 1
    assert (tmp_path / "bank.json").exists()
    assert (tmp_path / "encoders.json").exists()


def test_identical_runs_are_byte_identical(tmp_path):
    cfg = tiny_config(iterations=8)
    run_training(cfg, tmp_path / "a")
    run_training(cfg, tmp_path / "b")
    for name in ("metrics.csv", "bank.json", "encoders.json", "final_eval.json",
                 "resolved_config.json", "assignments.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_single_mode_bank_has_pooled_layout(tmp_path):
    cfg = tiny_config(memory_mode="single")
    result = run_training(cfg, tmp_path)
    assert len(result.bank.layout.entries) == 1
    assert result.bank.layout.entries[0].count == cfg.n_items


# --- evaluation ---


def test_evaluate_uniform_identical_keys_entropy():
    cfg = tiny_config()
    rng = make_rng(0)
    bank = init_bank(cfg.bank_layout(), cfg.channels, rng)
    bank.keys[:] = bank.keys[0]
    encoders = EncoderSet.create(rng, cfg.scene.input_channels, cfg.channels)
    row = evaluate(bank, encoders, cfg, 2)
    assert row.util_entropy == pytest.approx(math.log(cfg.n_items), abs=1e-9)


def test_evaluate_jittered_identical_keys_purity_near_chance():
    cfg = tiny_config()
    rng = make_rng(1)
    bank = init_bank(cfg.bank_layout(), cfg.channels, rng)
    jitter = 1e-6 * rng.standard_normal(bank.keys.shape)
    bank.keys = l2_normalize_rows(np.tile(bank.keys[0], (bank.n_items, 1)) + jitter)
    encoders = EncoderSet.create(rng, cfg.scene.input_channels, cfg.channels)
    row = evaluate(bank, encoders, cfg, 4)
    # with effectively random addressing, purity sits near the layout's
    # chance level sum_k share_k * (N_k / N)
    assert 0.0 < row.purity < 0.6


def identity_encoders(n):
    def enc():
        return LinearEncoder(
            weight=np.eye(n),
            bias=np.zeros(n),
            weight_state=AdamState.for_param((n, n)),
            bias_state=AdamState.for_param((n,)),
        )

    return EncoderSet(content_x=enc(), content_y=enc(), style_x=enc(), style_y=enc())


def test_evaluate_oracle_bank_perfect_purity():
    cfg = tiny_config(scene={"noise_sigma": 0.0})
    spec = cfg.domain_spec()
    layout = cfg.bank_layout()
    n, c = cfg.n_items, cfg.channels
    keys = np.zeros((n, c))
    values_x = np.zeros((n, c))
    values_y = np.zeros((n, c))
    for entry in layout.entries:
        for i in range(entry.offset, entry.offset + entry.count):
            keys[i] = spec.content_prototypes[entry.class_id]
            values_x[i] = spec.style_prototypes_x[entry.class_id]
            values_y[i] = spec.style_prototypes_y[entry.class_id]
    bank = MemoryBank(
        l2_normalize_rows(keys), l2_normalize_rows(values_x), l2_normalize_rows(values_y), layout
    )
    row = evaluate(bank, identity_encoders(c), cfg, 3)
    assert row.purity == 1.0
    assert row.fidelity > 0.95


def test_assignments_csv_contents(tmp_path):
    cfg = tiny_config()
    result = run_training(cfg, tmp_path)
    lines = (tmp_path / "assignments.csv").read_text().strip().split("\n")
    header = lines[0].split(",")
    assert header[:6] == ["scene", "domain", "position", "label", "item", "weight"]
    assert len(header) == 6 + cfg.channels
    p = cfg.scene.height * cfg.scene.width
    assert len(lines) == 1 + cfg.assignment_scenes * 2 * p
    first = lines[1].split(",")
    assert first[1] in ("x", "y")
    assert 0 <= int(first[4]) < cfg.n_items


def test_metrics_row_csv_format():
    row = MetricsRow(3, 1.0, 0.5, 0.25, 2.0, 0.9, 0.8)
    text = row.csv_line()
    assert text.startswith("3,1,0.5,0.25,2,0.90000000000000002,")


# --- inspect ---


def test_inspect_fresh_bank(tmp_path):
    bank = init_bank(toy_config().bank_layout(), 16, make_rng(2))
    path = tmp_path / "bank.json"
    save_bank(bank, path)
    text = inspect_bank(path)
    assert "items: 10, channels: 16" in text
    assert "class 1: items [0, 3)" in text
    assert text.count("1.000000000") >= 30
    assert "partition key similarity" in text


def test_inspect_single_item_bank(tmp_path):
    from stylemem.memory import MemoryLayout

    bank = init_bank(MemoryLayout.from_counts([(0, 1)]), 4, make_rng(3))
    path = tmp_path / "bank.json"
    save_bank(bank, path)
    text = inspect_bank(path)
    assert "(single item, no pairs)" in text


# --- cli ---


def write_tiny_config(path, **overrides):
    raw = {
        "preset": "toy",
        "iterations": 3,
        "eval_scenes": 2,
        "assignment_scenes": 0,
        "scene": {"height": 6, "width": 6},
    }
    raw.update(overrides)
    path.write_text(json.dumps(raw))


def test_cli_train_eval_inspect(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    write_tiny_config(cfg_path)
    out = tmp_path / "run"
    assert cli_main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert set(summary) >= {"purity", "fidelity", "util_entropy"}

    assert (
        cli_main(
            [
                "eval",
                "--bank", str(out / "bank.json"),
                "--encoders", str(out / "encoders.json"),
                "--config", str(cfg_path),
                "--scenes", "2",
            ]
        )
        == 0
    )
    row = json.loads(capsys.readouterr().out)
    assert 0.0 <= row["purity"] <= 1.0

    assert cli_main(["inspect", "--bank", str(out / "bank.json")]) == 0
    assert "pairwise key cosine" in capsys.readouterr().out


def test_cli_validation_error_exit_code(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"preset": "toy", "temperature": -1.0}))
    assert cli_main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_io_error_exit_code(tmp_path, capsys):
    assert cli_main(["inspect", "--bank", str(tmp_path / "missing.json")]) == 2
    capsys.readouterr()


def test_cli_corrupt_bank_exit_code(tmp_path, capsys):
    bad = tmp_path / "bank.json"
    bad.write_text('{"version": 1')
    assert cli_main(["inspect", "--bank", str(bad)]) == 1
    capsys.readouterr()
