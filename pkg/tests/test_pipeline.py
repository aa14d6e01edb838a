import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from scaleadapt import seeding
from scaleadapt.entropy import self_entropy, filter_map
from scaleadapt.model import init_params, load_checkpoint
from scaleadapt.pipeline import Run, RunConfig, load_config, worker_count
from scaleadapt.scale_examples import load_examples
from scaleadapt.selection import SelectionResult
from scaleadapt.synth_data import Dataset
from scaleadapt.tensor import Rect, crop_resize, softmax


def _params_equal(a, b) -> bool:
    return all(np.array_equal(arr, getattr(b, name)) for name, arr in a.blocks())


def test_zero_source_steps_checkpoint_equals_init(tiny_cfg):
    cfg = tiny_cfg(source_steps=0)
    run = Run(cfg)
    run.train_source()
    params, state, _ = load_checkpoint(Path(cfg.out_dir) / "source.lsec")
    fresh = init_params(run.num_classes, seeding.stream(cfg.seed, "init"))
    assert _params_equal(params, fresh)
    assert state.t == 0


def test_fixed_seed_identical_checkpoint_bytes(tiny_cfg):
    cfg_a = tiny_cfg(out_name="a")
    cfg_b = tiny_cfg(out_name="b")
    Run(cfg_a).train_source()
    Run(cfg_b).train_source()
    a = (Path(cfg_a.out_dir) / "source.lsec").read_bytes()
    b = (Path(cfg_b.out_dir) / "source.lsec").read_bytes()
    assert a == b


def test_source_metrics_show_domain_gap(tiny_cfg):
    # undertrained tiny run: only check the reports exist and parse
    cfg = tiny_cfg(source_steps=30)
    run = Run(cfg)
    run.train_source()
    metrics = json.loads((Path(cfg.out_dir) / "source_metrics.json").read_text())
    assert set(metrics) == {"source_miou", "target_miou"}
    assert 0.0 <= metrics["target_miou"] <= 1.0


def test_adapt_rejects_swapped_manifests(tiny_data, tmp_path):
    cfg = RunConfig(
        source_manifest=str(tiny_data["target"]),
        target_manifest=str(tiny_data["target"]),
        out_dir=str(tmp_path / "x"),
    )
    with pytest.raises(ValueError, match="tagged 'target'"):
        Run(cfg)
    cfg = RunConfig(
        source_manifest=str(tiny_data["source"]),
        target_manifest=str(tiny_data["source"]),
        out_dir=str(tmp_path / "y"),
    )
    with pytest.raises(ValueError, match="tagged 'source'"):
        Run(cfg)


def test_adaptation_cannot_read_target_labels(tiny_cfg):
    run = Run(tiny_cfg())
    assert not run.target.has_labels
    assert run.target.load_labels(run.target.ids[0]) is None


def test_round_artifacts_and_threshold_freshness(tiny_cfg):
    cfg = tiny_cfg(rounds=2, steps_per_round=3, source_steps=10, out_name="fresh")
    run = Run(cfg)
    run.train_source()
    run.adapt()
    out = Path(cfg.out_dir)

    for r in (0, 1):
        round_dir = out / f"round_{r}"
        assert (round_dir / "selection.json").exists()
        assert (round_dir / "checkpoint.lsec").exists()
        assert (round_dir / "examples" / "index.json").exists()
        assert (round_dir / "report.csv").exists()

    # thresholds used by round 1's filters must come from round 1's selection,
    # evaluated with the model state entering round 1 (round 0's checkpoint)
    sel = SelectionResult.load(out / "round_1" / "selection.json")
    params, _, _ = load_checkpoint(out / "round_0" / "checkpoint.lsec")
    archive = load_examples(out / "round_1" / "examples")
    index = json.loads((out / "round_1" / "examples" / "index.json").read_text())
    target = Dataset(cfg.target_manifest, with_labels=False)
    from scaleadapt.model import forward

    checked = 0
    for entry in index["examples"][:4]:
        image_id = entry["id"]
        logits, _ = forward(params, target.load_image(image_id))
        p_full = softmax(logits)
        filt_full = filter_map(p_full, self_entropy(p_full), sel.thresholds)
        rect = Rect(*entry["rect"])
        want = crop_resize(filt_full, rect, run.patch_cfg.out_h, run.patch_cfg.out_w, "nearest")
        got = archive[image_id][entry["index"]].filt
        assert np.array_equal(want, got)
        checked += 1
    assert checked


def test_selection_history_csv_matches_round_artifacts(tiny_cfg):
    cfg = tiny_cfg(rounds=2, steps_per_round=2, source_steps=8, out_name="hist")
    run = Run(cfg)
    run.adapt()  # trains source implicitly
    out = Path(cfg.out_dir)
    text = (out / "selection_history.csv").read_text().strip().splitlines()
    assert text[0] == "config,round,class,count"
    rows = [line.split(",") for line in text[1:]]
    for r in (0, 1):
        sel = SelectionResult.load(out / f"round_{r}" / "selection.json")
        for c, count in enumerate(sel.counts):
            match = [row for row in rows if row[1] == str(r) and row[2] == str(c)]
            assert len(match) == 1
            assert int(match[0][3]) == int(count)


def test_trajectory_equivalence_with_zeroed_adaptation(tiny_cfg):
    # beta=0 and thresholds forcing F=0: N rounds equal N*steps of continued
    # source training with the same seed
    source_steps, rounds, per_round = 6, 2, 4
    cfg_adapt = tiny_cfg(
        out_name="adapt",
        source_steps=source_steps,
        rounds=rounds,
        steps_per_round=per_round,
        beta=0.0,
        threshold_override=0.0,
    )
    run_a = Run(cfg_adapt)
    run_a.train_source()
    run_a.adapt()

    cfg_plain = tiny_cfg(out_name="plain", source_steps=source_steps + rounds * per_round)
    run_b = Run(cfg_plain)
    run_b.train_source()

    # every archived filter must be all-zero for the premise to hold
    for r in range(rounds):
        archive = load_examples(Path(cfg_adapt.out_dir) / f"round_{r}" / "examples")
        for examples in archive.values():
            for ex in examples:
                assert not ex.filt.any()

    assert run_a.global_step == run_b.global_step
    assert _params_equal(run_a.params, run_b.params)


def test_empty_target_set_aborts(tiny_data, tmp_path):
    from scaleadapt.synth_data import default_spec, generate_dataset

    empty = generate_dataset(
        default_spec("target", seed=3, height=32, width=64), 0, tmp_path / "empty", "target"
    )
    cfg = RunConfig(
        source_manifest=str(tiny_data["source"]),
        target_manifest=str(empty),
        out_dir=str(tmp_path / "out"),
        source_steps=0,
        rounds=1,
        steps_per_round=1,
    )
    run = Run(cfg)
    run.init_model()
    with pytest.raises(ValueError, match="empty target set"):
        run.adapt_round(0)


def test_all_filtered_out_round_still_trains(tiny_cfg):
    cfg = tiny_cfg(out_name="allout", threshold_override=0.0, beta=0.0, steps_per_round=3)
    run = Run(cfg)
    run.train_source()
    state = run.adapt_round(0)
    assert state.metrics["target_miou"] >= 0.0
    log = (Path(cfg.out_dir) / "loss_log.csv").read_text().splitlines()
    adapt_rows = [r for r in log if r.startswith("0,")]
    assert adapt_rows
    for row in adapt_rows:
        assert float(row.split(",")[3]) == 0.0  # filtered CE contributes nothing


def test_deterministic_rerun_byte_identical(tiny_cfg, tmp_path):
    cfg = tiny_cfg(rounds=1, steps_per_round=3, source_steps=5, out_name="det")
    out = Path(cfg.out_dir)

    def run_and_fingerprint():
        if out.exists():
            shutil.rmtree(out)
        Run(cfg).adapt()
        files = sorted(p for p in out.rglob("*") if p.is_file())
        return {str(p.relative_to(out)): p.read_bytes() for p in files}

    first = run_and_fingerprint()
    second = run_and_fingerprint()
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], f"artifact differs across reruns: {name}"


def test_loss_log_schema(tiny_cfg):
    cfg = tiny_cfg(out_name="log", source_steps=3, rounds=1, steps_per_round=2)
    Run(cfg).adapt()
    lines = (Path(cfg.out_dir) / "loss_log.csv").read_text().strip().splitlines()
    assert lines[0] == "round,step,loss_src,loss_ce,loss_fl,total"
    assert len(lines) == 1 + 3 + 2
    source_rows = [l for l in lines[1:] if l.startswith("-1,")]
    assert len(source_rows) == 3


def test_run_json_contents(tiny_cfg):
    cfg = tiny_cfg(out_name="meta", source_steps=1)
    Run(cfg).train_source()
    doc = json.loads((Path(cfg.out_dir) / "run.json").read_text())
    assert doc["label"] == "with_fl"
    assert doc["config"]["seed"] == 0
    assert "numpy" in doc["versions"]


def test_load_config_toml(tmp_path, tiny_data):
    toml = tmp_path / "run.toml"
    toml.write_text(
        f"""
[data]
source_manifest = "{tiny_data['source']}"
target_manifest = "{tiny_data['target']}"
out_dir = "{tmp_path / 'out'}"

[selection]
p0 = 0.2
dp = 0.1

[patches]
k = 2

[loss]
gamma = 1.5
beta = 0.05

[optim]
lr = 5e-4

[run]
rounds = 2
steps_per_round = 3
seed = 7
"""
    )
    cfg = load_config(toml)
    assert cfg.p0 == 0.2 and cfg.dp == 0.1
    assert cfg.k == 2 and cfg.gamma == 1.5 and cfg.beta == 0.05
    assert cfg.lr == 5e-4 and cfg.rounds == 2 and cfg.seed == 7

    bad = tmp_path / "bad.toml"
    bad.write_text("[run]\nnonsense = 3\n")
    with pytest.raises(ValueError, match="unknown key"):
        load_config(bad)


def test_worker_count_env_cap(monkeypatch):
    monkeypatch.delenv("LSE_THREADS", raising=False)
    assert worker_count(4) == 4
    monkeypatch.setenv("LSE_THREADS", "2")
    assert worker_count(4) == 2
    assert worker_count(1) == 1


def test_resume_source_continues_exactly(tiny_cfg):
    # train-source then adapt in a second process-like flow must equal the
    # in-process train+adapt trajectory
    cfg = tiny_cfg(out_name="resume", source_steps=5, rounds=1, steps_per_round=3)
    run_a = Run(cfg)
    run_a.train_source()
    run_a.adapt()

    cfg_b = tiny_cfg(out_name="resume_b", source_steps=5, rounds=1, steps_per_round=3)
    run_b1 = Run(cfg_b)
    run_b1.train_source()
    run_b2 = Run(cfg_b)  # fresh object: must resume from source.lsec
    run_b2.adapt()
    assert _params_equal(run_a.params, run_b2.params)
