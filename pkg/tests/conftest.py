import pytest

from scaleadapt.synth_data import default_spec, generate_dataset


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small 32x64 paired datasets for fast pipeline tests."""
    root = tmp_path_factory.mktemp("tiny_data")
    src = generate_dataset(
        default_spec("source", seed=0, height=32, width=64), 24, root / "source", "source"
    )
    tgt = generate_dataset(
        default_spec("target", seed=1, height=32, width=64), 30, root / "target", "target"
    )
    return {"source": src, "target": tgt}


@pytest.fixture
def tiny_cfg(tiny_data, tmp_path):
    """RunConfig factory bound to the tiny datasets and a fresh out dir."""
    from scaleadapt.pipeline import RunConfig

    def make(**overrides):
        base = dict(
            source_manifest=str(tiny_data["source"]),
            target_manifest=str(tiny_data["target"]),
            out_dir=str(tmp_path / overrides.pop("out_name", "out")),
            rounds=1,
            steps_per_round=4,
            source_steps=6,
            seed=0,
        )
        base.update(overrides)
        return RunConfig(**base)

    return make
