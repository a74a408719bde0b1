import pytest

from entities.synthesis import generate_clip, make_regime_specs
from harness.config import ExperimentConfig
from tests.helpers import tiny_config_dict

@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(tiny_config_dict(out_dir=str(tmp_path / "run")))


@pytest.fixture(scope="session")
def tiny_clips() -> list:
    return [generate_clip(spec) for spec in make_regime_specs("s4", 4, seed=3, num_frames=2, resolution=(64, 64))]


@pytest.fixture(scope="session")
def tiny_val_clips() -> list:
    return [generate_clip(spec) for spec in make_regime_specs("s4", 2, seed=11, num_frames=2, resolution=(64, 64))]
