import math

import numpy as np
import pytest

from harness.ablation import override_config
from harness.errors import ConfigError
from harness.evaluation import evaluate_model
from harness.metrics import EvalReport
from harness.sweep import SweepCurve, SweepPoint, check_values, degrade, parse_value, sweep, value_override
from harness.trainer import Trainer


@pytest.mark.parametrize("param, value", [
    ("k_c", 0),
    ("k_c", 2.5),
    ("s_d", 0),
    ("s_d", 20),
    ("alpha_o", (0.8, 0.7)),
    ("alpha_o", (0.0, 0.5)),
    ("r_a", math.nan),
    ("r_a", -math.inf),
    ("r_v", 1.5),
])
def test_illegal_values_fail_before_training(tiny_config, param, value):
    # No training clips: reaching the trainer would raise a plain ValueError instead
    with pytest.raises(ConfigError):
        sweep(tiny_config, param, [value], train_clips=[], val_clips=[])


def test_unknown_parameter_and_empty_sweep(tiny_config):
    with pytest.raises(ConfigError):
        check_values(tiny_config, "lr", [1e-3])
    with pytest.raises(ConfigError):
        check_values(tiny_config, "k_c", [])


def test_parse_value():
    assert parse_value("k_c", "8") == 8
    assert parse_value("s_d", "150") == 150
    assert parse_value("alpha_o", "0.6:0.7") == (0.6, 0.7)
    assert parse_value("r_a", "inf") == math.inf
    assert parse_value("r_v", "0.25") == 0.25
    with pytest.raises(ConfigError):
        parse_value("beta", "1")


def test_value_overrides(tiny_config):
    config = override_config(tiny_config, value_override("alpha_o", (0.5, 0.6)))
    assert config.counterfactual.ortho_range == (0.5, 0.6)
    assert config.counterfactual.alpha == 0.6

    assert override_config(tiny_config, value_override("k_c", 3)).counterfactual.pool_size == 3
    assert override_config(tiny_config, value_override("s_d", 7)).counterfactual.intervention_step == 7
    with pytest.raises(ValueError):
        value_override("r_a", 10.0)


def test_degradations(tiny_val_clips):
    untouched, provenance = degrade(tiny_val_clips, "r_a", math.inf, seed=0)
    assert provenance is None
    assert np.array_equal(untouched[0].waveform, tiny_val_clips[0].waveform)

    noisy, _ = degrade(tiny_val_clips, "r_a", 0.0, seed=0)
    assert not np.allclose(noisy[0].waveform, tiny_val_clips[0].waveform)

    mixed, provenance = degrade(tiny_val_clips, "r_v", 0.5, seed=0)
    injected = [sum(source != i for source, _ in tags) for i, tags in enumerate(provenance)]
    assert injected == [1, 1]
    assert all(clip.masks.sum() > 0 for clip in mixed)


def test_clean_audio_point_matches_a_plain_run(tiny_config, tiny_clips, tiny_val_clips, tmp_path):
    curve = sweep(tiny_config, "r_a", [math.inf], tiny_clips, tiny_val_clips, out_dir=tmp_path / "sweep", max_steps=1)

    trainer = Trainer(tiny_config, tiny_clips, tiny_val_clips, tmp_path / "plain")
    trainer.train(max_steps=1, progress=False)
    plain = evaluate_model(trainer.model, trainer.val_set, 2)

    assert curve.points[0].mean("JF") == pytest.approx(plain.JF)
    assert curve.default == math.inf


def test_trained_sweep_runs_one_model_per_value(tiny_config, tiny_clips, tiny_val_clips, tmp_path):
    curve = sweep(tiny_config, "k_c", [1, 2], tiny_clips, tiny_val_clips, out_dir=tmp_path, max_steps=1)
    assert [point.value for point in curve.points] == [1, 2]
    assert all(len(point.reports) == 1 for point in curve.points)
    assert (tmp_path / "sweep_k_c" / "value1_seed0" / "checkpoint.pt").is_file()


def test_curve_text_marks_the_default():
    report = EvalReport(J=50.0, F=70.0, JF=60.0)
    curve = SweepCurve("alpha_o", [SweepPoint((0.6, 0.7), [report]), SweepPoint((0.7, 0.8), [report])], (0.7, 0.8))
    lines = curve.to_text().splitlines()
    assert lines[1].split() == ["0.6:0.7", "50.00", "70.00", "60.00"]
    assert lines[2].endswith(" *")
    assert lines[2].startswith("0.7:0.8")
