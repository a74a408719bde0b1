import pytest
import torch

from harness.ablation import AXES, AblationRow, AblationTable, ablate, axis_configs, override_config
from harness.errors import ConfigError
from harness.evaluation import evaluate_model
from harness.metrics import EvalReport
from harness.trainer import Trainer


@pytest.mark.parametrize("axis", sorted(AXES))
def test_every_row_is_a_valid_config(tiny_config, axis):
    rows = axis_configs(tiny_config, axis)
    assert [name for name, _ in rows] == [name for name, _ in AXES[axis]]


def test_component_rows(tiny_config):
    rows = dict(axis_configs(tiny_config, "components"))
    assert not any((rows["none"].toggles.mit, rows["none"].toggles.sc, rows["none"].toggles.cdcl))
    assert rows["MIT+CDCL"].toggles.cdcl and not rows["MIT+CDCL"].toggles.sc
    assert rows["MIT+SC+CDCL"].toggles.sc
    assert rows["MIT"].model.text_cue and not rows["none"].model.text_cue
    assert all(config.model.text_cue == config.toggles.mit for config in rows.values())


def test_granularity_rows_only_change_the_implicit_text(tiny_config):
    rows = axis_configs(tiny_config, "granularity")
    assert all(not config.toggles.sc and not config.toggles.cdcl for _, config in rows)
    assert [config.toggles.mit for _, config in rows] == [False, True, True, True]
    assert [len(config.granularity.levels) for _, config in rows[1:]] == [1, 2, 3]
    assert all(config.model.text_cue for _, config in rows[1:])


def test_implicit_text_row_trains_a_different_model(tiny_config, tiny_clips, tiny_val_clips, tmp_path):
    rows = dict(axis_configs(tiny_config, "components"))
    logits = {}
    for name in ("none", "MIT"):
        trainer = Trainer(rows[name], tiny_clips, tiny_val_clips, tmp_path / name)
        trainer.train(max_steps=1, progress=False)
        trainer.model.eval()
        batch = torch.utils.data.default_collate([trainer.val_set[0], trainer.val_set[1]])
        with torch.no_grad():
            logits[name] = trainer.model(batch["frames"], batch["mel"]).logits
    assert logits["none"].shape == logits["MIT"].shape
    assert not torch.allclose(logits["none"], logits["MIT"])


def test_rows_keep_the_base_settings(tiny_config):
    rows = dict(axis_configs(tiny_config, "cf-space"))
    assert rows["discrete"] is None
    assert rows["continuous w/o L_ortho"].counterfactual.lambda_ortho == 0.0
    assert rows["continuous + L_ortho"].counterfactual.pool_size == tiny_config.counterfactual.pool_size
    assert rows["no SC"].data.resolution == (64, 64)


def test_unknown_axis(tiny_config):
    with pytest.raises(ConfigError):
        axis_configs(tiny_config, "everything")


def test_counterfactuals_without_implicit_text_are_rejected(tiny_config):
    with pytest.raises(ConfigError, match="requires toggles.mit"):
        override_config(tiny_config, {"toggles": {"mit": False, "sc": True}})


def test_full_axis_matches_a_plain_run(tiny_config, tiny_clips, tiny_val_clips, tmp_path):
    table = ablate(tiny_config, "full", tiny_clips, tiny_val_clips, out_dir=tmp_path / "ablate", max_steps=1)

    trainer = Trainer(tiny_config, tiny_clips, tiny_val_clips, tmp_path / "plain")
    trainer.train(max_steps=1, progress=False)
    plain = evaluate_model(trainer.model, trainer.val_set, 2)

    (row,) = table.rows
    assert row.name == "MIT+SC+CDCL"
    assert len(row.reports) == 1
    assert row.mean("JF") == pytest.approx(plain.JF)
    assert (tmp_path / "ablate" / "ablate_full" / "row0_seed0" / "checkpoint.pt").is_file()


def test_table_text():
    table = AblationTable("cf-space", [
        AblationRow("no SC", [EvalReport(J=40.0, F=60.0, JF=50.0), EvalReport(J=50.0, F=70.0, JF=60.0)]),
        AblationRow("discrete", skipped="out of scope"),
    ])
    lines = table.to_text().splitlines()
    assert lines[0].split() == ["row", "J", "F", "J&F"]
    assert lines[2].split() == ["no", "SC", "45.00", "65.00", "55.00"]
    assert lines[3].endswith("skipped: out of scope")
    assert table.rows[1].reports == []
