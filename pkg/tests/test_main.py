import pytest
import yaml

from entities.avsbench import load_avsbench_dir
from entities.clip import RawClip
from main import build_parser, main
from tests.helpers import tiny_config_dict


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_config_dict(data={"num_frames": 3})))
    return path


def test_parser():
    args = build_parser().parse_args(["train", "--resume", "--max-steps", "3", "--seed", "2"])
    assert args.command == "train" and args.resume and args.max_steps == 3 and args.seed == 2

    args = build_parser().parse_args(["sweep", "--param", "alpha_o", "--values", "0.6:0.7", "0.7:0.8"])
    assert args.values == ["0.6:0.7", "0.7:0.8"]

    with pytest.raises(SystemExit):
        build_parser().parse_args(["sweep", "--param", "lr", "--values", "1"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["eval"])


def test_quadrant_analysis(config_file, capsys):
    assert main(["analyze-corpus", "--config", str(config_file), "--quadrants", "--per-regime", "1"]) == 0
    out = capsys.readouterr().out
    for quadrant in ("bottom-left", "bottom-right", "top-left", "top-right"):
        assert f"{quadrant}: 1" in out


def test_unknown_config_key_exits_with_an_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"model": {"bogus": 1}}))
    assert main(["train", "--config", str(path)]) == 1


def test_illegal_sweep_value_exits_with_an_error(config_file):
    assert main(["sweep", "--config", str(config_file), "--param", "k_c", "--values", "0"]) == 1


def test_generated_data_is_loadable(config_file, tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(config_file), "--out", str(out)]) == 0

    train = list(load_avsbench_dir(out, "train"))
    val = list(load_avsbench_dir(out, "val"))
    assert len(train) == 4 and len(val) == 2
    assert all(isinstance(clip, RawClip) and clip.num_frames == 3 for clip in train + val)


def test_train_evaluate_and_export(config_file, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config_file), "--out", str(run), "--max-steps", "1"]) == 0
    checkpoint = run / "checkpoint.pt"
    assert checkpoint.is_file()

    assert main(["eval", "--config", str(config_file), "--out", str(run), "--checkpoint", str(checkpoint)]) == 0
    summary = capsys.readouterr().out.splitlines()[-1]
    assert summary.startswith("J ")
    assert (run / "report.tsv").is_file()

    assert main(["export-embeddings", "--config", str(config_file), "--out", str(run), "--checkpoint", str(checkpoint)]) == 0
    assert (run / "embeddings_pre.f32").is_file()
    assert (run / "embeddings_post.json").is_file()


def test_missing_checkpoint_exits_with_an_error(config_file, tmp_path):
    assert main(["eval", "--config", str(config_file), "--checkpoint", str(tmp_path / "none.pt")]) == 1
