import json

import numpy as np
import pytest
import torch

from entities.dataset import AVClipDataset
from entities.synthesis import generate_clip, make_regime_specs
from harness.config import ExperimentConfig, MelConfig
from harness.errors import CheckpointError
from harness.evaluation import evaluate, evaluate_model, evaluate_predictions, export_embeddings, ground_truths, predict, read_embeddings
from harness.trainer import Trainer
from model.CounterfactualAVS import CounterfactualAVS
from tests.helpers import tiny_config_dict


@pytest.fixture(scope="module")
def trained(tiny_clips, tmp_path_factory):
    config = ExperimentConfig.from_dict(tiny_config_dict())
    trainer = Trainer(config, tiny_clips, [], tmp_path_factory.mktemp("run"))
    trainer.train(max_steps=1, progress=False)
    return trainer


@pytest.fixture(scope="module")
def val_set(tiny_val_clips):
    return AVClipDataset(tiny_val_clips, MelConfig(), (64, 64))


def test_oracle_predictions_score_one_hundred(val_set):
    report = evaluate_predictions(ground_truths(val_set), val_set)
    assert report.J == 100.0
    assert report.F == 100.0
    assert report.JF == 100.0


def test_background_predictions_score_zero(val_set):
    report = evaluate_predictions([np.zeros_like(gt) for gt in ground_truths(val_set)], val_set)
    assert report.J == 0.0
    assert report.F == 0.0


def test_repeated_evaluation_is_identical(trained, val_set):
    first = evaluate_model(trained.model, val_set, batch_size=2)
    second = evaluate_model(trained.model, val_set, batch_size=1)
    assert first.per_clip == second.per_clip
    assert 0.0 <= first.JF <= 100.0


def test_predictions_are_hard_masks(trained, val_set):
    predictions = predict(trained.model, val_set, batch_size=2)
    assert len(predictions) == 2
    assert predictions[0].shape == (2, 64, 64)
    assert set(np.unique(predictions[0])) <= {0, 1}


def test_inference_ignores_the_training_toggles(trained, val_set):
    off = ExperimentConfig.from_dict(tiny_config_dict(toggles={"mit": False, "sc": False, "cdcl": False}))
    model = CounterfactualAVS(off)
    model.load_state_dict(trained.model.state_dict())
    model.eval()
    trained.model.eval()

    batch = torch.utils.data.default_collate([val_set[0], val_set[1]])
    with torch.no_grad():
        assert torch.equal(model(batch["frames"], batch["mel"]).logits, trained.model(batch["frames"], batch["mel"]).logits)


def test_checkpoint_evaluation(trained, tiny_val_clips):
    report = evaluate(trained.checkpoint_path, tiny_val_clips)
    assert report.per_clip == evaluate_model(trained.model, AVClipDataset(tiny_val_clips, MelConfig(), (64, 64)), 2).per_clip


def test_semantic_data_needs_a_semantic_model(trained):
    clips = [generate_clip(spec) for spec in make_regime_specs("avss", 2, seed=5, num_frames=2, resolution=(64, 64))]
    with pytest.raises(CheckpointError):
        evaluate_model(trained.model, AVClipDataset(clips, MelConfig(), (64, 64)))


def test_embedding_dump(trained, val_set, tmp_path):
    pre_path, post_path = export_embeddings(trained.model, val_set, tmp_path, batch_size=2)
    pre, post = read_embeddings(pre_path), read_embeddings(post_path)

    assert {name: values.shape for name, values in pre.items()} == {"visual": (2, 16), "audio": (2, 16)}
    assert {name: values.shape for name, values in post.items()} == {"visual": (2, 8), "audio": (2, 8), "text": (2, 8)}

    batch = torch.utils.data.default_collate([val_set[0], val_set[1]])
    expected = trained.model.embeddings(batch["frames"], batch["mel"])
    assert np.allclose(post["audio"], expected["post"]["audio"].numpy(), atol=1e-6)
    assert np.allclose(pre["visual"], expected["pre"]["visual"].numpy(), atol=1e-6)

    sidecar = json.loads(post_path.with_suffix(".json").read_text())
    assert sidecar["dtype"] == "float32"
    assert [block["modality"] for block in sidecar["blocks"]] == ["visual", "audio", "text"]
    assert len(sidecar["rows"]) == 6
    assert sidecar["rows"][0]["clip_id"] == val_set.clips[0].clip_id
