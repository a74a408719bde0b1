import json

import numpy as np
import pytest
import soundfile as sf
import torch

from entities.avsbench import load_avsbench_dir, read_index
from entities.clip import RawClip
from entities.dataset import AVClipDataset
from entities.synthesis import generate_clip, make_regime_specs, save_clip, write_index
from harness.config import MelConfig
from harness.errors import ClipLoadError, DatasetError


def write_split(root, clips, split="train"):
    for clip in clips:
        save_clip(clip, root, split)
    write_index(root, split, clips)


@pytest.fixture(scope="module")
def s4_clips():
    return [generate_clip(spec) for spec in make_regime_specs("s4", 2, seed=8, num_frames=3, resolution=(32, 32))]


def test_well_formed_directory_round_trips(tmp_path, s4_clips):
    write_split(tmp_path, s4_clips)
    loaded = list(load_avsbench_dir(tmp_path, "train"))

    assert len(loaded) == 2
    for original, clip in zip(s4_clips, loaded):
        assert isinstance(clip, RawClip)
        assert clip.clip_id == original.clip_id
        assert clip.num_frames == 3
        assert not clip.semantic
        assert np.array_equal(clip.frames, original.frames)
        assert np.array_equal(clip.masks, original.masks)
        assert np.allclose(clip.waveform, original.waveform, atol=1e-4)
        clip.validate()


def test_missing_mask_yields_an_error_record(tmp_path, s4_clips):
    write_split(tmp_path, s4_clips)
    (tmp_path / "train" / s4_clips[0].clip_id / "masks" / "1.png").unlink()
    loaded = list(load_avsbench_dir(tmp_path, "train"))

    assert isinstance(loaded[0], ClipLoadError)
    assert loaded[0].clip_id == s4_clips[0].clip_id
    assert "mask" in loaded[0].reason
    assert isinstance(loaded[1], RawClip)


def test_missing_audio_yields_an_error_record(tmp_path, s4_clips):
    write_split(tmp_path, s4_clips)
    (tmp_path / "train" / s4_clips[1].clip_id / "audio.wav").unlink()
    loaded = list(load_avsbench_dir(tmp_path, "train"))
    assert isinstance(loaded[1], ClipLoadError)
    assert loaded[1].clip_id == s4_clips[1].clip_id


def test_malformed_index_is_fatal(tmp_path):
    (tmp_path / "train").mkdir()
    (tmp_path / "train" / "index.json").write_text("{not json")
    with pytest.raises(DatasetError):
        list(load_avsbench_dir(tmp_path, "train"))

    (tmp_path / "train" / "index.json").write_text(json.dumps({"clips": [{"subset": "s4"}]}))
    with pytest.raises(DatasetError):
        read_index(tmp_path, "train")

    (tmp_path / "train" / "index.json").write_text(json.dumps([{"id": "a", "subset": "xyz"}]))
    with pytest.raises(DatasetError):
        read_index(tmp_path, "train")


def test_semantic_clip_with_ten_frames(tmp_path):
    clip = generate_clip(make_regime_specs("avss", 1, seed=6, resolution=(32, 32))[0])
    write_split(tmp_path, [clip], split="val")
    loaded = next(load_avsbench_dir(tmp_path, "val"))

    assert loaded.num_frames == 10
    assert loaded.semantic
    assert loaded.subset == "avss"
    assert np.array_equal(loaded.masks, clip.masks)
    assert loaded.class_labels == tuple(int(v) for v in np.unique(clip.masks) if v > 0)


def test_palette_masks_mark_a_clip_semantic_whatever_its_subset(tmp_path):
    clip = generate_clip(make_regime_specs("avss", 1, seed=6, num_frames=2, resolution=(32, 32))[0])
    clip.subset = "m3"
    write_split(tmp_path, [clip])
    assert next(load_avsbench_dir(tmp_path, "train")).semantic


def test_audio_is_resampled_to_the_configured_rate(tmp_path, s4_clips):
    write_split(tmp_path, s4_clips[:1])
    audio_path = tmp_path / "train" / s4_clips[0].clip_id / "audio.wav"
    sf.write(audio_path, np.zeros(3 * 8000, dtype=np.float32), 8000, subtype="PCM_16")
    clip = next(load_avsbench_dir(tmp_path, "train"))
    assert clip.sample_rate == 16000
    assert len(clip.waveform) == 3 * 16000


def test_dataset_items(s4_clips):
    dataset = AVClipDataset(s4_clips, MelConfig(), resolution=(64, 64))
    item = dataset[1]
    assert len(dataset) == 2
    assert item["frames"].shape == (3, 3, 64, 64)
    assert item["frames"].max() <= 1.0
    assert item["mel"].shape == (3, 97, 64)
    assert item["masks"].shape == (3, 64, 64)
    assert item["masks"].dtype == torch.float32
    assert item["index"] == 1
    assert not dataset.is_semantic()


def test_dataset_rejects_mixed_mask_kinds(s4_clips):
    semantic = generate_clip(make_regime_specs("avss", 1, seed=8, num_frames=3, resolution=(32, 32))[0])
    assert semantic.semantic
    with pytest.raises(DatasetError, match="binary and semantic"):
        AVClipDataset(s4_clips + [semantic], MelConfig())
    assert AVClipDataset([semantic], MelConfig()).is_semantic()
