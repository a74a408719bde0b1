import json
import logging
from pathlib import Path

import librosa
import numpy as np
import soundfile as sf
from PIL import Image

from entities.clip import SUBSETS, RawClip
from harness.errors import ClipLoadError, DatasetError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def read_index(root:str, split:str) -> list:
    """
    Read <root>/<split>/index.json.

    The index is either {"clips": [...]} or a bare list; every entry is an
    object with an "id" and optionally a "subset" tag.

    Returns:
    - list of (clip_id, subset) tuples

    Raises:
    - DatasetError: if the index is missing, unreadable or malformed
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split}")

    index_path = Path(root) / split / "index.json"
    try:
        with open(index_path) as f:
            index = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"cannot read index {index_path}: {e}") from e

    entries = index.get("clips") if isinstance(index, dict) else index
    if not isinstance(entries, list):
        raise DatasetError(f"index {index_path} has no clip list")

    clips = []
    for position, entry in enumerate(entries):
        if not isinstance(entry, dict) or not isinstance(entry.get("id"), str):
            raise DatasetError(f"index {index_path} entry {position} has no string id")
        subset = entry.get("subset", "s4")
        if subset not in SUBSETS:
            raise DatasetError(f"index {index_path} entry {entry['id']} has unknown subset {subset}")
        clips.append((entry["id"], subset))
    return clips


def _numbered_pngs(directory:Path) -> dict:
    files = {}
    for path in directory.glob("*.png"):
        if path.stem.isdigit():
            files[int(path.stem)] = path
    return dict(sorted(files.items()))


def _read_mask(path:Path) -> tuple:
    """
    Read one mask image.

    Returns:
    - (uint8 array (H, W), semantic flag): palette images keep their indices,
      anything else is thresholded to {0, 1}
    """
    with Image.open(path) as image:
        if image.mode == "P":
            return np.array(image, dtype=np.uint8), True
        return (np.array(image.convert("L")) > 127).astype(np.uint8), False


def load_clip_dir(clip_dir:Path, clip_id:str, subset:str, sample_rate:int = 16000):
    """
    Load one clip directory.

    Parameters:
    - clip_dir: directory holding frames/, masks/ and audio.wav
    - clip_id: id of the clip
    - subset: subset tag from the index
    - sample_rate: rate the waveform is resampled to

    Returns:
    - RawClip, or ClipLoadError when a file is missing or unreadable
    """
    frame_files = _numbered_pngs(clip_dir / "frames")
    if not frame_files:
        return ClipLoadError(clip_id, "no frame files")

    audio_path = clip_dir / "audio.wav"
    if not audio_path.is_file():
        return ClipLoadError(clip_id, "missing audio.wav")

    mask_files = _numbered_pngs(clip_dir / "masks")
    missing = [index for index in frame_files if index not in mask_files]
    if missing:
        return ClipLoadError(clip_id, f"missing mask files for frames {missing}")

    try:
        frames = []
        for path in frame_files.values():
            with Image.open(path) as image:
                frames.append(np.array(image.convert("RGB"), dtype=np.uint8))
        if len({frame.shape for frame in frames}) != 1:
            return ClipLoadError(clip_id, "frames have different sizes")

        masks, palette_flags = zip(*[_read_mask(mask_files[index]) for index in frame_files])
        if any(mask.shape != frames[0].shape[:2] for mask in masks):
            return ClipLoadError(clip_id, "mask size differs from frame size")

        waveform, file_rate = sf.read(audio_path, dtype="float32", always_2d=False)
    except (OSError, RuntimeError, ValueError) as e:
        return ClipLoadError(clip_id, f"unreadable file: {e}")

    if waveform.ndim == 2:
        waveform = waveform.mean(axis=1)
    if file_rate != sample_rate:
        waveform = librosa.resample(waveform, orig_sr=file_rate, target_sr=sample_rate)

    # One second of audio per frame; trim or zero-pad to T windows
    num_frames = len(frames)
    target = num_frames * sample_rate
    waveform = np.pad(waveform[:target], (0, max(0, target - len(waveform)))).astype(np.float32)

    semantic = any(palette_flags) or subset == "avss"
    masks = np.stack(masks)
    class_labels = tuple(int(v) for v in np.unique(masks) if v > 0) if semantic else ()

    return RawClip(
        frames=np.stack(frames),
        waveform=waveform,
        masks=masks,
        class_labels=class_labels,
        sample_rate=sample_rate,
        clip_id=clip_id,
        subset=subset,
        semantic=semantic,
    )


def load_avsbench_dir(root:str, split:str, sample_rate:int = 16000):
    """
    Stream the clips of one split of a directory in the AVSBench layout.

    Layout: <root>/<split>/index.json and, per clip, frames/<t>.png,
    audio.wav and masks/<t>.png. T is the number of frame files.

    Parameters:
    - root: dataset root
    - split: train, val or test
    - sample_rate: rate the waveforms are resampled to

    Yields:
    - RawClip per readable clip, ClipLoadError per unreadable one

    Raises:
    - DatasetError: if the index is malformed
    """
    entries = read_index(root, split)
    logger.info("Loading %d clips from %s/%s", len(entries), root, split)

    for clip_id, subset in entries:
        result = load_clip_dir(Path(root) / split / clip_id, clip_id, subset, sample_rate)
        if isinstance(result, ClipLoadError):
            logger.warning("Skipping clip %s: %s", clip_id, result.reason)
        yield result
