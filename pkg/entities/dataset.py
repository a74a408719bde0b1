import logging

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from harness.config import MelConfig
from harness.errors import DatasetError
from model.encoders import mel_frontend

logger = logging.getLogger(__name__)

class AVClipDataset(Dataset):
    """
    Tensor view of a list of RawClips, with log-Mel windows computed once.

    Attributes:
    - clips: list of RawClip
    - mel_config: MelConfig used for the audio frontend
    - resolution: optional (H, W) frames and masks are resized to

    Items are dicts with frames (T, 3, H, W) in [0, 1], mel (T, M, n_mels),
    masks (T, H, W) (float {0, 1} or long labels) and the clip index.

    Raises:
    - DatasetError: if the clips mix binary and semantic masks
    """
    def __init__(self, clips:list, mel_config:MelConfig, resolution:tuple = None):
        self.clips = list(clips)
        if len({clip.semantic for clip in self.clips}) > 1:
            raise DatasetError("cannot mix binary and semantic clips in one dataset")
        self.mel_config = mel_config
        self.resolution = tuple(resolution) if resolution else None
        self.items = [self._tensorize(clip, index) for index, clip in enumerate(self.clips)]
        logger.debug("Prepared %d clips", len(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index:int) -> dict:
        return self.items[index]

    def is_semantic(self) -> bool:
        return any(clip.semantic for clip in self.clips)

    def _resize(self, frames:np.ndarray, masks:np.ndarray) -> tuple:
        if self.resolution is None or frames.shape[1:3] == self.resolution:
            return frames, masks
        size = (self.resolution[1], self.resolution[0])
        frames = np.stack([np.array(Image.fromarray(f).resize(size, Image.BILINEAR)) for f in frames])
        masks = np.stack([np.array(Image.fromarray(m).resize(size, Image.NEAREST)) for m in masks])
        return frames, masks

    def _tensorize(self, clip, index:int) -> dict:
        frames, masks = self._resize(clip.frames, clip.masks)
        mel = mel_frontend(clip.waveform, clip.sample_rate, clip.num_frames, self.mel_config)
        masks = torch.from_numpy(masks.astype(np.int64))
        return {
            "frames": torch.from_numpy(frames).permute(0, 3, 1, 2).float() / 255.0,
            "mel": mel,
            "masks": masks if clip.semantic else masks.float(),
            "index": index,
        }
