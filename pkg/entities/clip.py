from dataclasses import dataclass, field

import numpy as np

from entities.concepts import NUM_CLASSES
from entities.source import SourceSpec

SUBSETS = ("s4", "m3", "avss")

@dataclass(frozen=True)
class ClipSpec:
    """
    Implements the full description of a synthetic clip. Generation is a pure
    function of this object.

    Attributes:
    - seed: int seeding the background texture and the additive noise
    - num_frames: T, one frame per second of audio
    - resolution: (H, W) in pixels
    - sources: tuple of SourceSpec, the on-screen sounding objects
    - noise_sources: tuple of SourceSpec distractors (silent-but-visible or audible-but-offscreen)
    - audio_sr: audio sample rate in Hz
    - noise_level: standard deviation of additive white noise on the waveform
    - semantic: bool, masks carry class labels instead of {0, 1}
    - subset: tag written to the dataset index (s4, m3, avss)
    - clip_id: optional name used when the clip is serialized
    """
    seed: int
    sources: tuple
    num_frames: int = 5
    resolution: tuple = (224, 224)
    noise_sources: tuple = ()
    audio_sr: int = 16000
    noise_level: float = 0.0
    semantic: bool = False
    subset: str = "s4"
    clip_id: str = None

    def validate(self):
        """
        Raises:
        - ValueError: if any field or source breaks the clip invariants
        """
        if self.num_frames < 1:
            raise ValueError(f"num_frames must be >= 1, got {self.num_frames}")
        if len(self.resolution) != 2 or any(int(v) != v or v < 8 for v in self.resolution):
            raise ValueError(f"resolution must be two integers >= 8, got {self.resolution}")
        if self.audio_sr <= 0:
            raise ValueError(f"audio_sr must be positive, got {self.audio_sr}")
        if not self.sources:
            raise ValueError("a clip needs at least one source")
        if self.noise_level < 0:
            raise ValueError(f"noise_level must be >= 0, got {self.noise_level}")
        if self.subset not in SUBSETS:
            raise ValueError(f"subset must be one of {SUBSETS}, got {self.subset}")

        for source in self.sources:
            source.validate(self.num_frames)
            source.validate_placement(self.resolution)
            if not (source.visible and source.audible):
                raise ValueError("primary sources must be visible and audible; use noise_sources for distractors")
        for source in self.noise_sources:
            source.validate(self.num_frames)
            source.validate_placement(self.resolution)
            if source.visible == source.audible:
                raise ValueError("a distractor must be either silent-but-visible or audible-but-offscreen")

    def samples_per_frame(self) -> int:
        return self.audio_sr


@dataclass
class RawClip:
    """
    Implements one audio-visual clip with its ground truth.

    Attributes:
    - frames: uint8 array (T, H, W, 3)
    - waveform: float32 mono array of length T * samples_per_frame
    - masks: uint8 array (T, H, W), {0, 1} in binary mode, class labels in semantic mode
    - class_labels: tuple of the concept labels of the sounding sources
    - sample_rate: audio sample rate in Hz
    - clip_id: str identifier
    - subset: s4, m3 or avss
    - semantic: bool, masks are label maps
    """
    frames: np.ndarray
    waveform: np.ndarray
    masks: np.ndarray
    class_labels: tuple = ()
    sample_rate: int = 16000
    clip_id: str = ""
    subset: str = "s4"
    semantic: bool = False
    extras: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def samples_per_frame(self) -> int:
        return len(self.waveform) // self.num_frames

    def validate(self):
        """
        Raises:
        - ValueError: on inconsistent shapes or out-of-range mask values
        """
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or self.frames.dtype != np.uint8:
            raise ValueError(f"frames must be uint8 (T, H, W, 3), got {self.frames.dtype} {self.frames.shape}")
        if self.masks.shape != self.frames.shape[:3]:
            raise ValueError(f"masks shape {self.masks.shape} does not match frames {self.frames.shape[:3]}")
        if len(self.waveform) == 0 or len(self.waveform) % self.num_frames:
            raise ValueError(f"waveform length {len(self.waveform)} is not a multiple of T={self.num_frames}")
        upper = NUM_CLASSES if self.semantic else 2
        if self.masks.size and (self.masks.min() < 0 or self.masks.max() >= upper):
            raise ValueError(f"mask values must lie in [0, {upper})")

    def copy(self) -> "RawClip":
        return RawClip(
            frames=self.frames.copy(),
            waveform=self.waveform.copy(),
            masks=self.masks.copy(),
            class_labels=tuple(self.class_labels),
            sample_rate=self.sample_rate,
            clip_id=self.clip_id,
            subset=self.subset,
            semantic=self.semantic,
            extras=dict(self.extras),
        )
