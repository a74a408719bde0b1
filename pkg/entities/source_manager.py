import numpy as np

from entities.source import SourceSpec

class SourceManager:
    """
    Manages the sources of a synthetic scene.

    Attributes:
    - sources: list of SourceSpec sounding objects
    - distractors: list of SourceSpec distractors
    """
    def __init__(self, sources:list, distractors:list = ()):
        self.sources = list(sources)
        self.distractors = list(distractors)

    def get_sources(self) -> list:
        return self.sources

    def get_distractors(self) -> list:
        return self.distractors

    def get_sounding_sources(self, frame:int) -> list:
        """
        Get the on-screen sources that sound at a frame.

        Parameters:
        - frame: frame index

        Returns:
        - list of SourceSpec
        """
        return [source for source in self.sources if source.is_sounding(frame)]

    def class_labels(self) -> tuple:
        """
        Concept labels of the sources that sound at least once, sorted.
        """
        return tuple(sorted({source.label() for source in self.sources if any(source.is_sounding(t) for t in range(len(source.active_frames)))}))

    def render_audio(self, num_frames:int, sample_rate:int, noise_level:float = 0.0, rng:np.random.Generator = None) -> np.ndarray:
        """
        Mix the waveform of the clip.

        Every audible source (on-screen or off-screen) contributes its tone,
        scaled by its loudness, during the frames it is active. Each frame
        covers one second of audio.

        Parameters:
        - num_frames: T of the clip
        - sample_rate: samples per second
        - noise_level: standard deviation of additive white noise
        - rng: numpy Generator for the noise

        Returns:
        - float32 array of length T * sample_rate
        """
        num_samples = num_frames * sample_rate
        waveform = np.zeros(num_samples, dtype=np.float64)

        for source in self.sources + [d for d in self.distractors if d.audible]:
            gate = np.repeat(np.asarray([source.is_sounding(t) for t in range(num_frames)], dtype=np.float64), sample_rate)
            if not gate.any():
                continue
            waveform += source.loudness * gate * source.tone.waveform(num_samples, sample_rate)

        if noise_level > 0:
            waveform += rng.normal(0.0, noise_level, size=num_samples)

        return waveform.astype(np.float32)
