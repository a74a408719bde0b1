from dataclasses import dataclass

import librosa
import numpy as np
import torch
from torch import nn

from harness.config import MelConfig

@dataclass
class VisualFeatureStack:
    """
    Multi-scale visual features of a batch of clips.

    Attributes:
    - scales: list of 4 tensors (B, T, C_i, H_i, W_i), strides 4/8/16/32
    - pooled: (B, T, C_p) per-frame descriptor
    """
    scales: list
    pooled: torch.Tensor

    def replace_scales(self, scales:list) -> "VisualFeatureStack":
        return VisualFeatureStack(scales=list(scales), pooled=self.pooled)


@dataclass
class AudioFeatures:
    """
    Attributes:
    - mel: (B, T, M, n_mels) log-Mel windows
    - embedding: (B, T, D) one row per frame
    """
    mel: torch.Tensor
    embedding: torch.Tensor


def mel_filterbank(config:MelConfig) -> np.ndarray:
    return librosa.filters.mel(
        sr=config.sample_rate,
        n_fft=config.n_fft,
        n_mels=config.n_mels,
        fmin=config.fmin,
        fmax=config.fmax,
    )


def power_spectrum(windows:np.ndarray, config:MelConfig) -> np.ndarray:
    """
    One-sided power spectrogram of audio windows.

    Parameters:
    - windows: float array (..., N)
    - config: MelConfig

    Returns:
    - array (..., 1 + n_fft // 2, M) of |STFT|^2, M = 1 + (N - n_fft) // hop
    """
    spectrum = librosa.stft(
        np.asarray(windows, dtype=np.float64),
        n_fft=config.n_fft,
        hop_length=config.hop_length,
        win_length=config.win_length,
        window="hann",
        center=False,
    )
    return np.abs(spectrum) ** 2


def mel_frontend(waveform:np.ndarray, sample_rate:int, num_frames:int, config:MelConfig) -> torch.Tensor:
    """
    Split a waveform into one window per frame and compute log-Mel features.

    Parameters:
    - waveform: mono samples, length divisible by num_frames
    - sample_rate: rate of the waveform in Hz
    - num_frames: T
    - config: MelConfig

    Returns:
    - float32 tensor (T, M, n_mels)

    Raises:
    - ValueError: on a rate mismatch, empty audio or a length not divisible by T
    """
    waveform = np.asarray(waveform)
    if sample_rate != config.sample_rate:
        raise ValueError(f"sample rate {sample_rate} does not match the Mel config ({config.sample_rate})")
    if waveform.size == 0:
        raise ValueError("waveform is empty")
    if num_frames < 1 or waveform.size % num_frames:
        raise ValueError(f"waveform length {waveform.size} cannot be split into {num_frames} equal windows")

    windows = waveform.reshape(num_frames, -1)
    if windows.shape[1] < config.n_fft:
        raise ValueError(f"frame window of {windows.shape[1]} samples is shorter than n_fft={config.n_fft}")

    power = power_spectrum(windows, config)
    mel = np.einsum("mf,tfk->tkm", mel_filterbank(config), power)
    return torch.from_numpy(np.log(np.maximum(mel, config.log_floor)).astype(np.float32))


def _conv_block(in_channels:int, out_channels:int, kernel_size:int, stride:int) -> list:
    return [
        nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2, bias=False),
        nn.GroupNorm(min(8, out_channels), out_channels),
        nn.ReLU(inplace=True),
    ]


class VisualEncoder(nn.Module):
    """
    Frame-wise convolutional pyramid producing features at strides 4, 8, 16 and 32.

    Every frame is encoded independently (GroupNorm keeps statistics per frame),
    so the encoder commutes with any permutation of the frames.

    Attributes:
    - stages: the four pyramid stages
    - pooled_proj: 1x1 projection of the finest scale before spatial pooling
    """
    def __init__(self, channels:tuple = (32, 64, 128, 256), pooled_dim:int = 128):
        super().__init__()
        assert len(channels) == 4, "The pyramid has exactly four stages"

        self.channels = tuple(channels)
        stages = [nn.Sequential(*_conv_block(3, channels[0], 7, 2), *_conv_block(channels[0], channels[0], 3, 2))]
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            stages.append(nn.Sequential(*_conv_block(c_in, c_out, 3, 2), *_conv_block(c_out, c_out, 3, 1)))
        self.stages = nn.ModuleList(stages)
        self.pooled_proj = nn.Conv2d(channels[0], pooled_dim, 1)

    def forward(self, frames:torch.Tensor) -> VisualFeatureStack:
        """
        Parameters:
        - frames: float tensor (B, T, 3, H, W) in [0, 1], H and W multiples of 32

        Returns:
        - VisualFeatureStack
        """
        if frames.ndim != 5 or frames.shape[2] != 3:
            raise ValueError(f"frames must be (B, T, 3, H, W), got {tuple(frames.shape)}")
        B, T, _, H, W = frames.shape
        if H % 32 or W % 32:
            raise ValueError(f"frame size must be a multiple of 32, got {H}x{W}")

        x = frames.reshape(B * T, 3, H, W)
        scales = []
        for stage in self.stages:
            x = stage(x)
            scales.append(x)

        pooled = self.pooled_proj(scales[0]).mean(dim=(-2, -1))
        return VisualFeatureStack(
            scales=[s.reshape(B, T, *s.shape[1:]) for s in scales],
            pooled=pooled.reshape(B, T, -1),
        )


def encode_visual(encoder:VisualEncoder, frames) -> VisualFeatureStack:
    """
    Encode frames given as a tensor or as a list of per-frame tensors.

    Raises:
    - ValueError: if the listed frames do not share one size
    """
    if isinstance(frames, (list, tuple)):
        if len({tuple(f.shape) for f in frames}) != 1:
            raise ValueError("frames have different sizes")
        frames = torch.stack(frames)
    if frames.ndim == 4:
        frames = frames.unsqueeze(0)
    return encoder(frames)


class AudioEncoder(nn.Module):
    """
    Two convolution blocks over each Mel window, global pooling and a linear head.
    """
    def __init__(self, out_dim:int = 128, channels:tuple = (32, 64)):
        super().__init__()
        self.body = nn.Sequential(
            *_conv_block(1, channels[0], 3, 2),
            *_conv_block(channels[0], channels[1], 3, 2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.head = nn.Linear(channels[1], out_dim)

    def forward(self, mel:torch.Tensor) -> AudioFeatures:
        """
        Parameters:
        - mel: (B, T, M, n_mels)

        Returns:
        - AudioFeatures with embedding (B, T, D)
        """
        if mel.ndim != 4:
            raise ValueError(f"mel must be (B, T, M, n_mels), got {tuple(mel.shape)}")
        B, T = mel.shape[:2]
        embedding = self.head(self.body(mel.reshape(B * T, 1, *mel.shape[2:])))
        return AudioFeatures(mel=mel, embedding=embedding.reshape(B, T, -1))


def encode_audio(encoder:AudioEncoder, mel:torch.Tensor) -> torch.Tensor:
    if mel.ndim == 3:
        mel = mel.unsqueeze(0)
    return encoder(mel).embedding
