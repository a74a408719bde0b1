import math
from dataclasses import dataclass

import torch
from torch import nn

from harness.config import LEVELS, GranularityConfig
from harness.errors import NumericalError
from model.encoders import VisualFeatureStack

class ChannelAttention(nn.Module):
    """
    Self-attention whose tokens are (frame, channel) pairs.

    Q, K and V are linear maps over the flattened spatial axis, so the
    correlation matrix is (L*C) x (L*C) for L frames and never (L*H*W)^2.
    The V projection starts at zero, which makes a fresh block the identity.

    Attributes:
    - spatial: H*W of the scale the block attends
    - temperature: softmax temperature, sqrt(H*W) when not given
    """
    def __init__(self, spatial:int, temperature:float = None):
        super().__init__()
        if temperature is not None and temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {temperature}")

        self.spatial = spatial
        self.temperature = temperature or math.sqrt(spatial)
        self.query = nn.Linear(spatial, spatial)
        self.key = nn.Linear(spatial, spatial)
        self.value = nn.Linear(spatial, spatial)
        nn.init.zeros_(self.value.weight)
        nn.init.zeros_(self.value.bias)

    def forward(self, features:torch.Tensor, return_attention:bool = False):
        """
        Parameters:
        - features: (N, L, C, H, W), attention runs over the L*C tokens of each of the N groups
        - return_attention: also return the (N, L*C, L*C) attention matrix

        Returns:
        - tensor shaped like features, F + A V

        Raises:
        - NumericalError: on non-finite input
        """
        if not torch.isfinite(features).all():
            raise NumericalError("channel attention received non-finite features")

        N, L, C, H, W = features.shape
        if H * W != self.spatial:
            raise ValueError(f"block attends {self.spatial} spatial positions, got {H}x{W}")

        tokens = features.reshape(N, L * C, H * W)
        scores = self.query(tokens) @ self.key(tokens).transpose(-1, -2) / self.temperature
        attention = torch.softmax(scores, dim=-1)
        out = (tokens + attention @ self.value(tokens)).reshape(N, L, C, H, W)

        if return_attention:
            return out, attention
        return out


def channel_attention(features:torch.Tensor, block:ChannelAttention) -> torch.Tensor:
    """
    Apply a block to one clip (T, C, H, W) or to a batch (B, T, C, H, W),
    attending over all frames at once.
    """
    if features.ndim == 4:
        return block(features.unsqueeze(0)).squeeze(0)
    return block(features)


def segment_windows(num_frames:int, window:int) -> list:
    """
    One backward window per frame: frames [t - w + 1, t], indices before the
    first frame repeat frame 0.

    Parameters:
    - num_frames: T
    - window: w

    Returns:
    - list of T lists of w frame indices
    """
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    return [[max(0, t - window + 1 + i) for i in range(window)] for t in range(num_frames)]


@dataclass
class GranularityStreams:
    """
    Context-enriched features at the three temporal granularities.

    Attributes:
    - video, segment, frame: lists of per-scale tensors (B, T, C, H, W); a
      disabled level passes the input through
    - fused: VisualFeatureStack whose scales are the mean of the enabled levels
    - levels: enabled levels
    """
    video: list
    segment: list
    frame: list
    fused: VisualFeatureStack
    levels: tuple

    def stream(self, level:str) -> list:
        return getattr(self, level)


class TemporalContext(nn.Module):
    """
    Video, segment and frame level context on the coarsest pyramid scales.

    One ChannelAttention block per attended scale is shared by the three
    levels; the levels differ only in how many frames attend together (all,
    a backward window, one).

    Attributes:
    - blocks: attention blocks, keyed by scale index
    - config: GranularityConfig
    """
    def __init__(self, spatial_sizes:list, config:GranularityConfig):
        super().__init__()
        self.config = config
        self.attended = list(range(len(spatial_sizes)))[-config.attended_scales:]
        self.blocks = nn.ModuleDict({
            str(i): ChannelAttention(spatial_sizes[i], config.temperature) for i in self.attended
        })

    def _level(self, level:str, features:torch.Tensor, block:ChannelAttention) -> torch.Tensor:
        B, T = features.shape[:2]
        match level:
            case "video":
                return block(features)
            case "segment":
                windows = torch.tensor(segment_windows(T, self.config.window(T)), device=features.device)
                grouped = features[:, windows]
                out = block(grouped.reshape(B * T, *grouped.shape[2:]))
                return out[:, -1].reshape(features.shape)
            case "frame":
                return block(features.reshape(B * T, 1, *features.shape[2:])).reshape(features.shape)
            case _:
                raise ValueError(f"Level: {level} not yet implemented")

    def forward(self, stack:VisualFeatureStack, levels:tuple = None) -> GranularityStreams:
        """
        Parameters:
        - stack: VisualFeatureStack from the visual encoder
        - levels: enabled levels, defaults to the configured ones

        Returns:
        - GranularityStreams
        """
        levels = tuple(levels or self.config.levels)
        if not levels:
            raise ValueError("at least one granularity level must be enabled")

        streams = {level: list(stack.scales) for level in LEVELS}
        for i in self.attended:
            for level in levels:
                streams[level][i] = self._level(level, stack.scales[i], self.blocks[str(i)])

        fused = list(stack.scales)
        for i in self.attended:
            fused[i] = torch.stack([streams[level][i] for level in levels]).mean(dim=0)
        return GranularityStreams(
            video=streams["video"],
            segment=streams["segment"],
            frame=streams["frame"],
            fused=stack.replace_scales(fused),
            levels=levels,
        )


def apply_granularity(stack:VisualFeatureStack, context:TemporalContext, config:GranularityConfig = None) -> tuple:
    """
    Returns:
    - (F^v, F^s, F^f) as lists of per-scale tensors
    """
    streams = context(stack, levels=config.levels if config else None)
    return streams.video, streams.segment, streams.frame
