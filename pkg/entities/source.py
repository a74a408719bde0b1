import math
from dataclasses import dataclass

import numpy as np
import pygame
from scipy import signal

from entities.concepts import ShapeClass, Timbre, concept_label

@dataclass(frozen=True)
class Tone:
    """
    Implements the sound a source makes while it is active.

    Attributes:
    - frequency: fundamental frequency in Hz
    - timbre: Timbre family of the waveform
    """
    frequency: float
    timbre: Timbre = Timbre.SINE

    def waveform(self, num_samples:int, sample_rate:int) -> np.ndarray:
        """
        Render the unit-amplitude waveform of the tone.

        Parameters:
        - num_samples: number of samples to render
        - sample_rate: samples per second

        Returns:
        - float64 array of length num_samples in [-1, 1]
        """
        phase = 2 * np.pi * self.frequency * np.arange(num_samples) / sample_rate
        match self.timbre:
            case Timbre.SINE:
                return np.sin(phase)
            case Timbre.SQUARE:
                return signal.square(phase)
            case Timbre.SAWTOOTH:
                return signal.sawtooth(phase)
            case _:
                raise ValueError(f"Timbre: {self.timbre} not yet implemented")


@dataclass(frozen=True)
class Trajectory:
    """
    Implements the parametric path of a source over the frames of a clip.

    Positions and sizes are fractions of the frame. The path is linear and
    reflects on the frame border, so the shape never leaves the frame.

    Attributes:
    - start: (x, y) centre at frame 0, as fractions of width and height
    - velocity: (vx, vy) displacement per frame, as fractions of width and height
    - size: half-extent of the shape as a fraction of min(H, W)
    """
    start: tuple = (0.5, 0.5)
    velocity: tuple = (0.0, 0.0)
    size: float = 0.15

    def speed(self) -> float:
        return math.hypot(*self.velocity)

    def bounds(self, resolution:tuple) -> tuple:
        """
        Admissible range of the centre along each axis.

        Parameters:
        - resolution: (H, W) of the frame in pixels

        Returns:
        - ((x_lo, x_hi), (y_lo, y_hi)) as fractions
        """
        height, width = resolution
        radius = self.size * min(height, width)
        return (radius / width, 1 - radius / width), (radius / height, 1 - radius / height)

    def position(self, frame:int, resolution:tuple) -> tuple:
        """
        Centre of the shape at a given frame.

        Parameters:
        - frame: frame index
        - resolution: (H, W) of the frame in pixels

        Returns:
        - (x, y) pixel coordinates of the centre
        """
        height, width = resolution
        coords = []
        for start, velocity, (lo, hi) in zip(self.start, self.velocity, self.bounds(resolution)):
            span = hi - lo
            if span <= 0:
                coords.append(0.5)
                continue
            # Triangle wave folds the straight path back into [lo, hi]
            p = (start + velocity * frame - lo) % (2 * span)
            coords.append(lo + (2 * span - p if p > span else p))
        return coords[0] * width, coords[1] * height

    def radius(self, resolution:tuple) -> float:
        return self.size * min(resolution)


@dataclass(frozen=True)
class SourceSpec:
    """
    Implements one object of a synthetic scene.

    Attributes:
    - shape_class: ShapeClass drawn on screen
    - tone: Tone emitted while active
    - trajectory: Trajectory followed over the frames
    - active_frames: tuple of bools, one per frame, True when the source sounds
    - loudness: relative gain in [0, 1]
    - visible: bool, False for audible-but-offscreen distractors
    - audible: bool, False for silent-but-visible distractors
    """
    shape_class: ShapeClass
    tone: Tone
    trajectory: Trajectory = Trajectory()
    active_frames: tuple = ()
    loudness: float = 1.0
    visible: bool = True
    audible: bool = True

    def label(self) -> int:
        return concept_label(self.shape_class, self.tone.timbre)

    def validate(self, num_frames:int):
        """
        Check the source against the clip it belongs to.

        Parameters:
        - num_frames: T of the clip

        Raises:
        - ValueError: on a malformed activity mask, gain or trajectory
        """
        if len(self.active_frames) != num_frames:
            raise ValueError(f"active_frames has length {len(self.active_frames)}, expected {num_frames}")
        if not 0.0 <= self.loudness <= 1.0:
            raise ValueError(f"loudness must be in [0, 1], got {self.loudness}")
        if not 0.0 < self.trajectory.size < 0.5:
            raise ValueError(f"trajectory size must be in (0, 0.5), got {self.trajectory.size}")
        if self.tone.frequency <= 0:
            raise ValueError(f"tone frequency must be positive, got {self.tone.frequency}")

    def validate_placement(self, resolution:tuple):
        for axis, (start, (lo, hi)) in enumerate(zip(self.trajectory.start, self.trajectory.bounds(resolution))):
            if not lo - 1e-9 <= start <= hi + 1e-9:
                raise ValueError(f"trajectory start {start} on axis {axis} leaves the frame (allowed [{lo:.3f}, {hi:.3f}])")

    def is_sounding(self, frame:int) -> bool:
        """
        A source sounds at a frame when it is audible, active and not muted.
        """
        return self.audible and self.loudness > 0 and bool(self.active_frames[frame])

    def draw(self, surface:pygame.Surface, frame:int, color:tuple):
        """
        Draw the source on a surface at a given frame.

        Parameters:
        - surface: pygame surface of the frame (or of a mask)
        - frame: frame index
        - color: RGB colour to draw with
        """
        resolution = (surface.get_height(), surface.get_width())
        cx, cy = self.trajectory.position(frame, resolution)
        r = self.trajectory.radius(resolution)
        cx, cy, r = int(round(cx)), int(round(cy)), max(1, int(round(r)))

        match self.shape_class:
            case ShapeClass.CIRCLE:
                pygame.draw.circle(surface, color, (cx, cy), r)
            case ShapeClass.SQUARE:
                pygame.draw.rect(surface, color, pygame.Rect(cx - r, cy - r, 2 * r, 2 * r))
            case ShapeClass.TRIANGLE:
                pygame.draw.polygon(surface, color, [(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)])
            case ShapeClass.BAR:
                pygame.draw.rect(surface, color, pygame.Rect(cx - r, cy - r // 3, 2 * r, 2 * (r // 3) + 1))
            case _:
                raise ValueError(f"Shape: {self.shape_class} not yet implemented")
