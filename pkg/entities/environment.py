import numpy as np
import pygame

from entities.colors import MASK_OFF, MASK_ON, TimbreColor

BACKGROUND = (40, 40, 48)
TEXTURE_CELL = 8
TEXTURE_STD = 6.0

class Environment:
    """
    Defines the off-screen canvas of a synthetic clip: the background texture
    and the drawing of frames and ground-truth masks.

    Attributes:
    - height: int representing the height of the canvas
    - width: int representing the width of the canvas
    - background: uint8 array (H, W, 3), fixed for the whole clip

    Constants:
    - BACKGROUND: RGB base colour of the canvas
    - TEXTURE_CELL: size in pixels of one background texture cell
    - TEXTURE_STD: standard deviation of the texture around the base colour

    Raises:
    - AssertionError: If the canvas size is not greater than 0
    """
    def __init__(self, resolution:tuple, seed:int):
        assert resolution[0] > 0 and resolution[1] > 0, "Canvas size must be greater than 0"

        self.height, self.width = int(resolution[0]), int(resolution[1])
        self.background = self._make_background(np.random.default_rng(seed))

    def _make_background(self, rng:np.random.Generator) -> np.ndarray:
        """
        Build a blocky texture around the base colour.

        Parameters:
        - rng: numpy Generator seeded by the clip

        Returns:
        - uint8 array (H, W, 3)
        """
        cells_h = -(-self.height // TEXTURE_CELL)
        cells_w = -(-self.width // TEXTURE_CELL)
        cells = rng.normal(0.0, TEXTURE_STD, size=(cells_h, cells_w, 3))
        texture = np.repeat(np.repeat(cells, TEXTURE_CELL, axis=0), TEXTURE_CELL, axis=1)
        texture = texture[:self.height, :self.width] + np.asarray(BACKGROUND, dtype=np.float64)
        return np.clip(np.round(texture), 0, 255).astype(np.uint8)

    def _new_surface(self) -> pygame.Surface:
        return pygame.Surface((self.width, self.height), 0, 32)

    def draw_frame(self, frame:int, sources:list, distractors:list = ()) -> np.ndarray:
        """
        Draw one video frame.

        Visible distractors are drawn first so that sounding sources stay on top.

        Parameters:
        - frame: frame index
        - sources: list of SourceSpec sounding objects (drawn even while silent)
        - distractors: list of SourceSpec distractors, only the visible ones are drawn

        Returns:
        - uint8 array (H, W, 3)
        """
        surface = self._new_surface()
        pygame.surfarray.blit_array(surface, self.background.transpose(1, 0, 2))

        for source in [s for s in distractors if s.visible] + list(sources):
            source.draw(surface, frame, TimbreColor.of(source.tone.timbre))

        return pygame.surfarray.array3d(surface).transpose(1, 0, 2).copy()

    def draw_mask(self, frame:int, sources:list, semantic:bool = False) -> np.ndarray:
        """
        Draw the ground-truth mask of one frame: the visible footprint of every
        source sounding at that frame. Sources are drawn in the same order as in
        draw_frame, silent ones in MASK_OFF, so an occluded footprint is cut away.

        Parameters:
        - frame: frame index
        - sources: list of SourceSpec sounding objects
        - semantic: bool, write class labels instead of 1

        Returns:
        - uint8 array (H, W)
        """
        surface = self._new_surface()
        surface.fill(MASK_OFF)

        for source in sources:
            if not source.is_sounding(frame):
                source.draw(surface, frame, MASK_OFF)
            elif semantic:
                source.draw(surface, frame, (source.label(),) * 3)
            else:
                source.draw(surface, frame, MASK_ON)

        red = pygame.surfarray.array3d(surface)[:, :, 0].T
        return red.astype(np.uint8) if semantic else (red > 0).astype(np.uint8)
