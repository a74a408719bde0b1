import json
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import soundfile as sf
from PIL import Image

from entities.clip import ClipSpec, RawClip
from entities.concepts import SHAPES, TIMBRES, ShapeClass
from entities.environment import Environment
from entities.source import SourceSpec, Tone, Trajectory
from entities.source_manager import SourceManager

logger = logging.getLogger(__name__)

# Pitch is tied to the shape so that the audio alone identifies the concept
SHAPE_FREQUENCIES = {
    ShapeClass.CIRCLE: 262.0,
    ShapeClass.SQUARE: 392.0,
    ShapeClass.TRIANGLE: 523.0,
    ShapeClass.BAR: 784.0,
}

REGIMES = ("s4", "m3", "avss", "static-single", "dynamic-single", "static-multi", "dynamic-multi")


def generate_clip(spec:ClipSpec) -> RawClip:
    """
    Generate a synthetic clip from its ClipSpec.

    The output is a pure function of the ClipSpec: the background texture and the
    additive noise are both seeded by spec.seed.

    Parameters:
    - spec: ClipSpec describing the scene

    Returns:
    - RawClip with frames, waveform and ground-truth masks

    Raises:
    - ValueError: if the ClipSpec is invalid
    """
    spec.validate()

    environment = Environment(spec.resolution, seed=spec.seed)
    source_manager = SourceManager(spec.sources, spec.noise_sources)

    frames, masks = [], []
    for t in range(spec.num_frames):
        frames.append(environment.draw_frame(t, source_manager.get_sources(), source_manager.get_distractors()))
        masks.append(environment.draw_mask(t, source_manager.get_sources(), semantic=spec.semantic))

    waveform = source_manager.render_audio(
        spec.num_frames,
        spec.audio_sr,
        noise_level=spec.noise_level,
        rng=np.random.default_rng([spec.seed, 1])
    )

    clip = RawClip(
        frames=np.stack(frames),
        waveform=waveform,
        masks=np.stack(masks),
        class_labels=source_manager.class_labels(),
        sample_rate=spec.audio_sr,
        clip_id=spec.clip_id or f"synth_{spec.seed:06d}",
        subset=spec.subset,
        semantic=spec.semantic,
    )
    logger.debug("Generated clip %s with %d sources", clip.clip_id, len(spec.sources))
    return clip


def derangement(batch_size:int, fraction:float, rng:np.random.Generator) -> np.ndarray:
    """
    Draw the audio permutation used by pair swapping.

    floor(fraction * batch_size) items are selected and rotated among
    themselves, so none of them keeps its own audio. Unselected items map to
    themselves.

    Parameters:
    - batch_size: B
    - fraction: share of the batch to swap, in [0, 1]
    - rng: numpy Generator

    Returns:
    - int array p of length B, item i receives the audio of item p[i]

    Raises:
    - ValueError: on a batch smaller than 2, a fraction outside [0, 1], or a single selected item
    """
    if batch_size < 2:
        raise ValueError(f"pair swap needs a batch of at least 2, got {batch_size}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")

    n_swapped = math.floor(fraction * batch_size)
    if n_swapped == 1:
        raise ValueError("fraction selects a single item, which has no valid derangement")

    permutation = np.arange(batch_size)
    if n_swapped == 0:
        return permutation

    selected = rng.choice(batch_size, size=n_swapped, replace=False)
    permutation[selected] = np.roll(selected, -1)
    return permutation


def pair_swap(batch:list, fraction:float, seed:int) -> list:
    """
    Swap the waveforms of part of a batch to build counterfactual pairs.

    Parameters:
    - batch: list of RawClip
    - fraction: share of the batch whose audio is exchanged
    - seed: int seeding the selection

    Returns:
    - list of RawClip copies; frames and masks are unchanged
    """
    permutation = derangement(len(batch), fraction, np.random.default_rng(seed))

    swapped = []
    for i, source_index in enumerate(permutation):
        clip = batch[i].copy()
        if source_index != i:
            clip.waveform = batch[source_index].waveform.copy()
            clip.extras["audio_from"] = int(source_index)
        swapped.append(clip)
    return swapped


def _random_source(rng:np.random.Generator, num_frames:int, speed:tuple, activity:float, **flags) -> SourceSpec:
    """
    Draw a random source for the regime presets.
    """
    shape = SHAPES[rng.integers(len(SHAPES))]
    timbre = TIMBRES[rng.integers(len(TIMBRES))]
    size = float(rng.uniform(0.1, 0.18))
    lo, hi = size + 0.01, 1 - size - 0.01
    angle = rng.uniform(0, 2 * np.pi)
    magnitude = rng.uniform(*speed)

    active = rng.random(num_frames) < activity
    if not active.any():
        active[rng.integers(num_frames)] = True

    return SourceSpec(
        shape_class=shape,
        tone=Tone(SHAPE_FREQUENCIES[shape], timbre),
        trajectory=Trajectory(
            start=(float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))),
            velocity=(float(magnitude * np.cos(angle)), float(magnitude * np.sin(angle))),
            size=size
        ),
        active_frames=tuple(bool(a) for a in active),
        loudness=float(rng.uniform(0.5, 1.0)),
        **flags
    )


def make_regime_specs(regime:str, count:int, seed:int, num_frames:int = None, resolution:tuple = (224, 224)) -> list:
    """
    Build a corpus of clip specs for one scene regime.

    Regimes:
    - s4: one always-active source, slow motion
    - m3: two or three sources with intermittent activity and one distractor
    - avss: as m3, with semantic masks and ten frames
    - static-single, dynamic-single, static-multi, dynamic-multi: the four
      visual/audio complexity quadrants

    Parameters:
    - regime: str, one of REGIMES
    - count: number of clips
    - seed: int seeding the corpus
    - num_frames: optional override of T
    - resolution: (H, W) of the frames

    Returns:
    - list of ClipSpec
    """
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime}")

    rng = np.random.default_rng(seed)
    specs = []
    for index in range(count):
        clip_seed = int(rng.integers(2**31 - 1))
        clip_rng = np.random.default_rng(clip_seed)

        match regime:
            case "s4":
                T = num_frames or 5
                sources = [_random_source(clip_rng, T, (0.0, 0.04), 1.0)]
                distractors, subset, semantic = [], "s4", False
            case "m3" | "avss":
                T = num_frames or (10 if regime == "avss" else 5)
                sources = [_random_source(clip_rng, T, (0.0, 0.06), 0.7) for _ in range(int(clip_rng.integers(2, 4)))]
                if clip_rng.random() < 0.5:
                    distractors = [_random_source(clip_rng, T, (0.0, 0.06), 1.0, audible=False)]
                else:
                    distractors = [_random_source(clip_rng, T, (0.0, 0.06), 0.7, visible=False)]
                subset, semantic = regime, regime == "avss"
            case _:
                T = num_frames or 5
                speed = (0.0, 0.0) if regime.startswith("static") else (0.08, 0.12)
                n_sources = 1 if regime.endswith("single") else 2
                sources = [_random_source(clip_rng, T, speed, 1.0) for _ in range(n_sources)]
                if n_sources > 1:
                    # The second source alternates on and off
                    sources[1] = replace(sources[1], active_frames=tuple(t % 2 == 0 for t in range(T)))
                distractors, subset, semantic = [], "m3" if n_sources > 1 else "s4", False

        specs.append(ClipSpec(
            seed=clip_seed,
            sources=tuple(sources),
            num_frames=T,
            resolution=tuple(resolution),
            noise_sources=tuple(distractors),
            semantic=semantic,
            subset=subset,
            clip_id=f"{regime}_{seed}_{index:04d}",
        ))
    return specs


def add_noise_at_snr(clip:RawClip, snr_db:float, seed:int) -> RawClip:
    """
    Degrade the audio of a clip with white noise at a given signal-to-noise ratio.

    Parameters:
    - clip: RawClip
    - snr_db: SNR in dB; inf leaves the clip untouched
    - seed: int seeding the noise

    Returns:
    - RawClip copy
    """
    degraded = clip.copy()
    if math.isinf(snr_db) and snr_db > 0:
        return degraded

    signal_power = float(np.mean(clip.waveform.astype(np.float64) ** 2)) or 1.0
    noise_power = signal_power / (10 ** (snr_db / 10))
    noise = np.random.default_rng(seed).normal(0.0, math.sqrt(noise_power), size=clip.waveform.shape)
    degraded.waveform = (clip.waveform + noise).astype(np.float32)
    return degraded


def mix_frames(clips:list, fraction:float, seed:int) -> tuple:
    """
    Degrade the video of each clip by replacing frames with frames of other clips.

    floor(fraction * T) frames of every clip are replaced. A replaced frame has
    an empty ground truth, since the sounding object is not on screen.

    Parameters:
    - clips: list of RawClip sharing one resolution
    - fraction: share of frames replaced, in [0, 1]
    - seed: int seeding the choice of frames and donors

    Returns:
    - (list of RawClip copies, provenance) where provenance[i][t] is the
      (clip index, frame index) the frame was taken from
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"frame mixing fraction must be in [0, 1], got {fraction}")

    rng = np.random.default_rng(seed)
    mixed, provenance = [], []
    for i, clip in enumerate(clips):
        out = clip.copy()
        tags = [(i, t) for t in range(clip.num_frames)]
        n_mixed = math.floor(fraction * clip.num_frames)

        if n_mixed and len(clips) < 2:
            raise ValueError("frame mixing needs at least two clips")

        for t in rng.choice(clip.num_frames, size=n_mixed, replace=False):
            donor = int(rng.choice([j for j in range(len(clips)) if j != i]))
            donor_frame = int(rng.integers(clips[donor].num_frames))
            out.frames[t] = clips[donor].frames[donor_frame]
            out.masks[t] = 0
            tags[t] = (donor, donor_frame)

        mixed.append(out)
        provenance.append(tags)
    return mixed, provenance


def _label_palette() -> list:
    palette = [0, 0, 0]
    for label in range(1, 256):
        palette += [(label * 53) % 256, (label * 97) % 256, (label * 151) % 256]
    return palette


def save_clip(clip:RawClip, root:str, split:str) -> Path:
    """
    Serialize a clip in the dataset directory layout.

    Layout: <root>/<split>/<clip_id>/frames/<t>.png, audio.wav (PCM 16-bit)
    and masks/<t>.png (0/255 grey for binary masks, indexed palette for label maps).

    Parameters:
    - clip: RawClip
    - root: dataset root
    - split: train, val or test

    Returns:
    - Path of the clip directory
    """
    clip_dir = Path(root) / split / clip.clip_id
    (clip_dir / "frames").mkdir(parents=True, exist_ok=True)
    (clip_dir / "masks").mkdir(parents=True, exist_ok=True)

    for t in range(clip.num_frames):
        Image.fromarray(clip.frames[t]).save(clip_dir / "frames" / f"{t}.png")
        if clip.semantic:
            mask = Image.fromarray(clip.masks[t].astype(np.uint8))
            mask.putpalette(_label_palette())
        else:
            mask = Image.fromarray((clip.masks[t] > 0).astype(np.uint8) * 255)
        mask.save(clip_dir / "masks" / f"{t}.png")

    sf.write(clip_dir / "audio.wav", np.clip(clip.waveform, -1.0, 1.0), clip.sample_rate, subtype="PCM_16")
    return clip_dir


def write_index(root:str, split:str, clips:list):
    """
    Write <root>/<split>/index.json listing the clip ids and their subset tags.
    """
    split_dir = Path(root) / split
    split_dir.mkdir(parents=True, exist_ok=True)
    entries = [{"id": clip.clip_id, "subset": clip.subset} for clip in clips]
    with open(split_dir / "index.json", "w") as f:
        json.dump({"clips": entries}, f, indent=2)
