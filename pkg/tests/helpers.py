from entities.clip import ClipSpec
from entities.concepts import ShapeClass, Timbre
from entities.source import SourceSpec, Tone, Trajectory

def tiny_config_dict(**sections) -> dict:
    """
    Smallest configuration that exercises every component on 64x64 clips of 2 frames.
    """
    content = {
        "data": {"regime": "s4", "num_clips": 4, "val_clips": 2, "num_frames": 2, "resolution": [64, 64]},
        "model": {
            "visual_channels": [8, 16, 16, 16],
            "pooled_dim": 16,
            "audio_dim": 16,
            "text_dim": 16,
            "text_tokens": 2,
            "codebook_distractors": 4,
            "inversion_steps": 5,
            "query_dim": 16,
            "num_queries": 4,
            "decoder_layers": 1,
            "decoder_heads": 2,
        },
        "counterfactual": {
            "num_steps": 20,
            "intervention_step": 5,
            "pool_size": 2,
            "candidate_factor": 2,
            "denoiser_hidden": 32,
            "denoiser_blocks": 1,
        },
        "contrast": {"embed_dim": 8},
        "optim": {"lr": 1e-3, "batch_size": 2, "epochs": 1},
    }
    for name, values in sections.items():
        if isinstance(values, dict):
            content.setdefault(name, {}).update(values)
        else:
            content[name] = values
    return content


def static_source(shape:ShapeClass = ShapeClass.CIRCLE, timbre:Timbre = Timbre.SINE, start:tuple = (0.5, 0.5),
                  active:tuple = (True,) * 5, size:float = 0.15, frequency:float = 440.0) -> SourceSpec:
    return SourceSpec(
        shape_class=shape,
        tone=Tone(frequency, timbre),
        trajectory=Trajectory(start=start, velocity=(0.0, 0.0), size=size),
        active_frames=tuple(active),
    )


def simple_spec(sources:list, num_frames:int = 5, resolution:tuple = (64, 64), **kwargs) -> ClipSpec:
    return ClipSpec(seed=1, sources=tuple(sources), num_frames=num_frames, resolution=resolution, **kwargs)
