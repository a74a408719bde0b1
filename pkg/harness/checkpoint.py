import hashlib
import logging
import random
from pathlib import Path

import numpy as np
import torch

from harness.config import ExperimentConfig
from harness.errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

def rng_states(generator:torch.Generator = None) -> dict:
    return {
        "python": random.getstate(),
        "numpy": np.random.get_state(),
        "torch": torch.get_rng_state(),
        "generator": generator.get_state() if generator is not None else None,
    }


def restore_rng_states(states:dict, generator:torch.Generator = None):
    random.setstate(states["python"])
    np.random.set_state(states["numpy"])
    torch.set_rng_state(states["torch"])
    if generator is not None and states["generator"] is not None:
        generator.set_state(states["generator"])


def save_checkpoint(path:str, model, optimizer, config:ExperimentConfig, epoch:int, step_in_epoch:int,
                    global_step:int, generator:torch.Generator = None) -> Path:
    """
    Write everything needed to resume training bit-exactly.

    Parameters:
    - path: destination file
    - model: CounterfactualAVS
    - optimizer: its optimizer, None for inference-only checkpoints
    - config: ExperimentConfig of the run
    - epoch, step_in_epoch, global_step: position in the run
    - generator: the trainer's torch Generator

    Returns:
    - Path of the checkpoint
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "semantic": model.semantic,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step_in_epoch": step_in_epoch,
        "global_step": global_step,
        "rng": rng_states(generator),
        "pool_cache": model.pool_cache.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    logger.debug("Saved checkpoint %s at epoch %d, step %d", path, epoch, global_step)
    return path


def load_checkpoint(path:str, config:ExperimentConfig = None, map_location="cpu") -> dict:
    """
    Read a checkpoint, optionally checking it against the config it is resumed with.

    Raises:
    - CheckpointError: on a missing or unreadable file, an unknown version or a config hash mismatch
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as error:
        raise CheckpointError(f"checkpoint {path} is unreadable: {error}") from error

    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload.get('version')} is not supported")
    if config is not None and payload["config_hash"] != config.config_hash():
        raise CheckpointError(
            f"checkpoint {path} was written for config {payload['config_hash'][:12]}, "
            f"refusing to resume with config {config.config_hash()[:12]}"
        )
    return payload


def load_model(path:str, device:str = "cpu") -> tuple:
    """
    Rebuild the model stored in a checkpoint.

    Returns:
    - (CounterfactualAVS in eval mode, ExperimentConfig)
    """
    from model.CounterfactualAVS import CounterfactualAVS

    payload = load_checkpoint(path, map_location=device)
    config = ExperimentConfig.from_dict(payload["config"])
    model = CounterfactualAVS(config, semantic=payload["semantic"])
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as error:
        raise CheckpointError(f"checkpoint {path} does not fit the configured model: {error}") from error
    model.pool_cache.load_state_dict(payload["pool_cache"])
    return model.to(device).eval(), config


def _feed(digest, value):
    match value:
        case dict():
            for key in sorted(value, key=str):
                digest.update(repr(key).encode())
                _feed(digest, value[key])
        case list() | tuple():
            digest.update(f"seq{len(value)}".encode())
            for item in value:
                _feed(digest, item)
        case torch.Tensor():
            tensor = value.detach().cpu().contiguous()
            digest.update(f"{tensor.dtype}{tuple(tensor.shape)}".encode())
            digest.update(tensor.reshape(-1).view(torch.uint8).numpy().tobytes() if tensor.numel() else b"")
        case np.ndarray():
            digest.update(f"{value.dtype}{value.shape}".encode())
            digest.update(np.ascontiguousarray(value).tobytes())
        case _:
            digest.update(repr(value).encode())


def checkpoint_digest(path:str) -> str:
    """
    SHA-256 of the checkpoint content, independent of the archive container
    (torch.save stamps every write with a fresh serialization id).
    """
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    digest = hashlib.sha256()
    _feed(digest, payload)
    return digest.hexdigest()
