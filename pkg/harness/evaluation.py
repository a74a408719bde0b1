import json
import logging
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import default_collate
from tqdm import tqdm

from entities.concepts import NUM_CLASSES
from entities.dataset import AVClipDataset
from harness.checkpoint import load_model
from harness.errors import CheckpointError
from harness.metrics import EvalReport, build_report

logger = logging.getLogger(__name__)

def _batches(dataset, batch_size:int):
    for start in range(0, len(dataset), batch_size):
        yield default_collate([dataset[i] for i in range(start, min(start + batch_size, len(dataset)))])


@torch.no_grad()
def predict(model, dataset:AVClipDataset, batch_size:int = 8, device:str = "cpu", progress:bool = False) -> list:
    """
    Hard masks of every clip on the inference path.

    Returns:
    - list of (T, H, W) int arrays, one per clip
    """
    model.eval()
    predictions = []
    for batch in tqdm(_batches(dataset, batch_size), desc="Evaluation", disable=not progress, leave=False):
        prediction = model(batch["frames"].to(device), batch["mel"].to(device))
        predictions += list(prediction.masks().cpu().numpy())
    return predictions


def ground_truths(dataset:AVClipDataset) -> list:
    return [item["masks"].numpy() for item in dataset.items]


def evaluate_predictions(predictions:list, dataset:AVClipDataset, beta2:float = 0.3) -> EvalReport:
    """
    Score externally produced predictions against a dataset.
    """
    semantic = dataset.is_semantic()
    return build_report(
        predictions,
        ground_truths(dataset),
        [clip.clip_id for clip in dataset.clips],
        semantic=semantic,
        num_classes=NUM_CLASSES if semantic else None,
        beta2=beta2,
    )


def evaluate_model(model, dataset:AVClipDataset, batch_size:int = 8, device:str = "cpu") -> EvalReport:
    if model.semantic != dataset.is_semantic():
        raise CheckpointError(
            f"model predicts {'labels' if model.semantic else 'binary masks'} "
            f"but the dataset holds {'labels' if dataset.is_semantic() else 'binary masks'}"
        )
    return evaluate_predictions(predict(model, dataset, batch_size, device), dataset)


def evaluate(checkpoint:str, clips:list, device:str = "cpu", batch_size:int = None) -> EvalReport:
    """
    Evaluate a checkpoint on a list of clips.

    Parameters:
    - checkpoint: path written by the trainer
    - clips: list of RawClip, resized to the checkpoint's resolution
    - device: torch device
    - batch_size: defaults to the checkpoint's training batch size

    Returns:
    - EvalReport

    Raises:
    - CheckpointError: if the checkpoint does not fit the data
    """
    model, config = load_model(checkpoint, device)
    dataset = AVClipDataset(clips, config.data.mel, config.data.resolution)
    report = evaluate_model(model, dataset, batch_size or config.optim.batch_size, device)
    logger.info("Evaluated %s on %d clips: %s", checkpoint, len(dataset), report.summary())
    return report


def _write_block_file(path:Path, blocks:dict, clip_ids:list) -> dict:
    """
    Write named (N, d) blocks back to back as one float32 stream and return the sidecar.
    """
    offset, sidecar = 0, {"dtype": "float32", "byte_order": "little", "blocks": [], "rows": []}
    with open(path, "wb") as f:
        for modality, values in blocks.items():
            values = np.ascontiguousarray(values, dtype="<f4")
            f.write(values.tobytes())
            sidecar["blocks"].append({"modality": modality, "offset": offset, "rows": values.shape[0], "dim": values.shape[1]})
            sidecar["rows"] += [{"clip_id": clip_id, "modality": modality} for clip_id in clip_ids]
            offset += values.size
    with open(path.with_suffix(".json"), "w") as f:
        json.dump(sidecar, f, indent=2)
    return sidecar


@torch.no_grad()
def export_embeddings(model, dataset:AVClipDataset, out_dir:str, batch_size:int = 8, device:str = "cpu") -> tuple:
    """
    Dump per-clip embeddings before (encoder outputs) and after (contrast
    heads) the shared embedding space.

    Files: embeddings_pre.f32 and embeddings_post.f32, each a little-endian
    float32 stream of (rows, dim) blocks, one block per modality, described by
    a .json sidecar (blocks with offset/rows/dim, then one record per row).

    Returns:
    - (pre path, post path)
    """
    model.eval()
    stages = {"pre": {}, "post": {}}
    for batch in _batches(dataset, batch_size):
        out = model.embeddings(batch["frames"].to(device), batch["mel"].to(device))
        for stage in stages:
            for modality, values in out[stage].items():
                stages[stage].setdefault(modality, []).append(values.cpu().numpy())

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clip_ids = [clip.clip_id for clip in dataset.clips]
    paths = []
    for stage, blocks in stages.items():
        path = out_dir / f"embeddings_{stage}.f32"
        _write_block_file(path, {m: np.concatenate(v) for m, v in blocks.items()}, clip_ids)
        paths.append(path)
    logger.info("Exported embeddings of %d clips to %s", len(clip_ids), out_dir)
    return tuple(paths)


def read_embeddings(path:str) -> dict:
    """
    Read a dump written by export_embeddings back into modality -> (N, d) arrays.
    """
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path, dtype="<f4")
    return {
        block["modality"]: flat[block["offset"]:block["offset"] + block["rows"] * block["dim"]].reshape(block["rows"], block["dim"])
        for block in sidecar["blocks"]
    }
