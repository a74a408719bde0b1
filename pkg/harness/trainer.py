import json
import logging
import random
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import default_collate
from tqdm import tqdm

from entities.avsbench import load_avsbench_dir
from entities.clip import RawClip
from entities.dataset import AVClipDataset
from entities.synthesis import generate_clip, make_regime_specs
from harness.checkpoint import load_checkpoint, restore_rng_states, save_checkpoint
from harness.config import ExperimentConfig
from harness.evaluation import evaluate_model
from model.CounterfactualAVS import CounterfactualAVS

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "step", "loss_seg", "loss_cf", "loss_v_a", "loss_v_l", "loss_a_l", "loss_total", "J", "F", "JF")

def make_clips(config:ExperimentConfig, split:str = "train") -> list:
    """
    Build the clips of a split from the data section of a config.

    Synthetic corpora are seeded by the experiment seed, the validation split
    with a distinct stream. Directory corpora are read from data.root and
    unreadable clips are skipped.

    Returns:
    - list of RawClip
    """
    data = config.data
    match data.source:
        case "synthetic":
            count = data.num_clips if split == "train" else data.val_clips
            seed = config.seed if split == "train" else config.seed + 7919
            specs = make_regime_specs(data.regime, count, seed, data.num_frames, data.resolution)
            if data.noise_level:
                specs = [replace(spec, noise_level=data.noise_level) for spec in specs]
            return [generate_clip(spec) for spec in specs]
        case "avsbench":
            return [c for c in load_avsbench_dir(data.root, split, data.mel.sample_rate) if isinstance(c, RawClip)]
        case _:
            raise ValueError(f"Data source: {data.source} not yet implemented")


@contextmanager
def deterministic_algorithms():
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


@dataclass
class RunArtifacts:
    """
    Attributes:
    - out_dir: run directory
    - checkpoint: path of checkpoint.pt
    - metrics_log: path of metrics.jsonl
    - config_path: path of config.yaml
    - step_losses: per-step loss terms, in order
    - records: per-epoch metric records
    - completed: False when the run stopped at max_steps
    """
    out_dir: Path
    checkpoint: Path
    metrics_log: Path
    config_path: Path
    step_losses: list = field(default_factory=list)
    records: list = field(default_factory=list)
    completed: bool = True


class Trainer:
    '''
    Trainer class that owns the model, the optimizer and the position in the run.

    Attributes:
    - config: ExperimentConfig
    - out_dir: run directory
    - train_set, val_set: AVClipDataset (val_set may be None)
    - generator: torch Generator driving every random draw of training
    - model: CounterfactualAVS
    - optimizer: AdamW over the trainable parameters
    - epoch, step_in_epoch, global_step: position in the run
    '''
    def __init__(self, config:ExperimentConfig, train_clips:list = None, val_clips:list = None, out_dir:str = None):
        self.config = config.validate()
        self.out_dir = Path(out_dir or config.out_dir)
        self.device = torch.device(config.device)

        train_clips = train_clips if train_clips is not None else make_clips(config, "train")
        val_clips = val_clips if val_clips is not None else (make_clips(config, "val") if config.data.val_clips else [])
        if not train_clips:
            raise ValueError("no training clips")
        self.train_set = AVClipDataset(train_clips, config.data.mel, config.data.resolution)
        self.val_set = AVClipDataset(val_clips, config.data.mel, config.data.resolution) if val_clips else None

        random.seed(config.seed)
        np.random.seed(config.seed)
        torch.manual_seed(config.seed)
        self.generator = torch.Generator().manual_seed(config.seed)

        self.model = CounterfactualAVS(config, semantic=self.train_set.is_semantic(), generator=self.generator).to(self.device)
        self.optimizer = torch.optim.AdamW(
            [p for p in self.model.parameters() if p.requires_grad],
            lr=config.optim.lr,
            weight_decay=config.optim.weight_decay,
        )
        self.epoch = 0
        self.step_in_epoch = 0
        self.global_step = 0

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / "checkpoint.pt"

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / "metrics.jsonl"

    def batch_order(self, epoch:int) -> list:
        '''
        Batches of clip indices of an epoch, a pure function of (seed, epoch).
        '''
        permutation = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.train_set))
        size = self.config.optim.batch_size
        return [permutation[i:i + size].tolist() for i in range(0, len(permutation), size)]

    def _collate(self, indices:list) -> dict:
        batch = default_collate([self.train_set[i] for i in indices])
        return {k: v.to(self.device) if isinstance(v, torch.Tensor) else v for k, v in batch.items()}

    def resume(self, path:str = None):
        '''
        Restore model, optimizer, position and random states from a checkpoint.

        Raises:
        - CheckpointError: if the checkpoint was written for another config
        '''
        payload = load_checkpoint(path or self.checkpoint_path, self.config, map_location=self.device)
        self.model.load_state_dict(payload["model"])
        self.model.pool_cache.load_state_dict(payload["pool_cache"])
        if payload["optimizer"] is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        self.epoch = payload["epoch"]
        self.step_in_epoch = payload["step_in_epoch"]
        self.global_step = payload["global_step"]
        restore_rng_states(payload["rng"], self.generator)
        logger.info("Resumed at epoch %d, step %d", self.epoch, self.global_step)

    def save(self) -> Path:
        return save_checkpoint(self.checkpoint_path, self.model, self.optimizer, self.config,
                               self.epoch, self.step_in_epoch, self.global_step, self.generator)

    def train_step(self, indices:list) -> dict:
        self.model.train()
        breakdown = self.model.compute_losses(self._collate(indices), self.epoch, self.generator)
        self.optimizer.zero_grad()
        breakdown.total.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), 1.0)
        self.optimizer.step()
        self.global_step += 1
        self.step_in_epoch += 1
        return breakdown.as_floats()

    def _record(self, epoch_losses:list) -> dict:
        def mean(name):
            values = [losses[name] for losses in epoch_losses if name in losses]
            return float(np.mean(values)) if values else None

        scores = {"J": None, "F": None, "JF": None}
        if self.val_set is not None:
            report = evaluate_model(self.model, self.val_set, self.config.optim.batch_size, self.device)
            scores = {"J": report.J, "F": report.F, "JF": report.JF}

        values = {
            "epoch": self.epoch + 1,
            "step": self.global_step,
            "loss_seg": mean("seg"),
            "loss_cf": mean("cf"),
            "loss_v_a": mean("v_a"),
            "loss_v_l": mean("v_l"),
            "loss_a_l": mean("a_l"),
            "loss_total": mean("total"),
        } | scores
        return {name: values[name] for name in METRIC_FIELDS}

    def train(self, max_steps:int = None, progress:bool = True) -> RunArtifacts:
        """
        Run (or continue) training up to config.optim.epochs, or stop after
        max_steps optimizer steps in this call and save a mid-epoch checkpoint.

        Returns:
        - RunArtifacts
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        config_path = self.out_dir / "config.yaml"
        self.config.save(config_path)
        artifacts = RunArtifacts(self.out_dir, self.checkpoint_path, self.metrics_path, config_path)
        epochs = self.config.optim.epochs
        taken = 0

        with deterministic_algorithms():
            while self.epoch < epochs:
                batches = self.batch_order(self.epoch)
                epoch_losses = []
                pbar = tqdm(batches[self.step_in_epoch:], desc=f"Epoch {self.epoch + 1}", disable=not progress, leave=False)
                for indices in pbar:
                    if max_steps is not None and taken >= max_steps:
                        self.save()
                        artifacts.completed = False
                        return artifacts
                    losses = self.train_step(indices)
                    epoch_losses.append(losses)
                    artifacts.step_losses.append(losses)
                    taken += 1
                    pbar.set_postfix({"loss": f"{losses['total']:.4f}"})

                record = self._record(epoch_losses)
                with open(self.metrics_path, "a") as f:
                    f.write(json.dumps(record) + "\n")
                artifacts.records.append(record)
                logger.info(
                    "Epoch %d/%d | seg %s | total %s | J&F %s", record["epoch"], epochs,
                    _fmt(record["loss_seg"]), _fmt(record["loss_total"]), _fmt(record["JF"]),
                )
                self.epoch += 1
                self.step_in_epoch = 0
                self.save()

        return artifacts


def _fmt(value) -> str:
    return "-" if value is None else f"{value:.4f}"


def train(config:ExperimentConfig, train_clips:list = None, val_clips:list = None, out_dir:str = None,
          max_steps:int = None, resume:bool = False) -> RunArtifacts:
    trainer = Trainer(config, train_clips, val_clips, out_dir)
    if resume:
        trainer.resume()
    return trainer.train(max_steps=max_steps)
