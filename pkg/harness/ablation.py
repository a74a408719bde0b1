import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from harness.config import ExperimentConfig
from harness.errors import ConfigError
from harness.evaluation import evaluate_model
from harness.trainer import Trainer, make_clips

logger = logging.getLogger(__name__)

ALL_ON = {"toggles": {"mit": True, "sc": True, "cdcl": True, "pair_swap": False}}
MIT_CDCL = {"mit": True, "sc": False, "cdcl": True, "pair_swap": False}
MIT_SC = {"mit": True, "sc": True, "pair_swap": False}
MIT_ONLY = {"mit": True, "sc": False, "cdcl": False, "pair_swap": False}
# Rows that compare against a baseline without implicit text feed it to the decoder
TEXT_CUE = {"text_cue": True}

# Each row is a name and a nested override of the base config; None marks a skipped row
AXES = {
    "full": [
        ("MIT+SC+CDCL", ALL_ON),
    ],
    "components": [
        ("none", {"toggles": {"mit": False, "sc": False, "cdcl": False, "pair_swap": False}}),
        ("MIT", {"toggles": MIT_ONLY, "model": TEXT_CUE}),
        ("CDCL", {"toggles": {"mit": False, "sc": False, "cdcl": True, "pair_swap": False}}),
        ("MIT+SC", {"toggles": {**MIT_ONLY, "sc": True}, "model": TEXT_CUE}),
        ("MIT+CDCL", {"toggles": MIT_CDCL, "model": TEXT_CUE}),
        ("MIT+SC+CDCL", {**ALL_ON, "model": TEXT_CUE}),
    ],
    "granularity": [
        ("none", {"toggles": {**MIT_ONLY, "mit": False}}),
        ("frame", {"toggles": MIT_ONLY, "model": TEXT_CUE, "granularity": {"levels": ["frame"]}}),
        ("frame+video", {"toggles": MIT_ONLY, "model": TEXT_CUE, "granularity": {"levels": ["video", "frame"]}}),
        ("frame+video+segment", {"toggles": MIT_ONLY, "model": TEXT_CUE,
                                 "granularity": {"levels": ["video", "segment", "frame"]}}),
    ],
    "cf-dimension": [
        ("no SC", {"toggles": MIT_CDCL}),
        ("feature-level", {"toggles": {**MIT_CDCL, "sc": True, "cf_space": "feature", "cf_dimension": "both"}}),
        ("inter", {"toggles": {**MIT_CDCL, "sc": True, "cf_space": "continuous", "cf_dimension": "inter"}}),
        ("intra", {"toggles": {**MIT_CDCL, "sc": True, "cf_space": "continuous", "cf_dimension": "intra"}}),
        ("inter+intra", {"toggles": {**MIT_CDCL, "sc": True, "cf_space": "continuous", "cf_dimension": "both"}}),
    ],
    "cf-space": [
        ("no SC", {"toggles": MIT_CDCL}),
        ("discrete", None),
        ("continuous w/o L_ortho", {"toggles": {**MIT_CDCL, "sc": True, "cf_space": "continuous"}, "counterfactual": {"lambda_ortho": 0.0}}),
        ("continuous + L_ortho", {"toggles": {**MIT_CDCL, "sc": True, "cf_space": "continuous"}}),
    ],
    "contrast-pairs": [
        ("no CDCL", {"toggles": {**MIT_SC, "cdcl": False}}),
        ("v_l", {"toggles": {**MIT_SC, "cdcl": True, "contrast_pairs": ["v_l"]}}),
        ("v_l+a_l", {"toggles": {**MIT_SC, "cdcl": True, "contrast_pairs": ["v_l", "a_l"]}}),
        ("v_l+a_l+v_a", {"toggles": {**MIT_SC, "cdcl": True, "contrast_pairs": ["v_a", "v_l", "a_l"]}}),
    ],
    "contrast-mode": [
        ("no CDCL", {"toggles": {**MIT_SC, "cdcl": False}}),
        ("prototype", {"toggles": {**MIT_SC, "cdcl": True, "contrast_mode": "prototype"}}),
        ("feature", {"toggles": {**MIT_SC, "cdcl": True, "contrast_mode": "feature"}}),
        ("distribution", {"toggles": {**MIT_SC, "cdcl": True, "contrast_mode": "distribution"}}),
    ],
    "pair-swap": [
        ("no counterfactual", {"toggles": MIT_CDCL}),
        ("pair swap", {"toggles": {**MIT_CDCL, "pair_swap": True}}),
    ],
}


def _merge(base:dict, override:dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def override_config(config:ExperimentConfig, override:dict) -> ExperimentConfig:
    """
    Apply a nested override and re-validate.

    Raises:
    - ConfigError: if the resulting config breaks an invariant
    """
    return ExperimentConfig.from_dict(_merge(config.to_dict(), override))


@dataclass
class AblationRow:
    """
    Attributes:
    - name: row label
    - reports: one EvalReport per seed, empty when skipped
    - skipped: reason the row was not run, None otherwise
    """
    name: str
    reports: list = field(default_factory=list)
    skipped: str = None

    def mean(self, metric:str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.reports])) if self.reports else float("nan")


@dataclass
class AblationTable:
    axis: str
    rows: list

    def to_text(self) -> str:
        width = max(len(row.name) for row in self.rows) + 2
        lines = [f"{'row':<{width}}{'J':>9}{'F':>9}{'J&F':>9}", "-" * (width + 27)]
        for row in self.rows:
            if row.skipped:
                lines.append(f"{row.name:<{width}}{'skipped: ' + row.skipped:>27}")
            else:
                lines.append(f"{row.name:<{width}}{row.mean('J'):>9.2f}{row.mean('F'):>9.2f}{row.mean('JF'):>9.2f}")
        return "\n".join(lines)


def axis_configs(config:ExperimentConfig, axis:str) -> list:
    """
    Configs of every row of an axis, validated before anything is trained.

    Returns:
    - list of (name, ExperimentConfig or None for skipped rows)
    """
    if axis not in AXES:
        raise ConfigError(f"ablation axis must be one of {tuple(AXES)}, got {axis}")
    return [(name, None if override is None else override_config(config, override)) for name, override in AXES[axis]]


def ablate(config:ExperimentConfig, axis:str, train_clips:list = None, val_clips:list = None,
           out_dir:str = None, max_steps:int = None) -> AblationTable:
    """
    Train one run per row and seed of an axis and evaluate it on the validation clips.

    Parameters:
    - config: base ExperimentConfig, its seeds form the shared seed set
    - axis: one of AXES
    - train_clips, val_clips: corpora, built from the config when not given
    - out_dir: parent of the per-run directories
    - max_steps: optional cap on optimizer steps per run

    Returns:
    - AblationTable
    """
    rows_configs = axis_configs(config, axis)
    train_clips = train_clips if train_clips is not None else make_clips(config, "train")
    val_clips = val_clips if val_clips is not None else make_clips(config, "val")
    out_dir = Path(out_dir or config.out_dir) / f"ablate_{axis}"

    rows = []
    for index, (name, row_config) in enumerate(rows_configs):
        if row_config is None:
            rows.append(AblationRow(name, skipped="out of scope"))
            logger.info("Skipping row %s", name)
            continue
        row = AblationRow(name)
        for seed in config.seeds:
            seeded = override_config(row_config, {"seed": seed})
            trainer = Trainer(seeded, train_clips, val_clips, out_dir / f"row{index}_seed{seed}")
            trainer.train(max_steps=max_steps, progress=False)
            eval_set = trainer.val_set or trainer.train_set
            row.reports.append(evaluate_model(trainer.model, eval_set, seeded.optim.batch_size, trainer.device))
        logger.info("Row %s: J&F %.2f", name, row.mean("JF"))
        rows.append(row)
    return AblationTable(axis, rows)
