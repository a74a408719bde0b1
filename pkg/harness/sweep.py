import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from entities.dataset import AVClipDataset
from entities.synthesis import add_noise_at_snr, mix_frames
from harness.ablation import override_config
from harness.config import ExperimentConfig
from harness.errors import ConfigError
from harness.evaluation import evaluate_model
from harness.trainer import Trainer, make_clips

logger = logging.getLogger(__name__)

TRAINED_PARAMS = ("k_c", "alpha_o", "s_d")
DEGRADATION_PARAMS = ("r_a", "r_v")
SWEEP_PARAMS = TRAINED_PARAMS + DEGRADATION_PARAMS

DEFAULTS = {"k_c": 8, "alpha_o": (0.7, 0.8), "s_d": 200, "r_a": math.inf, "r_v": 0.0}

def parse_value(param:str, text:str):
    """
    Parse one command-line sweep value: an int, a float, inf, or lo:hi for alpha_o.
    """
    match param:
        case "k_c" | "s_d":
            return int(text)
        case "alpha_o":
            lo, hi = text.split(":")
            return float(lo), float(hi)
        case "r_a" | "r_v":
            return float(text)
        case _:
            raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param}")


def check_values(config:ExperimentConfig, param:str, values:list) -> list:
    """
    Validate every value of a sweep.

    Raises:
    - ConfigError: naming the first illegal value
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param}")
    if not values:
        raise ConfigError("a sweep needs at least one value")

    num_steps = config.counterfactual.num_steps
    for value in values:
        match param:
            case "k_c":
                if int(value) != value or value < 1:
                    raise ConfigError(f"k_c must be an integer >= 1, got {value}")
            case "alpha_o":
                lo, hi = value
                if not 0 < lo < hi <= 1:
                    raise ConfigError(f"alpha_o must be an interval [lo, hi) inside (0, 1], got {value}")
            case "s_d":
                if int(value) != value or not 1 <= value < num_steps:
                    raise ConfigError(f"s_d must be an integer in [1, {num_steps}), got {value}")
            case "r_a":
                if math.isnan(value) or value == -math.inf:
                    raise ConfigError(f"r_a must be a real SNR in dB or inf, got {value}")
            case "r_v":
                if not 0 <= value <= 1:
                    raise ConfigError(f"r_v must be in [0, 1], got {value}")
    return list(values)


def value_override(param:str, value) -> dict:
    match param:
        case "k_c":
            return {"counterfactual": {"pool_size": int(value)}}
        case "alpha_o":
            return {"counterfactual": {"ortho_range": list(value), "alpha": value[1]}}
        case "s_d":
            return {"counterfactual": {"intervention_step": int(value)}}
        case _:
            raise ValueError(f"Parameter: {param} is not a training parameter")


def degrade(clips:list, param:str, value, seed:int) -> tuple:
    """
    Evaluation-time degradation of a corpus.

    Returns:
    - (degraded clips, frame provenance or None)
    """
    match param:
        case "r_a":
            return [add_noise_at_snr(clip, value, seed + i) for i, clip in enumerate(clips)], None
        case "r_v":
            return mix_frames(clips, value, seed)
        case _:
            raise ValueError(f"Parameter: {param} is not a degradation")


@dataclass
class SweepPoint:
    value: object
    reports: list = field(default_factory=list)

    def mean(self, metric:str = "JF") -> float:
        return float(np.mean([getattr(r, metric) for r in self.reports]))


@dataclass
class SweepCurve:
    """
    Attributes:
    - param: swept parameter
    - points: one SweepPoint per value, in the given order
    - default: the default value of the parameter, marked in the text output
    """
    param: str
    points: list
    default: object = None

    def to_text(self) -> str:
        lines = [f"{self.param:<14}{'J':>9}{'F':>9}{'J&F':>9}"]
        for point in self.points:
            marker = " *" if point.value == self.default else ""
            label = ":".join(str(v) for v in point.value) if isinstance(point.value, tuple) else str(point.value)
            lines.append(f"{label:<14}{point.mean('J'):>9.2f}{point.mean('F'):>9.2f}{point.mean('JF'):>9.2f}{marker}")
        return "\n".join(lines)


def sweep(config:ExperimentConfig, param:str, values:list, train_clips:list = None, val_clips:list = None,
          out_dir:str = None, max_steps:int = None) -> SweepCurve:
    """
    J&F as a function of one parameter.

    k_c, alpha_o and s_d retrain one model per value and seed. r_a and r_v
    train one model per seed and evaluate it on degraded validation clips.
    Every value is checked before any training starts.

    Returns:
    - SweepCurve
    """
    values = check_values(config, param, values)
    configs = [override_config(config, value_override(param, v)) for v in values] if param in TRAINED_PARAMS else None

    train_clips = train_clips if train_clips is not None else make_clips(config, "train")
    val_clips = val_clips if val_clips is not None else make_clips(config, "val")
    out_dir = Path(out_dir or config.out_dir) / f"sweep_{param}"
    points = [SweepPoint(value) for value in values]

    for seed in config.seeds:
        if configs is not None:
            for index, (point, value_config) in enumerate(zip(points, configs)):
                seeded = override_config(value_config, {"seed": seed})
                trainer = Trainer(seeded, train_clips, val_clips, out_dir / f"value{index}_seed{seed}")
                trainer.train(max_steps=max_steps, progress=False)
                point.reports.append(evaluate_model(trainer.model, trainer.val_set or trainer.train_set,
                                                    seeded.optim.batch_size, trainer.device))
            continue

        seeded = override_config(config, {"seed": seed})
        trainer = Trainer(seeded, train_clips, val_clips, out_dir / f"seed{seed}")
        trainer.train(max_steps=max_steps, progress=False)
        for point in points:
            degraded, _ = degrade(val_clips, param, point.value, seed)
            dataset = AVClipDataset(degraded, seeded.data.mel, seeded.data.resolution)
            point.reports.append(evaluate_model(trainer.model, dataset, seeded.optim.batch_size, trainer.device))

    for point in points:
        logger.info("%s = %s: J&F %.2f", param, point.value, point.mean())
    return SweepCurve(param, points, DEFAULTS[param])
