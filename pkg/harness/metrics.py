import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from harness.config import MelConfig
from model.encoders import mel_frontend

logger = logging.getLogger(__name__)

BETA2 = 0.3

def _as_bool(mask) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def _check_shapes(pred:np.ndarray, gt:np.ndarray):
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")


def jaccard(pred_mask, gt_mask) -> float:
    """
    100 * |pred & gt| / |pred | gt|, 100 when both masks are empty.
    """
    pred, gt = _as_bool(pred_mask), _as_bool(gt_mask)
    _check_shapes(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 100.0
    return 100.0 * np.logical_and(pred, gt).sum() / union


def fscore(pred_mask, gt_mask, beta2:float = BETA2) -> float:
    """
    100 * (1 + b2) P R / (b2 P + R), 100 when both masks are empty.
    """
    pred, gt = _as_bool(pred_mask), _as_bool(gt_mask)
    _check_shapes(pred, gt)
    return _fscore_counts(np.logical_and(pred, gt).sum(), pred.sum(), gt.sum(), beta2)


def _fscore_counts(tp:int, n_pred:int, n_gt:int, beta2:float) -> float:
    if n_pred == 0 and n_gt == 0:
        return 100.0
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_gt
    return 100.0 * (1 + beta2) * precision * recall / (beta2 * precision + recall)


def clip_scores(pred:np.ndarray, gt:np.ndarray, beta2:float = BETA2) -> tuple:
    """
    Mean per-frame J and F of a binary clip.

    Parameters:
    - pred, gt: (T, H, W) masks

    Returns:
    - (J, F)
    """
    pred, gt = _as_bool(pred), _as_bool(gt)
    _check_shapes(pred, gt)
    J = float(np.mean([jaccard(p, g) for p, g in zip(pred, gt)]))
    F = float(np.mean([fscore(p, g, beta2) for p, g in zip(pred, gt)]))
    return J, F


def class_counts(pred:np.ndarray, gt:np.ndarray, num_classes:int) -> np.ndarray:
    """
    Per-class (intersection, predicted, ground truth) pixel counts of label maps.

    Returns:
    - int array (num_classes, 3)
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_shapes(pred, gt)
    counts = np.zeros((num_classes, 3), dtype=np.int64)
    for k in range(num_classes):
        p, g = pred == k, gt == k
        counts[k] = (np.logical_and(p, g).sum(), p.sum(), g.sum())
    return counts


def semantic_scores(counts:np.ndarray, beta2:float = BETA2) -> dict:
    """
    Per-class J and F over the foreground classes present in the ground truth.

    Parameters:
    - counts: (num_classes, 3) from class_counts, possibly summed over clips

    Returns:
    - dict class -> (J, F)
    """
    scores = {}
    for k in range(1, counts.shape[0]):
        intersection, n_pred, n_gt = (int(v) for v in counts[k])
        if n_gt == 0:
            continue
        union = n_pred + n_gt - intersection
        scores[k] = (100.0 * intersection / union, _fscore_counts(intersection, n_pred, n_gt, beta2))
    return scores


@dataclass
class EvalReport:
    """
    Segmentation quality of a set of clips.

    Attributes:
    - J, F, JF: summary scores in [0, 100], JF = (J + F) / 2
    - per_clip: list of (clip_id, J, F, JF)
    - per_class: class -> (J, F), semantic mode only
    """
    J: float
    F: float
    JF: float
    per_clip: list = field(default_factory=list)
    per_class: dict = field(default_factory=dict)

    def to_text(self, path:str) -> Path:
        """
        Write the report as tab-separated text: a clip_id/J/F/JF header, one
        row per clip, then a "# summary" block.
        """
        lines = ["clip_id\tJ\tF\tJF"]
        lines += [f"{clip_id}\t{J:.4f}\t{F:.4f}\t{JF:.4f}" for clip_id, J, F, JF in self.per_clip]
        lines += ["# summary", f"J\t{self.J:.4f}", f"F\t{self.F:.4f}", f"JF\t{self.JF:.4f}"]
        lines += [f"class_{k}\t{J:.4f}\t{F:.4f}" for k, (J, F) in sorted(self.per_class.items())]
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
        return path

    def summary(self) -> str:
        return f"J {self.J:.2f} | F {self.F:.2f} | J&F {self.JF:.2f}"


def build_report(predictions:list, ground_truths:list, clip_ids:list, semantic:bool = False,
                 num_classes:int = None, beta2:float = BETA2) -> EvalReport:
    """
    Aggregate per-clip scores by unweighted mean. In semantic mode the
    summary J and F average the per-class scores of the accumulated counts.

    Parameters:
    - predictions, ground_truths: lists of (T, H, W) masks or label maps
    - clip_ids: names of the clips
    - semantic: label maps instead of binary masks
    - num_classes: number of labels, background included (semantic mode)
    - beta2: F-score beta squared
    """
    if not predictions:
        raise ValueError("no predictions to evaluate")
    if not len(predictions) == len(ground_truths) == len(clip_ids):
        raise ValueError("predictions, ground truths and clip ids differ in length")

    per_clip = []
    if semantic:
        total = np.zeros((num_classes, 3), dtype=np.int64)
        for pred, gt, clip_id in zip(predictions, ground_truths, clip_ids):
            counts = class_counts(pred, gt, num_classes)
            total += counts
            scores = semantic_scores(counts, beta2)
            J = float(np.mean([s[0] for s in scores.values()])) if scores else jaccard(np.asarray(pred) > 0, np.asarray(gt) > 0)
            F = float(np.mean([s[1] for s in scores.values()])) if scores else fscore(np.asarray(pred) > 0, np.asarray(gt) > 0, beta2)
            per_clip.append((clip_id, J, F, (J + F) / 2))
        per_class = semantic_scores(total, beta2)
        if per_class:
            J = float(np.mean([s[0] for s in per_class.values()]))
            F = float(np.mean([s[1] for s in per_class.values()]))
        else:
            J = float(np.mean([row[1] for row in per_clip]))
            F = float(np.mean([row[2] for row in per_clip]))
        return EvalReport(J=J, F=F, JF=(J + F) / 2, per_clip=per_clip, per_class=per_class)

    for pred, gt, clip_id in zip(predictions, ground_truths, clip_ids):
        J, F = clip_scores(pred, gt, beta2)
        per_clip.append((clip_id, J, F, (J + F) / 2))
    J = float(np.mean([row[1] for row in per_clip]))
    F = float(np.mean([row[2] for row in per_clip]))
    return EvalReport(J=J, F=F, JF=(J + F) / 2, per_clip=per_clip)


class Quadrant(Enum):
    """
    Defines the visual (x) / audio (y) complexity quadrants of a corpus.
    """
    BOTTOM_LEFT = "bottom-left"
    BOTTOM_RIGHT = "bottom-right"
    TOP_LEFT = "top-left"
    TOP_RIGHT = "top-right"

    @classmethod
    def of(cls, visual_high:bool, audio_high:bool) -> "Quadrant":
        match (visual_high, audio_high):
            case (False, False):
                return cls.BOTTOM_LEFT
            case (True, False):
                return cls.BOTTOM_RIGHT
            case (False, True):
                return cls.TOP_LEFT
            case _:
                return cls.TOP_RIGHT


@dataclass
class ComplexityRow:
    clip_id: str
    visual_mse: float
    audio_melchange: float
    quadrant: Quadrant


def visual_change(frames:np.ndarray) -> float:
    """
    Mean pixel MSE between consecutive frames, pixels scaled to [0, 1].
    """
    frames = np.asarray(frames, dtype=np.float64) / 255.0
    if frames.shape[0] < 2:
        raise ValueError("visual change needs at least two frames")
    return float(np.mean((frames[1:] - frames[:-1]) ** 2))


def audio_change(waveform:np.ndarray, sample_rate:int, num_frames:int, mel_config:MelConfig) -> float:
    """
    Mean L2 distance between the log-Mel profiles of consecutive frames
    (each frame's Mel windows averaged over time).
    """
    if num_frames < 2:
        raise ValueError("audio change needs at least two frames")
    profiles = mel_frontend(waveform, sample_rate, num_frames, mel_config).double().mean(dim=1).numpy()
    return float(np.mean(np.linalg.norm(profiles[1:] - profiles[:-1], axis=-1)))


def corpus_complexity(clips:list, mel_config:MelConfig = None) -> list:
    """
    Visual and audio change of every clip, and its quadrant relative to the
    corpus medians (a clip is high on an axis when strictly above the median).

    Parameters:
    - clips: list of RawClip with at least two frames
    - mel_config: MelConfig of the audio frontend

    Returns:
    - list of ComplexityRow

    Raises:
    - ValueError: if a clip has a single frame
    """
    mel_config = mel_config or MelConfig()
    values = []
    for clip in clips:
        if clip.num_frames < 2:
            raise ValueError(f"clip {clip.clip_id} has a single frame, complexity needs consecutive pairs")
        values.append((visual_change(clip.frames), audio_change(clip.waveform, clip.sample_rate, clip.num_frames, mel_config)))

    values = np.asarray(values, dtype=np.float64).reshape(-1, 2)
    medians = np.median(values, axis=0) if len(values) else np.zeros(2)
    rows = [
        ComplexityRow(clip.clip_id, float(v), float(a), Quadrant.of(bool(v > medians[0]), bool(a > medians[1])))
        for clip, (v, a) in zip(clips, values)
    ]
    logger.info("Complexity medians: visual %.6f, audio %.4f", *medians)
    return rows


def quadrant_counts(rows:list) -> dict:
    counts = {quadrant: 0 for quadrant in Quadrant}
    for row in rows:
        counts[row.quadrant] += 1
    return counts
