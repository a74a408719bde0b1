import math
from dataclasses import dataclass

import torch
import torch.nn.functional as nnf
from torch import nn

from harness.config import CONTRAST_MODES, CONTRAST_PAIRS, ContrastConfig

@dataclass
class GaussianSummary:
    """
    Gaussian description of a sequence in the shared embedding space.
    Leading dimensions index independent summaries.

    Attributes:
    - mean: (..., d) mean vector
    - cov: (..., d, d) symmetric covariance, shrinkage included
    - entropy: (...) differential entropy of N(mean, cov)
    - n: sequence length the summary was computed from
    """
    mean: torch.Tensor
    cov: torch.Tensor
    entropy: torch.Tensor
    n: int = 1

    @classmethod
    def from_moments(cls, mean:torch.Tensor, cov:torch.Tensor, n:int = 1) -> "GaussianSummary":
        return cls(mean=mean, cov=cov, entropy=entropy(cov), n=n)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def unsqueeze(self, dim:int) -> "GaussianSummary":
        return GaussianSummary(self.mean.unsqueeze(dim), self.cov.unsqueeze(dim), self.entropy.unsqueeze(dim), self.n)

    def detach(self) -> "GaussianSummary":
        return GaussianSummary(self.mean.detach(), self.cov.detach(), self.entropy.detach(), self.n)


def entropy(cov:torch.Tensor) -> torch.Tensor:
    """
    H = 1/2 log((2 pi e)^d det cov), with the log-determinant taken from a
    Cholesky factor.

    Raises:
    - ValueError: if cov is not symmetric
    """
    if not torch.allclose(cov, cov.mT, rtol=1e-6, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    d = cov.shape[-1]
    factor = torch.linalg.cholesky(cov)
    logdet = 2 * torch.log(torch.diagonal(factor, dim1=-2, dim2=-1)).sum(dim=-1)
    return 0.5 * (d * math.log(2 * math.pi * math.e) + logdet)


def gaussian_summary(seq:torch.Tensor, eps_reg:float = 1e-4) -> GaussianSummary:
    """
    Mean, biased (1/n) covariance plus eps_reg * I, and entropy of a sequence.

    Parameters:
    - seq: (..., n, d)
    - eps_reg: shrinkage added to the diagonal

    Returns:
    - GaussianSummary over the leading dimensions
    """
    n, d = seq.shape[-2:]
    if n < 1:
        raise ValueError("a summary needs at least one row")
    mean = seq.mean(dim=-2)
    centered = seq - mean.unsqueeze(-2)
    cov = centered.mT @ centered / n
    cov = (cov + cov.mT) / 2 + eps_reg * torch.eye(d, dtype=seq.dtype, device=seq.device)
    return GaussianSummary(mean=mean, cov=cov, entropy=entropy(cov), n=n)


def bures_cross_term(cov_a:torch.Tensor, cov_b:torch.Tensor, floor:float = 0.0) -> torch.Tensor:
    """
    Tr((cov_a cov_b)^{1/2}) as the sum of square roots of the eigenvalues of
    L^T cov_a L, L = chol(cov_b), which is similar to cov_a cov_b.

    Parameters:
    - cov_a, cov_b: (..., d, d) positive definite
    - floor: eigenvalues are clamped from below at this value
    """
    factor = torch.linalg.cholesky(cov_b)
    inner = factor.mT @ cov_a @ factor
    eigenvalues = torch.linalg.eigvalsh((inner + inner.mT) / 2)
    return eigenvalues.clamp_min(floor).sqrt().sum(dim=-1)


def distance(a:GaussianSummary, b:GaussianSummary, gamma:float = 0.0, floor:float = 0.0) -> torch.Tensor:
    """
    Entropy-augmented squared 2-Wasserstein distance between Gaussians:
    |mu_a - mu_b|^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2}) + gamma (H_a + H_b).
    Leading dimensions broadcast.

    Raises:
    - ValueError: on a dimension mismatch
    """
    if a.dim != b.dim:
        raise ValueError(f"summaries live in different spaces: {a.dim} vs {b.dim}")
    mean_term = ((a.mean - b.mean) ** 2).sum(dim=-1)
    trace_a = torch.diagonal(a.cov, dim1=-2, dim2=-1).sum(dim=-1)
    trace_b = torch.diagonal(b.cov, dim1=-2, dim2=-1).sum(dim=-1)
    cross = bures_cross_term(a.cov, b.cov, floor)
    return mean_term + trace_a + trace_b - 2 * cross + gamma * (a.entropy + b.entropy)


def distribution_distance(x:GaussianSummary, y:GaussianSummary, cfg:ContrastConfig) -> torch.Tensor:
    return distance(x, y, cfg.gamma, floor=0.5 * cfg.eps_reg ** 2)


def prototype_distance(x:torch.Tensor, y:torch.Tensor, cfg:ContrastConfig) -> torch.Tensor:
    return ((x - y) ** 2).sum(dim=-1)


def feature_distance(x:torch.Tensor, y:torch.Tensor, cfg:ContrastConfig) -> torch.Tensor:
    """
    Mean cosine distance between rows: row by row when both sequences have
    the same length, against the mean of y otherwise.
    """
    if x.shape[-2] != y.shape[-2]:
        y = y.mean(dim=-2, keepdim=True)
    return (1 - nnf.cosine_similarity(x, y, dim=-1)).mean(dim=-1)


DISTANCES = {
    "distribution": distribution_distance,
    "prototype": prototype_distance,
    "feature": feature_distance,
}


def masked_mean(seq:torch.Tensor, mask:torch.Tensor = None) -> torch.Tensor:
    """
    Mean of the rows of seq (..., n, d) selected by mask (..., n). Sequences
    with no selected row fall back to the plain mean.
    """
    if mask is None:
        return seq.mean(dim=-2)
    weights = mask.to(seq.dtype)
    weights = torch.where(weights.sum(dim=-1, keepdim=True) > 0, weights, torch.ones_like(weights))
    return (seq * weights.unsqueeze(-1)).sum(dim=-2) / weights.sum(dim=-1, keepdim=True)


def represent(seq:torch.Tensor, mode:str, cfg:ContrastConfig, mask:torch.Tensor = None):
    """
    Put an embedded sequence (..., n, d) in the form the contrast mode compares.
    The optional row mask (..., n) only shapes the prototype.
    """
    match mode:
        case "distribution":
            return gaussian_summary(seq, cfg.eps_reg)
        case "prototype":
            return masked_mean(seq, mask)
        case "feature":
            return seq
        case _:
            raise ValueError(f"Contrast mode: {mode} not yet implemented")


def partition_by_audio_anchor(audio_text:torch.Tensor, threshold:float = 0.85) -> torch.Tensor:
    """
    Positive sets from audio-text cosine: j is a positive of i iff
    cos(a_i, a_j) >= threshold. Every item is its own positive.

    Parameters:
    - audio_text: (B, d)

    Returns:
    - (B, B) bool, True for positives; negatives are the complement
    """
    if audio_text.shape[0] < 2:
        raise ValueError(f"partitioning needs a batch of at least 2, got {audio_text.shape[0]}")
    unit = nnf.normalize(audio_text, dim=-1)
    positives = unit @ unit.T >= threshold
    return positives | torch.eye(audio_text.shape[0], dtype=torch.bool, device=audio_text.device)


def counterfactual_weights(alphas:torch.Tensor) -> torch.Tensor:
    """
    w_k = sqrt(1 - alpha_k) / sum_j sqrt(1 - alpha_j) along the last axis.

    Raises:
    - ValueError: if every alpha of a row equals 1
    """
    roots = (1 - alphas).clamp_min(0).sqrt()
    total = roots.sum(dim=-1, keepdim=True)
    if (total == 0).any():
        raise ValueError("counterfactual weights are undefined when every alpha equals 1")
    return roots / total


def contrast_from_distances(positive:torch.Tensor, negative:torch.Tensor, tau:float, positive_mask:torch.Tensor = None,
                            negative_mask:torch.Tensor = None, negative_weights:torch.Tensor = None) -> torch.Tensor:
    """
    -1/B sum_i log [sum_P D' / (sum_P D' + sum_N w D')] with D' = exp(-D / tau),
    evaluated in log space.

    Parameters:
    - positive: (B, P) distances to positives
    - negative: (B, N) distances to negatives
    - tau: kernel temperature
    - positive_mask, negative_mask: optional bool masks of the same shapes
    - negative_weights: optional (B, N) weights of the negatives
    """
    log_pos = -positive / tau
    log_neg = -negative / tau
    if negative_weights is not None:
        log_neg = log_neg + torch.log(negative_weights)
    if positive_mask is not None:
        log_pos = log_pos.masked_fill(~positive_mask, -math.inf)
    if negative_mask is not None:
        log_neg = log_neg.masked_fill(~negative_mask, -math.inf)

    numerator = torch.logsumexp(log_pos, dim=-1)
    denominator = torch.logsumexp(torch.cat([log_pos, log_neg], dim=-1), dim=-1)
    return -(numerator - denominator).mean()


def loss_v_a(visual, audio, positives:torch.Tensor, cfg:ContrastConfig, distance_fn=distribution_distance) -> torch.Tensor:
    """
    Visual-audio contrast over the batch, positives and negatives from the audio anchor partition.

    Parameters:
    - visual, audio: B representations (GaussianSummary by default)
    - positives: (B, B) bool from partition_by_audio_anchor
    - cfg: ContrastConfig
    - distance_fn: distance over broadcast representations
    """
    distances = distance_fn(visual.unsqueeze(1), audio.unsqueeze(0), cfg)
    return contrast_from_distances(distances, distances, cfg.temperature, positives, ~positives)


def loss_modality_text(modality, text, pool, alphas:torch.Tensor, cfg:ContrastConfig, distance_fn=distribution_distance) -> torch.Tensor:
    """
    Modality-text contrast: the factual text of an item is its only positive,
    that item's counterfactual pool its only negatives, weighted by w_k.

    Parameters:
    - modality: B representations
    - text: B representations of z
    - pool: (B, K) representations of the counterfactual texts
    - alphas: (B, K) mixing coefficients of the pool entries
    - cfg: ContrastConfig
    - distance_fn: distance over broadcast representations
    """
    positive = distance_fn(modality, text, cfg).unsqueeze(-1)
    negative = distance_fn(modality.unsqueeze(1), pool, cfg)
    weights = counterfactual_weights(alphas)
    return contrast_from_distances(positive, negative, cfg.temperature, negative_weights=weights)


def loss_v_l(visual, text, pool, alphas:torch.Tensor, cfg:ContrastConfig, distance_fn=distribution_distance) -> torch.Tensor:
    return loss_modality_text(visual, text, pool, alphas, cfg, distance_fn)


def loss_a_l(audio, text, pool, alphas:torch.Tensor, cfg:ContrastConfig, distance_fn=distribution_distance) -> torch.Tensor:
    return loss_modality_text(audio, text, pool, alphas, cfg, distance_fn)


def _index(representation, index):
    if isinstance(representation, GaussianSummary):
        return GaussianSummary(representation.mean[index], representation.cov[index], representation.entropy[index], representation.n)
    return representation[index]


class TriModalContrast(nn.Module):
    """
    Projects visual, audio and text sequences to one embedding space and
    computes the enabled contrast pairs.

    Attributes:
    - visual_head, audio_head, text_head: linear maps to the shared space
    - config: ContrastConfig
    """
    def __init__(self, visual_dim:int, audio_dim:int, text_dim:int, config:ContrastConfig):
        super().__init__()
        self.config = config
        self.visual_head = nn.Linear(visual_dim, config.embed_dim)
        self.audio_head = nn.Linear(audio_dim, config.embed_dim)
        self.text_head = nn.Linear(text_dim, config.embed_dim)

    def embed(self, visual:torch.Tensor, audio:torch.Tensor, text:torch.Tensor = None) -> tuple:
        return self.visual_head(visual), self.audio_head(audio), None if text is None else self.text_head(text)

    def forward(self, visual:torch.Tensor, audio:torch.Tensor, z:torch.Tensor = None, audio_text:torch.Tensor = None,
                pool:torch.Tensor = None, alphas:torch.Tensor = None, pairs:tuple = CONTRAST_PAIRS,
                mode:str = "distribution", visual_mask:torch.Tensor = None) -> dict:
        """
        Parameters:
        - visual: (B, T, C_p) pooled visual descriptors
        - audio: (B, T, D) audio embeddings
        - z: (B, L, d_t) composite texts, needed by v_l and a_l
        - audio_text: (B, d_t) anchor of the positive partition; audio embeddings are used without it
        - pool: (B, K, L, d_t) counterfactual texts; without a pool the other items' texts are the negatives
        - alphas: (B, K) pool coefficients
        - pairs: enabled pairs among v_a, v_l, a_l
        - mode: distribution, prototype or feature
        - visual_mask: optional (B, T) frames the visual prototype is averaged over

        Returns:
        - dict pair -> loss
        """
        if mode not in CONTRAST_MODES:
            raise ValueError(f"Contrast mode: {mode} not yet implemented")
        cfg = self.config
        distance_fn = DISTANCES[mode]
        v_seq, a_seq, t_seq = self.embed(visual, audio, z)
        v, a = represent(v_seq, mode, cfg, visual_mask), represent(a_seq, mode, cfg)

        losses = {}
        if "v_a" in pairs:
            anchor = audio_text if audio_text is not None else audio.mean(dim=1)
            losses["v_a"] = loss_v_a(v, a, partition_by_audio_anchor(anchor, cfg.positive_threshold), cfg, distance_fn)

        text_pairs = [p for p in ("v_l", "a_l") if p in pairs]
        if text_pairs and z is not None:
            text = represent(t_seq, mode, cfg)
            if pool is not None:
                negatives = represent(self.text_head(pool), mode, cfg)
            else:
                # Row i holds every item but i, each weighted 1 / (B - 1)
                B = z.shape[0]
                others = torch.arange(B, device=z.device).repeat(B, 1)[~torch.eye(B, dtype=torch.bool, device=z.device)]
                negatives = _index(text, others.reshape(B, B - 1))
                alphas = torch.zeros(B, B - 1, dtype=z.dtype, device=z.device)
            for pair in text_pairs:
                anchor = v if pair == "v_l" else a
                losses[pair] = loss_modality_text(anchor, text, negatives, alphas, cfg, distance_fn)
        return losses
