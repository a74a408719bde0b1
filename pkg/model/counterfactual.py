import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as nnf
from torch import nn

from harness.errors import NumericalError

logger = logging.getLogger(__name__)


def _randn(shape, generator:torch.Generator = None, like:torch.Tensor = None) -> torch.Tensor:
    noise = torch.randn(shape, generator=generator, dtype=like.dtype if like is not None else torch.float32)
    return noise.to(like.device) if like is not None else noise


class DiffusionSchedule:
    """
    Linear variance schedule of the forward diffusion.

    Attributes:
    - num_steps: number of diffusion steps
    - betas: (num_steps + 1,) float64, betas[t] is beta_t and betas[0] = 0
    - alpha_bar: (num_steps + 1,) float64, cumulative products with alpha_bar[0] = 1
    """
    def __init__(self, num_steps:int = 1000, beta_start:float = 1e-4, beta_end:float = 2e-2):
        if num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {num_steps}")
        if not 0 < beta_start <= beta_end < 1:
            raise ValueError(f"betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")

        self.num_steps = num_steps
        betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
        self.betas = torch.cat([torch.zeros(1, dtype=torch.float64), betas])
        self.alpha_bar = torch.cumprod(1 - self.betas, dim=0)

    def check_step(self, t):
        t = torch.as_tensor(t)
        if (t < 0).any() or (t > self.num_steps).any():
            raise ValueError(f"diffusion step must be in [0, {self.num_steps}], got {t.tolist()}")

    def gather(self, values:torch.Tensor, t, like:torch.Tensor) -> torch.Tensor:
        """
        values[t] shaped to broadcast against like (t scalar or one per batch item).
        """
        t = torch.as_tensor(t, dtype=torch.long)
        out = values[t].to(dtype=like.dtype, device=like.device)
        return out.reshape(-1, *([1] * (like.ndim - 1))) if out.ndim else out


def forward_diffuse(z:torch.Tensor, t, schedule:DiffusionSchedule, generator:torch.Generator = None, eps:torch.Tensor = None) -> tuple:
    """
    Sample the closed-form forward marginal z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps.

    Parameters:
    - z: (B, ...) clean latents
    - t: int or (B,) steps in [0, num_steps]
    - schedule: DiffusionSchedule
    - generator: torch Generator for eps
    - eps: optional noise, drawn when not given

    Returns:
    - (z_t, eps)

    Raises:
    - ValueError: on a step out of range
    """
    schedule.check_step(t)
    if eps is None:
        eps = _randn(z.shape, generator, z)
    alpha_bar = schedule.gather(schedule.alpha_bar, t, z)
    return alpha_bar.sqrt() * z + (1 - alpha_bar).sqrt() * eps, eps


def orthogonalize(z:torch.Tensor, r:torch.Tensor, generator:torch.Generator = None, max_retries:int = 8) -> torch.Tensor:
    """
    Gram-Schmidt step along the last axis: remove from r its component along
    z / |z| and normalize the residual.

    Parameters:
    - z: (..., d) reference vectors, nonzero
    - r: (..., d) random directions
    - generator: used to redraw r where it is parallel to z
    - max_retries: redraws before giving up

    Returns:
    - (..., d) unit vectors orthogonal to z

    Raises:
    - ValueError: on a zero-norm z
    - NumericalError: if r stays parallel to z after every retry
    """
    z_norm = z.norm(dim=-1, keepdim=True)
    if (z_norm == 0).any():
        raise ValueError("cannot orthogonalize against a zero vector")
    z_hat = z / z_norm

    for _ in range(max_retries + 1):
        residual = r - (r * z_hat).sum(dim=-1, keepdim=True) * z_hat
        norm = residual.norm(dim=-1, keepdim=True)
        degenerate = norm < 1e-12
        if not degenerate.any():
            return residual / norm
        r = torch.where(degenerate, _randn(r.shape, generator, r), r)
    raise NumericalError(f"random direction stayed parallel to z after {max_retries} retries")


def mix_counterfactual(z_t:torch.Tensor, r_perp:torch.Tensor, coefficient) -> torch.Tensor:
    """
    z' = sqrt(1 - c) z_t + sqrt(c) r_perp with c = alpha * m (per sample) or
    alpha * s (per token), broadcast against z_t.

    Raises:
    - ValueError: if any c lies outside [0, 1]
    """
    coefficient = torch.as_tensor(coefficient, dtype=z_t.dtype, device=z_t.device)
    if (coefficient < 0).any() or (coefficient > 1).any():
        raise ValueError(f"mixing coefficient must be in [0, 1], got {coefficient.min().item()}..{coefficient.max().item()}")
    return (1 - coefficient).sqrt() * z_t + coefficient.sqrt() * r_perp


def counterfactual_direction(z:torch.Tensor, per_token:bool, generator:torch.Generator = None) -> torch.Tensor:
    """
    Random direction orthogonal to z, scaled to the norm of z.

    Orthogonal to each token when per_token, to the whole flattened sequence otherwise.

    Parameters:
    - z: (B, L, d)

    Returns:
    - (B, L, d)
    """
    r = _randn(z.shape, generator, z)
    if per_token:
        return orthogonalize(z, r, generator) * z.norm(dim=-1, keepdim=True)
    flat = z.reshape(z.shape[0], -1)
    direction = orthogonalize(flat, r.reshape(flat.shape), generator) * flat.norm(dim=-1, keepdim=True)
    return direction.reshape(z.shape)


def timestep_embedding(t:torch.Tensor, dim:int) -> torch.Tensor:
    half = dim // 2
    frequencies = torch.exp(-math.log(10000) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    angles = t.float().unsqueeze(-1) * frequencies
    return torch.cat([angles.sin(), angles.cos()], dim=-1)


class ResidualBlock(nn.Module):
    def __init__(self, hidden:int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden)
        self.net = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, x:torch.Tensor, embedding:torch.Tensor) -> torch.Tensor:
        return x + self.net(self.norm(x + embedding))


class Denoiser(nn.Module):
    """
    Noise predictor over a flattened token sequence, conditioned on the
    diffusion step (sinusoidal embedding) and on a pooled visual descriptor
    (additive embedding).

    Attributes:
    - num_tokens, dim: shape of one sequence
    - blocks: residual blocks
    """
    def __init__(self, num_tokens:int, dim:int, cond_dim:int, hidden:int = 256, blocks:int = 4):
        super().__init__()
        self.num_tokens = num_tokens
        self.dim = dim
        self.hidden = hidden
        self.input = nn.Linear(num_tokens * dim, hidden)
        self.time = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.condition = nn.Linear(cond_dim, hidden)
        self.blocks = nn.ModuleList([ResidualBlock(hidden) for _ in range(blocks)])
        self.output = nn.Linear(hidden, num_tokens * dim)

    def forward(self, x:torch.Tensor, t, cond:torch.Tensor) -> torch.Tensor:
        """
        Parameters:
        - x: (B, L, d) noisy sequences
        - t: int or (B,) steps
        - cond: (B, cond_dim)

        Returns:
        - (B, L, d) predicted noise
        """
        B = x.shape[0]
        t = torch.as_tensor(t, device=x.device).expand(B) if torch.as_tensor(t).ndim == 0 else torch.as_tensor(t, device=x.device)
        embedding = self.time(timestep_embedding(t, self.hidden)) + self.condition(cond)
        h = self.input(x.reshape(B, -1))
        for block in self.blocks:
            h = block(h, embedding)
        return self.output(h).reshape(x.shape)


def denoise(z_t:torch.Tensor, t:int, cond:torch.Tensor, model, schedule:DiffusionSchedule, generator:torch.Generator = None) -> torch.Tensor:
    """
    Run the reverse chain from step t down to 0 with fixed variance beta_t.

    Parameters:
    - z_t: (B, L, d) latents at step t
    - t: starting step, 0 returns z_t unchanged
    - cond: visual condition passed to the model
    - model: noise predictor model(x, t, cond)
    - schedule: DiffusionSchedule
    - generator: torch Generator for the step noise

    Returns:
    - (B, L, d)

    Raises:
    - NumericalError: on a non-finite intermediate, with the step index
    """
    schedule.check_step(t)
    x = z_t
    for step in range(int(t), 0, -1):
        beta = schedule.betas[step].item()
        alpha_bar = schedule.alpha_bar[step].item()
        eps = model(x, step, cond)
        x = (x - beta / math.sqrt(1 - alpha_bar) * eps) / math.sqrt(1 - beta)
        if step > 1:
            x = x + math.sqrt(beta) * _randn(x.shape, generator, x)
        if not torch.isfinite(x).all():
            raise NumericalError("reverse diffusion produced non-finite values", step=step)
    return x


def ortho_loss(z_prime:torch.Tensor, z_t:torch.Tensor, lambda_z:float) -> torch.Tensor:
    """
    |z' - z_t|^2 + lambda_z (z' . z_t)^2 per sequence, averaged over the batch.

    Every axis after the first belongs to one sequence; a 1-D input is a single sequence.
    """
    if z_prime.shape != z_t.shape:
        raise ValueError(f"shape mismatch {tuple(z_prime.shape)} vs {tuple(z_t.shape)}")
    if z_prime.ndim == 1:
        z_prime, z_t = z_prime.unsqueeze(0), z_t.unsqueeze(0)
    z_prime, z_t = z_prime.flatten(1), z_t.flatten(1)
    distance = ((z_prime - z_t) ** 2).sum(dim=-1)
    dot = (z_prime * z_t).sum(dim=-1)
    return (distance + lambda_z * dot ** 2).mean()


@dataclass
class CounterfactualLoss:
    """
    Attributes:
    - total: noise term + lambda_ortho * ortho term
    - noise: mean over tokens of |eps - eps_theta|^2
    - ortho: L_ortho between the mixed and the corrupted sequences
    - z_t, z_prime: corrupted and mixed latents at the intervention step
    """
    total: torch.Tensor
    noise: torch.Tensor
    ortho: torch.Tensor
    z_t: torch.Tensor
    z_prime: torch.Tensor


def cf_loss(z:torch.Tensor, cond:torch.Tensor, model, schedule:DiffusionSchedule, intervention_step:int, coefficient,
            lambda_z:float = 0.5, lambda_ortho:float = 1.0, per_token:bool = False, normalize_ortho:bool = False,
            eps:torch.Tensor = None, direction:torch.Tensor = None, generator:torch.Generator = None) -> CounterfactualLoss:
    """
    Counterfactual diffusion loss.

    z is corrupted to the intervention step s^d, mixed with an orthogonal
    direction there, and the model predicts the noise that produced z_t from
    the mixed latent. The same eps enters the corruption and the target.

    Parameters:
    - z: (B, L, d) composite factual texts
    - cond: (B, cond_dim) visual condition
    - model: noise predictor model(x, t, cond)
    - schedule: DiffusionSchedule
    - intervention_step: s^d, the only step at which mixing happens
    - coefficient: effective alpha * c, broadcastable to (B, L, 1)
    - lambda_z, lambda_ortho: weights of L_ortho
    - per_token: orthogonalize each token instead of the whole sequence
    - normalize_ortho: divide both sequences by |z_t| before L_ortho
    - eps, direction: optional fixed noise and norm-matched orthogonal direction
    - generator: torch Generator for whatever is drawn

    Returns:
    - CounterfactualLoss

    Raises:
    - ValueError: if s^d is not in [1, num_steps)
    """
    if not 1 <= intervention_step < schedule.num_steps:
        raise ValueError(f"intervention step must be in [1, {schedule.num_steps}), got {intervention_step}")

    z_t, eps = forward_diffuse(z, intervention_step, schedule, generator, eps)
    if direction is None:
        direction = counterfactual_direction(z_t, per_token, generator)

    z_prime = mix_counterfactual(z_t, direction, coefficient)
    noise = ((eps - model(z_prime, intervention_step, cond)) ** 2).sum(dim=-1).mean()

    if normalize_ortho:
        scale = z_t.flatten(1).norm(dim=-1).clamp_min(1e-12).reshape(-1, *([1] * (z.ndim - 1)))
        ortho = ortho_loss(z_prime / scale, z_t / scale, lambda_z)
    else:
        ortho = ortho_loss(z_prime, z_t, lambda_z)
    return CounterfactualLoss(total=noise + lambda_ortho * ortho, noise=noise, ortho=ortho, z_t=z_t, z_prime=z_prime)


class CoefficientHead(nn.Module):
    """
    Bounded learnable coefficient: (lo + (hi - lo) * sigmoid(Wx + b)) / alpha, so
    alpha times the output stays in [lo, hi). W starts at zero and b at the
    logit of a uniformly drawn point, so the head starts at a random point of
    the interval.
    """
    def __init__(self, in_dim:int, ortho_range:tuple, alpha:float, generator:torch.Generator = None):
        super().__init__()
        self.lo, self.hi = ortho_range
        self.alpha = alpha
        self.linear = nn.Linear(in_dim, 1)
        start = 0.05 + 0.9 * torch.rand(1, generator=generator)
        nn.init.zeros_(self.linear.weight)
        with torch.no_grad():
            self.linear.bias.copy_(torch.logit(start))

    def forward(self, x:torch.Tensor) -> torch.Tensor:
        return (self.lo + (self.hi - self.lo) * torch.sigmoid(self.linear(x))) / self.alpha


@dataclass
class CounterfactualPool:
    """
    Attributes:
    - texts: (..., k, L, d) counterfactual texts, most similar first
    - similarities: (..., k) cosine to the factual text, descending
    - indices: (..., k) candidate indices
    - alphas: (..., k) effective mixing coefficients
    """
    texts: torch.Tensor
    similarities: torch.Tensor
    indices: torch.Tensor
    alphas: torch.Tensor


def select_topk(candidates:torch.Tensor, z:torch.Tensor, k:int, alphas:torch.Tensor = None, seq_dims:int = 1) -> CounterfactualPool:
    """
    Keep the k candidates most similar to z (cosine over the flattened
    sequence), ties broken by candidate index.

    Parameters:
    - candidates: (..., N, *seq)
    - z: (..., *seq)
    - k: pool size
    - alphas: optional (..., N) coefficients the candidates were made with
    - seq_dims: number of trailing axes forming one sequence

    Raises:
    - ValueError: with fewer than k candidates
    """
    batch_dims = z.ndim - seq_dims
    N = candidates.shape[batch_dims]
    if k < 1 or N < k:
        raise ValueError(f"need at least k={k} candidates, got {N}")

    flat = candidates.flatten(batch_dims + 1)
    similarities = nnf.cosine_similarity(flat, z.flatten(batch_dims).unsqueeze(-2), dim=-1)
    order = torch.sort(-similarities, dim=-1, stable=True).indices[..., :k]

    gather_seq = order.reshape(*order.shape, *([1] * seq_dims)).expand(*order.shape, *candidates.shape[batch_dims + 1:])
    if alphas is None:
        alphas = torch.zeros(similarities.shape, dtype=similarities.dtype, device=similarities.device)
    return CounterfactualPool(
        texts=torch.gather(candidates, batch_dims, gather_seq),
        similarities=torch.gather(similarities, -1, order),
        indices=order,
        alphas=torch.gather(alphas, -1, order),
    )


def generate_pool(z:torch.Tensor, cond:torch.Tensor, coefficient:torch.Tensor, model, schedule:DiffusionSchedule,
                  intervention_step:int, pool_size:int, candidate_factor:int = 4, per_token:bool = False,
                  space:str = "continuous", generator:torch.Generator = None) -> CounterfactualPool:
    """
    Draw candidate_factor * pool_size counterfactuals per clip and keep the Top-K.

    In the continuous space each candidate is z diffused to s^d, mixed with an
    orthogonal direction there and denoised back to step 0. In the feature
    space the clean z is mixed directly.

    Parameters:
    - z: (B, L, d)
    - cond: (B, cond_dim)
    - coefficient: (B, 1 or L, 1) effective alpha * c
    - model: noise predictor
    - schedule: DiffusionSchedule
    - intervention_step: s^d, strictly below num_steps
    - pool_size: k^c
    - candidate_factor: candidates per kept entry
    - per_token: orthogonalize per token
    - space: continuous or feature
    - generator: torch Generator

    Returns:
    - CounterfactualPool with (B, k^c, L, d) texts
    """
    if not 1 <= intervention_step < schedule.num_steps:
        raise ValueError(f"intervention step must be in [1, {schedule.num_steps}), got {intervention_step}")

    B, L, d = z.shape
    n = candidate_factor * pool_size
    repeated = z.unsqueeze(1).expand(B, n, L, d).reshape(B * n, L, d)
    coefficient = coefficient.unsqueeze(1).expand(B, n, *coefficient.shape[1:]).reshape(B * n, *coefficient.shape[1:])

    match space:
        case "continuous":
            z_t, _ = forward_diffuse(repeated, intervention_step, schedule, generator)
            mixed = mix_counterfactual(z_t, counterfactual_direction(z_t, per_token, generator), coefficient)
            cond = cond.unsqueeze(1).expand(B, n, cond.shape[-1]).reshape(B * n, -1)
            candidates = denoise(mixed, intervention_step, cond, model, schedule, generator)
        case "feature":
            candidates = mix_counterfactual(repeated, counterfactual_direction(repeated, per_token, generator), coefficient)
        case _:
            raise ValueError(f"Space: {space} not yet implemented")

    alphas = coefficient.reshape(B * n, -1).mean(dim=-1).reshape(B, n)
    return select_topk(candidates.reshape(B, n, L, d), z, pool_size, alphas, seq_dims=2)


class PoolCache:
    """
    Counterfactual pools kept per clip index between regenerations.

    Attributes:
    - refresh_epochs: age in epochs at which a pool is regenerated
    - entries: clip index -> (texts, alphas, epoch), tensors on the CPU
    """
    def __init__(self, refresh_epochs:int = 1):
        self.refresh_epochs = refresh_epochs
        self.entries = {}

    def is_stale(self, indices:list, epoch:int) -> bool:
        return any(i not in self.entries or epoch - self.entries[i][2] >= self.refresh_epochs for i in indices)

    def put(self, indices:list, pool:CounterfactualPool, epoch:int):
        for row, i in enumerate(indices):
            self.entries[int(i)] = (pool.texts[row].detach().cpu(), pool.alphas[row].detach().cpu(), epoch)

    def get(self, indices:list, device=None) -> tuple:
        """
        Returns:
        - (texts (B, k, L, d), alphas (B, k))
        """
        texts = torch.stack([self.entries[int(i)][0] for i in indices]).to(device)
        alphas = torch.stack([self.entries[int(i)][1] for i in indices]).to(device)
        return texts, alphas

    def state_dict(self) -> dict:
        return {"refresh_epochs": self.refresh_epochs, "entries": dict(self.entries)}

    def load_state_dict(self, state:dict):
        self.refresh_epochs = state["refresh_epochs"]
        self.entries = dict(state["entries"])
