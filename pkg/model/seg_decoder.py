from dataclasses import dataclass

import torch
import torch.nn.functional as nnf
from torch import nn

from harness.config import LossWeights
from model.encoders import VisualFeatureStack

@dataclass
class MaskPrediction:
    """
    Attributes:
    - logits: (B, T, H, W) in binary mode, (B, T, K_cls, H, W) in semantic mode
    - queries: (B*T, N_q, d_q) decoded query embeddings
    """
    logits: torch.Tensor
    queries: torch.Tensor

    @property
    def semantic(self) -> bool:
        return self.logits.ndim == 5

    def masks(self) -> torch.Tensor:
        """
        Hard predictions: logits > 0 in binary mode, argmax over classes in semantic mode.
        """
        if self.semantic:
            return self.logits.argmax(dim=2)
        return (self.logits > 0).long()


class MLP(nn.Module):
    def __init__(self, input_dim:int, hidden_dim:int, output_dim:int, num_layers:int):
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(n, k) for n, k in zip(dims, dims[1:] + [output_dim]))

    def forward(self, x:torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = nnf.relu(layer(x)) if i < len(self.layers) - 1 else layer(x)
        return x


class QueryDecoder(nn.Module):
    """
    Learnable queries cross-attend to audio-conditioned visual features; each
    query embedding dotted with the per-pixel embedding gives one mask, and
    the masks are fused by a softmax over queries (per class in semantic mode).

    Attributes:
    - laterals: 1x1 projections of every pyramid scale to d_q
    - pixel: refinement of the summed stride-4 map into the per-pixel embedding
    - film: audio scale and shift of the attention memory
    - audio_query: audio offset added to every query
    - query_embed: N_q learnable queries
    - decoder: transformer decoder over the queries
    - mask_embed: query to mask-embedding MLP
    - score: query fusion logits, one per class (1 in binary mode)
    - text_proj: projection of implicit text tokens appended to the memory, when enabled
    """
    def __init__(self, channels:tuple, audio_dim:int, query_dim:int = 128, num_queries:int = 16, layers:int = 2,
                 heads:int = 8, num_classes:int = None, text_dim:int = None):
        super().__init__()
        self.num_classes = num_classes
        self.laterals = nn.ModuleList(nn.Conv2d(c, query_dim, kernel_size=1) for c in channels)
        self.pixel = nn.Sequential(
            nn.Conv2d(query_dim, query_dim, kernel_size=3, padding=1, bias=False),
            nn.GroupNorm(min(8, query_dim), query_dim),
            nn.ReLU(inplace=True),
            nn.Conv2d(query_dim, query_dim, kernel_size=1),
        )
        self.film = nn.Linear(audio_dim, 2 * query_dim)
        self.audio_query = nn.Linear(audio_dim, query_dim)
        self.query_embed = nn.Embedding(num_queries, query_dim)
        layer = nn.TransformerDecoderLayer(query_dim, heads, dim_feedforward=4 * query_dim, dropout=0.0, batch_first=True)
        self.decoder = nn.TransformerDecoder(layer, layers)
        self.mask_embed = MLP(query_dim, query_dim, query_dim, 3)
        self.score = nn.Linear(query_dim, num_classes or 1)
        self.text_proj = nn.Linear(text_dim, query_dim) if text_dim else None

    def _pixel_embedding(self, scales:list) -> torch.Tensor:
        target = scales[0].shape[-2:]
        summed = 0
        for lateral, features in zip(self.laterals, scales):
            x = lateral(features)
            if x.shape[-2:] != target:
                x = nnf.interpolate(x, size=target, mode="bilinear", align_corners=False)
            summed = summed + x
        return self.pixel(summed)

    def forward(self, stack:VisualFeatureStack, audio:torch.Tensor, text:torch.Tensor = None, size:tuple = None) -> MaskPrediction:
        """
        Parameters:
        - stack: VisualFeatureStack with scales (B, T, C_i, H_i, W_i)
        - audio: (B, T, D) audio embeddings
        - text: optional (B, L, d_t) implicit text appended to the memory
        - size: output (H, W), 4x the finest scale when not given

        Returns:
        - MaskPrediction
        """
        B, T = stack.scales[0].shape[:2]
        if audio.shape[:2] != (B, T):
            raise ValueError(f"audio features {tuple(audio.shape[:2])} do not match the visual batch {(B, T)}")
        if len(stack.scales) != len(self.laterals):
            raise ValueError(f"decoder expects {len(self.laterals)} scales, got {len(stack.scales)}")

        scales = [s.reshape(B * T, *s.shape[2:]) for s in stack.scales]
        audio = audio.reshape(B * T, -1)
        pixel = self._pixel_embedding(scales)

        memory = self.laterals[-1](scales[-1]).flatten(2).transpose(1, 2)
        gamma, beta = self.film(audio).unsqueeze(1).chunk(2, dim=-1)
        memory = memory * (1 + gamma) + beta
        if text is not None and self.text_proj is not None:
            cue = self.text_proj(text).repeat_interleave(T, dim=0)
            memory = torch.cat([memory, cue], dim=1)

        queries = self.query_embed.weight.unsqueeze(0) + self.audio_query(audio).unsqueeze(1)
        queries = self.decoder(queries, memory)

        per_query = torch.einsum("nqc,nchw->nqhw", self.mask_embed(queries), pixel)
        weights = torch.softmax(self.score(queries), dim=1)
        if self.num_classes:
            logits = torch.einsum("nqk,nqhw->nkhw", weights, per_query)
        else:
            logits = torch.einsum("nq,nqhw->nhw", weights.squeeze(-1), per_query).unsqueeze(1)

        size = tuple(size) if size else (4 * pixel.shape[-2], 4 * pixel.shape[-1])
        logits = nnf.interpolate(logits, size=size, mode="bilinear", align_corners=False)
        if self.num_classes:
            logits = logits.reshape(B, T, self.num_classes, *size)
        else:
            logits = logits.reshape(B, T, *size)
        return MaskPrediction(logits=logits, queries=queries)


def decode(decoder:QueryDecoder, stack:VisualFeatureStack, audio:torch.Tensor, text:torch.Tensor = None, size:tuple = None) -> MaskPrediction:
    return decoder(stack, audio, text, size)


def bce(logits:torch.Tensor, gt:torch.Tensor) -> torch.Tensor:
    return nnf.binary_cross_entropy_with_logits(logits, gt.to(logits.dtype))


def dice_loss(logits:torch.Tensor, gt:torch.Tensor, smooth:float = 1.0) -> torch.Tensor:
    """
    1 - (2|P.G| + s) / (|P| + |G| + s) per frame on sigmoid probabilities, averaged over frames.
    """
    p = torch.sigmoid(logits).flatten(-2)
    g = gt.to(logits.dtype).flatten(-2)
    per_frame = 1 - (2 * (p * g).sum(-1) + smooth) / (p.sum(-1) + g.sum(-1) + smooth)
    return per_frame.mean()


def focal_loss(logits:torch.Tensor, gt:torch.Tensor, alpha:float = 0.25, gamma:float = 2.0) -> torch.Tensor:
    """
    Sigmoid focal loss alpha_t (1 - p_t)^gamma CE, averaged over pixels.
    """
    g = gt.to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = nnf.binary_cross_entropy_with_logits(logits, g, reduction="none")
    p_t = p * g + (1 - p) * (1 - g)
    alpha_t = alpha * g + (1 - alpha) * (1 - g)
    return (alpha_t * (1 - p_t) ** gamma * ce).mean()


def semantic_dice_loss(logits:torch.Tensor, gt:torch.Tensor, smooth:float = 1.0) -> torch.Tensor:
    """
    Dice of softmax probabilities against one-hot labels, per frame and class.

    Parameters:
    - logits: (..., K, H, W)
    - gt: (..., H, W) long labels
    """
    p = torch.softmax(logits, dim=-3).flatten(-2)
    g = nnf.one_hot(gt, logits.shape[-3]).movedim(-1, -3).to(logits.dtype).flatten(-2)
    per_class = 1 - (2 * (p * g).sum(-1) + smooth) / (p.sum(-1) + g.sum(-1) + smooth)
    return per_class.mean()


def semantic_focal_loss(logits:torch.Tensor, gt:torch.Tensor, alpha:float = 0.25, gamma:float = 2.0) -> torch.Tensor:
    log_p = torch.log_softmax(logits, dim=-3)
    log_p_t = log_p.gather(-3, gt.unsqueeze(-3)).squeeze(-3)
    return (-alpha * (1 - log_p_t.exp()) ** gamma * log_p_t).mean()


def _check_gt(logits:torch.Tensor, gt:torch.Tensor, semantic:bool):
    if semantic:
        if logits.shape[:-3] + logits.shape[-2:] != gt.shape:
            raise ValueError(f"semantic logits {tuple(logits.shape)} do not match labels {tuple(gt.shape)}")
        if gt.dtype.is_floating_point:
            raise ValueError("semantic labels must be integers")
        if gt.numel() and (gt.min() < 0 or gt.max() >= logits.shape[-3]):
            raise ValueError(f"labels must lie in [0, {logits.shape[-3]}), got [{int(gt.min())}, {int(gt.max())}]")
    else:
        if logits.shape != gt.shape:
            raise ValueError(f"logits {tuple(logits.shape)} do not match masks {tuple(gt.shape)}")
        if not torch.all((gt == 0) | (gt == 1)):
            raise ValueError("binary masks must only hold 0 and 1")


def seg_loss_terms(logits:torch.Tensor, gt:torch.Tensor, semantic:bool = False, alpha:float = 0.25, gamma:float = 2.0) -> dict:
    """
    Unweighted segmentation terms. In semantic mode (logits (..., K, H, W))
    the bce slot is multi-class cross-entropy and dice and focal run on softmax.

    Raises:
    - ValueError: on shape mismatch or labels outside the label range
    """
    _check_gt(logits, gt, semantic)
    if semantic:
        flat_logits = logits.reshape(-1, *logits.shape[-3:])
        flat_gt = gt.reshape(-1, *gt.shape[-2:])
        return {
            "bce": nnf.cross_entropy(flat_logits, flat_gt),
            "dice": semantic_dice_loss(logits, gt),
            "focal": semantic_focal_loss(logits, gt, alpha, gamma),
        }
    return {
        "bce": bce(logits, gt),
        "dice": dice_loss(logits, gt),
        "focal": focal_loss(logits, gt, alpha, gamma),
    }


def seg_loss(logits:torch.Tensor, gt:torch.Tensor, weights:LossWeights, semantic:bool = False) -> torch.Tensor:
    terms = seg_loss_terms(logits, gt, semantic)
    return weights.bce * terms["bce"] + weights.dice * terms["dice"] + weights.focal * terms["focal"]


def total_loss(terms:dict, weights:LossWeights):
    """
    L_seg + lambda_cf L_cf + lambda_cdcl sum_pairs lambda_pair L_pair.
    Missing terms contribute 0.

    Parameters:
    - terms: dict with seg, and optionally cf, v_a, v_l, a_l
    - weights: LossWeights
    """
    contrast = sum(getattr(weights, pair) * terms[pair] for pair in ("v_a", "v_l", "a_l") if pair in terms)
    return terms["seg"] + weights.cf * terms.get("cf", 0.0) + weights.cdcl * contrast
