import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from entities.concepts import NUM_CLASSES
from entities.synthesis import derangement
from harness.config import ExperimentConfig
from model.cdcl import TriModalContrast
from model.counterfactual import CoefficientHead, Denoiser, DiffusionSchedule, PoolCache, cf_loss, generate_pool
from model.encoders import AudioEncoder, VisualEncoder
from model.implicit_text import ImplicitText
from model.seg_decoder import MaskPrediction, QueryDecoder, seg_loss, total_loss
from model.temporal_context import TemporalContext

logger = logging.getLogger(__name__)

STRIDES = (4, 8, 16, 32)

@dataclass
class LossBreakdown:
    """
    Attributes:
    - total: weighted training objective
    - terms: unweighted terms (seg, and cf, v_a, v_l, a_l when active)
    - prediction: MaskPrediction of the batch
    """
    total: torch.Tensor
    terms: dict
    prediction: MaskPrediction

    def as_floats(self) -> dict:
        return {name: float(value) for name, value in self.terms.items()} | {"total": float(self.total)}


class CounterfactualAVS(nn.Module):
    '''
    Audio-visual segmentation model trained with implicit text, diffusion
    counterfactuals and distribution-aware contrast.

    Inference runs encoders, temporal context and decoder only. The implicit
    text, counterfactual and contrast branches exist for every toggle setting
    so that checkpoints share one layout, but they only run in compute_losses
    and only when their toggle is on.

    Attributes:
    - config: ExperimentConfig
    - semantic: whether the decoder predicts class labels
    - visual_encoder, audio_encoder: feature extractors
    - temporal: TemporalContext
    - implicit_text: ImplicitText
    - denoiser: counterfactual noise predictor
    - schedule: DiffusionSchedule
    - inter_head, intra_head: per-sample and per-token coefficient heads
    - contrast: TriModalContrast
    - decoder: QueryDecoder
    - pool_cache: counterfactual pools by clip index
    - calls: how often each training branch ran
    '''
    def __init__(self, config:ExperimentConfig, semantic:bool = False, generator:torch.Generator = None):
        super().__init__()
        self.config = config
        self.semantic = semantic
        model, cf = config.model, config.counterfactual
        H, W = config.data.resolution

        self.visual_encoder = VisualEncoder(model.visual_channels, model.pooled_dim)
        self.audio_encoder = AudioEncoder(model.audio_dim)
        self.temporal = TemporalContext([(H // s) * (W // s) for s in STRIDES], config.granularity)
        self.implicit_text = ImplicitText(
            visual_dim=model.visual_channels[-1],
            audio_dim=model.audio_dim,
            text_dim=model.text_dim,
            num_tokens=model.text_tokens,
            num_distractors=model.codebook_distractors,
            seed=model.codebook_seed,
            steps=model.inversion_steps,
            lr=model.inversion_lr,
        )
        self.denoiser = Denoiser(2 * model.text_tokens, model.text_dim, model.pooled_dim, cf.denoiser_hidden, cf.denoiser_blocks)
        self.schedule = DiffusionSchedule(cf.num_steps, cf.beta_start, cf.beta_end)
        self.inter_head = CoefficientHead(model.pooled_dim, cf.ortho_range, cf.alpha, generator)
        self.intra_head = CoefficientHead(model.text_dim, cf.ortho_range, cf.alpha, generator)
        self.contrast = TriModalContrast(model.pooled_dim, model.audio_dim, model.text_dim, config.contrast)
        self.decoder = QueryDecoder(
            model.visual_channels,
            model.audio_dim,
            query_dim=model.query_dim,
            num_queries=model.num_queries,
            layers=model.decoder_layers,
            heads=model.decoder_heads,
            num_classes=NUM_CLASSES if semantic else None,
            text_dim=model.text_dim if model.text_cue else None,
        )
        self.pool_cache = PoolCache(cf.pool_refresh_epochs)
        self.calls = Counter()

    def encode(self, frames:torch.Tensor, mel:torch.Tensor) -> tuple:
        stack = self.visual_encoder(frames)
        audio = self.audio_encoder(mel).embedding
        return stack, audio, self.temporal(stack)

    def forward(self, frames:torch.Tensor, mel:torch.Tensor) -> MaskPrediction:
        """
        Inference path.

        Parameters:
        - frames: (B, T, 3, H, W)
        - mel: (B, T, M, n_mels)

        Returns:
        - MaskPrediction at the frame resolution
        """
        _, audio, streams = self.encode(frames, mel)
        return self.decoder(streams.fused, audio, size=frames.shape[-2:])

    def coefficient(self, cond:torch.Tensor, z:torch.Tensor) -> tuple:
        '''
        Effective mixing coefficient alpha * c for the configured dimension.

        Returns:
        - (coefficient broadcastable to z, per_token flag)
        '''
        alpha = self.config.counterfactual.alpha
        match self.config.toggles.cf_dimension:
            case "inter":
                return alpha * self.inter_head(cond).unsqueeze(-1), False
            case "intra":
                return alpha * self.intra_head(z), True
            case "both":
                return alpha * self.inter_head(cond).unsqueeze(-1) * self.intra_head(z), True
            case _:
                raise ValueError(f"Counterfactual dimension: {self.config.toggles.cf_dimension} not yet implemented")

    def _diffusion_counterfactuals(self, z:torch.Tensor, cond:torch.Tensor, indices:list, epoch:int,
                                   generator:torch.Generator, terms:dict) -> tuple:
        cf, toggles = self.config.counterfactual, self.config.toggles
        coefficient, per_token = self.coefficient(cond, z)
        self.calls["counterfactual"] += 1

        if toggles.cf_space == "continuous":
            loss = cf_loss(z, cond, self.denoiser, self.schedule, cf.intervention_step, coefficient,
                           cf.lambda_z, cf.lambda_ortho, per_token, cf.normalize_ortho, generator=generator)
            terms["cf"] = loss.total

        if not toggles.cdcl:
            return None, None
        if self.pool_cache.is_stale(indices, epoch):
            with torch.no_grad():
                pool = generate_pool(z.detach(), cond.detach(), coefficient.detach(), self.denoiser, self.schedule,
                                     cf.intervention_step, cf.pool_size, cf.candidate_factor, per_token,
                                     toggles.cf_space, generator)
            self.pool_cache.put(indices, pool, epoch)
            logger.debug("Regenerated counterfactual pools for clips %s", indices)
        return self.pool_cache.get(indices, z.device)

    def _pair_swap_counterfactuals(self, bundle, generator:torch.Generator) -> tuple:
        B = bundle.z.shape[0]
        seed = int(torch.randint(2 ** 31, (1,), generator=generator))
        permutation = torch.as_tensor(derangement(B, 1.0, np.random.default_rng(seed)), device=bundle.z.device)
        swapped = self.implicit_text.gate(bundle.visual.slots, bundle.audio_tokens[permutation])
        self.calls["pair_swap"] += 1
        return swapped.detach().unsqueeze(1), torch.zeros(B, 1, dtype=swapped.dtype, device=swapped.device)

    def compute_losses(self, batch:dict, epoch:int = 0, generator:torch.Generator = None) -> LossBreakdown:
        """
        Training objective of one batch.

        Parameters:
        - batch: dict with frames, mel, masks and index (clip indices for the pool cache)
        - epoch: current epoch, decides pool staleness
        - generator: torch Generator for diffusion steps, noise and swaps

        Returns:
        - LossBreakdown
        """
        toggles = self.config.toggles
        frames, mel, masks = batch["frames"], batch["mel"], batch["masks"]
        indices = [int(i) for i in batch["index"]]
        B = frames.shape[0]

        stack, audio, streams = self.encode(frames, mel)
        bundle = None
        if toggles.mit:
            bundle = self.implicit_text(streams, audio)
            self.calls["codebook"] += 1

        cue = bundle.z if bundle is not None and self.config.model.text_cue else None
        prediction = self.decoder(streams.fused, audio, text=cue, size=frames.shape[-2:])
        terms = {"seg": seg_loss(prediction.logits, masks, self.config.weights, self.semantic)}

        pool, alphas = None, None
        cond = stack.pooled.mean(dim=1)
        if toggles.sc:
            pool, alphas = self._diffusion_counterfactuals(bundle.z, cond, indices, epoch, generator, terms)
        elif toggles.pair_swap and toggles.cdcl and B >= 2:
            pool, alphas = self._pair_swap_counterfactuals(bundle, generator)

        if toggles.cdcl:
            if B < 2:
                logger.debug("Skipping contrast on a batch of %d", B)
            else:
                terms |= self.contrast(
                    stack.pooled,
                    audio,
                    z=bundle.z if bundle is not None else None,
                    audio_text=bundle.audio_text if bundle is not None else None,
                    pool=pool,
                    alphas=alphas,
                    pairs=toggles.contrast_pairs,
                    mode=toggles.contrast_mode,
                    visual_mask=(masks > 0).flatten(2).any(dim=-1),
                )
                self.calls["contrast"] += 1

        return LossBreakdown(total=total_loss(terms, self.config.weights), terms=terms, prediction=prediction)

    @torch.no_grad()
    def embeddings(self, frames:torch.Tensor, mel:torch.Tensor) -> dict:
        """
        Per-clip embeddings before and after the contrast heads.

        Returns:
        - dict with pre (visual (B, C_p), audio (B, D)) and post (visual, audio, and text when
          implicit text is on, each (B, d_e))
        """
        stack, audio, streams = self.encode(frames, mel)
        visual = stack.pooled
        v_e, a_e, _ = self.contrast.embed(visual, audio)
        post = {"visual": v_e.mean(dim=1), "audio": a_e.mean(dim=1)}
        if self.config.toggles.mit:
            z = self.implicit_text(streams, audio).z
            post["text"] = self.contrast.text_head(z).mean(dim=1)
        return {"pre": {"visual": visual.mean(dim=1), "audio": audio.mean(dim=1)}, "post": post}
