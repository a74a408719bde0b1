import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as nnf
from torch import nn

from entities.concepts import CONCEPT_NAMES
from harness.config import LEVELS

logger = logging.getLogger(__name__)

CODEBOOK_MAGIC = 0x43424B31  # "CBK1"
CODEBOOK_VERSION = 1
MODALITIES = ("visual", "audio")


class ConceptCodebook(nn.Module):
    """
    Frozen table of unit-norm concept embeddings, the text space implicit
    texts are searched in.

    Attributes:
    - entries: (N_e, d_t) buffer, rows unit-norm
    - names: list of N_e concept names
    - modality: visual or audio

    Raises:
    - ValueError: with fewer than 2 entries, unnamed rows or an unknown modality
    """
    def __init__(self, entries:torch.Tensor, names:list, modality:str = "visual"):
        super().__init__()
        if entries.ndim != 2 or entries.shape[0] < 2:
            raise ValueError(f"a codebook needs at least 2 entries, got shape {tuple(entries.shape)}")
        if len(names) != entries.shape[0]:
            raise ValueError(f"{len(names)} names for {entries.shape[0]} entries")
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {modality}")

        self.register_buffer("entries", nnf.normalize(entries.float(), dim=-1))
        self.names = list(names)
        self.modality = modality

    @classmethod
    def build(cls, names:list = None, num_distractors:int = 20, dim:int = 128, seed:int = 0, modality:str = "visual") -> "ConceptCodebook":
        """
        Draw one embedding per concept and per distractor from a fixed seed
        and orthonormalize them (orthonormal as long as N_e <= d_t).
        """
        names = list(names or CONCEPT_NAMES) + [f"distractor_{i:02d}" for i in range(num_distractors)]
        generator = torch.Generator().manual_seed(seed)
        raw = torch.randn(len(names), dim, generator=generator, dtype=torch.float64)
        if len(names) <= dim:
            q, _ = torch.linalg.qr(raw.T)
            raw = q.T
        return cls(raw.float(), names, modality)

    def __len__(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def projector(self) -> torch.Tensor:
        """
        (d_t, d_t) orthogonal projection onto the span of the entries.
        """
        return torch.linalg.pinv(self.entries) @ self.entries

    def nearest(self, tokens:torch.Tensor) -> torch.Tensor:
        return (nnf.normalize(tokens, dim=-1) @ self.entries.T).argmax(dim=-1)

    def save(self, path:str):
        """
        Write the codebook as an .npz archive: header (magic, version, rows,
        dim, modality code), row-major float32 entries and the name table.
        """
        header = np.array([CODEBOOK_MAGIC, CODEBOOK_VERSION, len(self), self.dim, MODALITIES.index(self.modality)], dtype=np.int64)
        np.savez(path, header=header, entries=self.entries.cpu().numpy().astype(np.float32), names=np.array(self.names))

    @classmethod
    def load(cls, path:str) -> "ConceptCodebook":
        with np.load(path, allow_pickle=False) as archive:
            header, entries, names = archive["header"], archive["entries"], archive["names"]
        if header[0] != CODEBOOK_MAGIC or header[1] != CODEBOOK_VERSION:
            raise ValueError(f"{path} is not a version {CODEBOOK_VERSION} codebook archive")
        if entries.shape != (header[2], header[3]):
            raise ValueError(f"{path}: header declares {tuple(header[2:4])}, entries are {entries.shape}")
        return cls(torch.from_numpy(entries), [str(n) for n in names], MODALITIES[int(header[4])])


def _diversity_penalty(tokens:torch.Tensor, threshold:float) -> torch.Tensor:
    unit = nnf.normalize(tokens, dim=-1)
    cosine = unit @ unit.transpose(-1, -2)
    off_diagonal = ~torch.eye(tokens.shape[-2], dtype=torch.bool, device=tokens.device)
    return (nnf.relu(cosine - threshold) ** 2 * off_diagonal).sum(dim=(-2, -1)) / 2


def invert_text(features:torch.Tensor, codebook:ConceptCodebook, num_tokens:int, steps:int = 200, lr:float = 0.05,
                diversity_threshold:float = 0.95, diversity_weight:float = 1.0, return_history:bool = False):
    """
    Search the k^t tokens whose codebook-space projections best match a feature summary.

    Tokens start at the num_tokens entries most similar to the summary (ties
    by entry index) and follow gradient ascent on the mean cosine between the
    summary and each projected token, minus a hinge penalty on pairwise
    token cosine above diversity_threshold. Any leading batch dimensions of
    features are inverted at once and independently.

    Parameters:
    - features: (..., d_t) feature summaries
    - codebook: ConceptCodebook
    - num_tokens: k^t
    - steps: ascent steps
    - lr: SGD step size
    - diversity_threshold: pairwise cosine above which tokens are pushed apart
    - diversity_weight: weight of that penalty
    - return_history: also return the objective (summed over the batch) before each step and at the end

    Returns:
    - (..., k^t, d_t) detached tokens, and the history list when asked

    Raises:
    - ValueError: on k^t < 1, k^t larger than the codebook or a zero-norm summary
    """
    if not 1 <= num_tokens <= len(codebook):
        raise ValueError(f"num_tokens must be in [1, {len(codebook)}], got {num_tokens}")
    if features.shape[-1] != codebook.dim:
        raise ValueError(f"features have dim {features.shape[-1]}, codebook has {codebook.dim}")

    features = features.detach().to(codebook.entries.dtype)
    if (features.norm(dim=-1) < 1e-12).any():
        raise ValueError("cannot invert a zero-norm feature summary")

    target = nnf.normalize(features, dim=-1).unsqueeze(-2)
    entries = codebook.entries
    projector = codebook.projector()

    order = torch.argsort(-(target.squeeze(-2) @ entries.T), dim=-1, stable=True)
    tokens = entries[order[..., :num_tokens]].clone().requires_grad_(True)
    optimizer = torch.optim.SGD([tokens], lr=lr)

    def objective() -> torch.Tensor:
        similarity = nnf.cosine_similarity(tokens @ projector.T, target, dim=-1).mean(dim=-1)
        return similarity - diversity_weight * _diversity_penalty(tokens, diversity_threshold)

    history = []
    with torch.enable_grad():
        for _ in range(steps):
            optimizer.zero_grad()
            value = objective().sum()
            if return_history:
                history.append(value.item())
            (-value).backward()
            optimizer.step()
        if return_history:
            history.append(objective().sum().item())

    tokens = tokens.detach()
    if return_history:
        return tokens, history
    return tokens


@dataclass
class FusedText:
    """
    Attributes:
    - fused: (..., d_t) weighted sum of all tokens
    - weights: (..., N) softmax weights over all tokens
    - slots: (..., k, d_t) weighted mean of the tokens sharing a slot index
    - slot_mass: (..., k) total weight of each slot; fused = sum_j slot_mass_j * slots_j
    """
    fused: torch.Tensor
    weights: torch.Tensor
    slots: torch.Tensor
    slot_mass: torch.Tensor


def _concat_levels(l_v, l_s, l_f) -> tuple:
    parts, slot_ids, level_ids = [], [], []
    for level, tokens in enumerate((l_v, l_s, l_f)):
        if tokens is None:
            continue
        if level == 2:
            slots = torch.arange(tokens.shape[-2]).repeat(tokens.shape[-3])
            tokens = tokens.reshape(*tokens.shape[:-3], -1, tokens.shape[-1])
        else:
            slots = torch.arange(tokens.shape[-2])
        parts.append(tokens)
        slot_ids.append(slots)
        level_ids.append(torch.full((tokens.shape[-2],), level))
    if not parts:
        raise ValueError("fusion needs at least one token")
    return torch.cat(parts, dim=-2), torch.cat(slot_ids), torch.cat(level_ids)


def fuse_texts(l_v:torch.Tensor, l_s:torch.Tensor = None, l_f:torch.Tensor = None, w:torch.Tensor = None) -> FusedText:
    """
    Softmax-weighted fusion of the video, segment and frame level tokens.

    Parameters:
    - l_v: (..., k, d) video tokens, or None
    - l_s: (..., k, d) segment tokens, or None
    - l_f: (..., T, k, d) frame tokens, or None
    - w: (..., N) logits, one per token in video, segment, frame order

    Returns:
    - FusedText
    """
    tokens, slot_ids, _ = _concat_levels(l_v, l_s, l_f)
    if w.shape[-1] != tokens.shape[-2]:
        raise ValueError(f"{w.shape[-1]} logits for {tokens.shape[-2]} tokens")

    weights = torch.softmax(w, dim=-1)
    fused = (weights.unsqueeze(-1) * tokens).sum(dim=-2)

    assignment = nnf.one_hot(slot_ids, int(slot_ids.max()) + 1).to(weights.dtype).to(weights.device)
    slot_mass = weights @ assignment
    slots = torch.einsum("...n,nk,...nd->...kd", weights, assignment, tokens) / slot_mass.unsqueeze(-1)
    return FusedText(fused=fused, weights=weights, slots=slots, slot_mass=slot_mass)


class TextFusion(nn.Module):
    """
    Learnable fusion logits: a weight query dotted with each token plus a
    per-level bias. Both start at zero, so fusion starts uniform.
    """
    def __init__(self, dim:int):
        super().__init__()
        self.query = nn.Parameter(torch.zeros(dim))
        self.level_bias = nn.Parameter(torch.zeros(len(LEVELS)))

    def forward(self, l_v:torch.Tensor = None, l_s:torch.Tensor = None, l_f:torch.Tensor = None) -> FusedText:
        tokens, _, level_ids = _concat_levels(l_v, l_s, l_f)
        logits = tokens @ self.query + self.level_bias[level_ids.to(tokens.device)]
        return fuse_texts(l_v, l_s, l_f, logits)


def _gate(dim:int, hidden:int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, dim))


class GateConcat(nn.Module):
    """
    Gates the visual and audio token sets with independent 3-layer MLPs,
    concatenates them along the token axis and projects with a shared map.

    Attributes:
    - visual_gate, audio_gate: MLPs whose sigmoid scales each token elementwise
    - projection: shared linear map F
    """
    def __init__(self, dim:int, hidden:int = None):
        super().__init__()
        self.visual_gate = _gate(dim, hidden or dim)
        self.audio_gate = _gate(dim, hidden or dim)
        self.projection = nn.Linear(dim, dim)

    def forward(self, visual_tokens:torch.Tensor, audio_tokens:torch.Tensor) -> torch.Tensor:
        """
        Parameters:
        - visual_tokens: (..., k, d)
        - audio_tokens: (..., k', d)

        Returns:
        - z: (..., k + k', d)
        """
        if visual_tokens.shape[-1] != audio_tokens.shape[-1]:
            raise ValueError("visual and audio tokens must share the text dimension")
        gated_v = visual_tokens * torch.sigmoid(self.visual_gate(visual_tokens))
        gated_a = audio_tokens * torch.sigmoid(self.audio_gate(audio_tokens))
        return self.projection(torch.cat([gated_v, gated_a], dim=-2))


def gate_concat(gate:GateConcat, visual_tokens:torch.Tensor, audio_tokens:torch.Tensor) -> torch.Tensor:
    return gate(visual_tokens, audio_tokens)


@dataclass
class ImplicitTextBundle:
    """
    Attributes:
    - l_v, l_s: (B, k, d_t) video and segment tokens, None when the level is off
    - l_f: (B, T, k, d_t) frame tokens, None when the level is off
    - visual: FusedText of the enabled levels
    - audio_tokens: (B, k, d_t)
    - audio_text: (B, d_t) mean audio token, the anchor for positive partitions
    - z: (B, 2k, d_t) composite factual text
    """
    l_v: torch.Tensor
    l_s: torch.Tensor
    l_f: torch.Tensor
    visual: FusedText
    audio_tokens: torch.Tensor
    audio_text: torch.Tensor
    z: torch.Tensor


class ImplicitText(nn.Module):
    """
    Turns visual streams and audio embeddings into implicit texts and the
    composite factual text z.

    The feature-to-text projections are frozen like the codebooks: together
    they stand in for pretrained text towers.
    """
    def __init__(self, visual_dim:int, audio_dim:int, text_dim:int = 128, num_tokens:int = 4,
                 num_distractors:int = 20, seed:int = 1234, steps:int = 200, lr:float = 0.05):
        super().__init__()
        self.num_tokens = num_tokens
        self.steps = steps
        self.lr = lr

        self.visual_codebook = ConceptCodebook.build(num_distractors=num_distractors, dim=text_dim, seed=seed, modality="visual")
        self.audio_codebook = ConceptCodebook.build(num_distractors=num_distractors, dim=text_dim, seed=seed + 1, modality="audio")
        self.visual_proj = nn.Linear(visual_dim, text_dim)
        self.audio_proj = nn.Linear(audio_dim, text_dim)
        for parameter in list(self.visual_proj.parameters()) + list(self.audio_proj.parameters()):
            parameter.requires_grad_(False)

        self.fusion = TextFusion(text_dim)
        self.gate = GateConcat(text_dim)

    def _invert(self, features:torch.Tensor, codebook:ConceptCodebook) -> torch.Tensor:
        return invert_text(features, codebook, self.num_tokens, steps=self.steps, lr=self.lr)

    def forward(self, streams, audio_embedding:torch.Tensor) -> ImplicitTextBundle:
        """
        Parameters:
        - streams: GranularityStreams from the temporal context
        - audio_embedding: (B, T, D)

        Returns:
        - ImplicitTextBundle
        """
        summaries = {
            level: self.visual_proj(streams.stream(level)[-1].mean(dim=(-2, -1)))
            for level in streams.levels
        }
        B, T = audio_embedding.shape[:2]

        # One batched inversion for every clip and enabled level
        queries = []
        for level in LEVELS:
            if level in summaries:
                queries.append(summaries[level] if level == "frame" else summaries[level].mean(dim=1, keepdim=True))
        tokens = self._invert(torch.cat(queries, dim=1), self.visual_codebook)

        found, offset = {}, 0
        for level in LEVELS:
            if level in summaries:
                width = T if level == "frame" else 1
                chunk = tokens[:, offset:offset + width]
                found[level] = chunk if level == "frame" else chunk.squeeze(1)
                offset += width

        audio_tokens = self._invert(self.audio_proj(audio_embedding).mean(dim=1), self.audio_codebook)
        visual = self.fusion(found.get("video"), found.get("segment"), found.get("frame"))
        z = self.gate(visual.slots, audio_tokens)

        return ImplicitTextBundle(
            l_v=found.get("video"),
            l_s=found.get("segment"),
            l_f=found.get("frame"),
            visual=visual,
            audio_tokens=audio_tokens,
            audio_text=audio_tokens.mean(dim=-2),
            z=z,
        )
