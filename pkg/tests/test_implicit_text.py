import math

import pytest
import torch
from torch import nn

from harness.config import GranularityConfig
from model.encoders import VisualFeatureStack
from model.implicit_text import ConceptCodebook, GateConcat, ImplicitText, TextFusion, fuse_texts, gate_concat, invert_text
from model.temporal_context import TemporalContext


@pytest.fixture(scope="module")
def codebook():
    return ConceptCodebook.build(num_distractors=4, dim=32, seed=7)


def test_codebook_is_orthonormal_and_frozen(codebook):
    gram = codebook.entries @ codebook.entries.T
    assert len(codebook) == 16
    assert torch.allclose(gram, torch.eye(16), atol=1e-5)
    assert list(codebook.parameters()) == []
    assert codebook.names[0] == "sine_circle"
    assert codebook.names[-1] == "distractor_03"


def test_codebook_archive_round_trip(codebook, tmp_path):
    path = tmp_path / "codebook.npz"
    codebook.save(path)
    loaded = ConceptCodebook.load(path)
    assert torch.equal(loaded.entries, codebook.entries)
    assert loaded.names == codebook.names
    assert loaded.modality == "visual"


def test_codebook_needs_two_entries():
    with pytest.raises(ValueError):
        ConceptCodebook(torch.randn(1, 4), ["only"])
    with pytest.raises(ValueError):
        ConceptCodebook(torch.randn(3, 4), ["a", "b"])
    with pytest.raises(ValueError):
        ConceptCodebook(torch.randn(3, 4), ["a", "b", "c"], modality="text")


def test_inverting_an_entry_recovers_it(codebook):
    e3 = codebook.entries[3]
    token = invert_text(e3, codebook, num_tokens=1, steps=200)
    assert token.shape == (1, 32)
    assert torch.cosine_similarity(token[0], e3, dim=0) >= 0.99


def test_features_orthogonal_to_the_codebook_match_nothing(codebook):
    raw = torch.randn(32, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    basis = codebook.entries.double()
    orthogonal = raw - basis.T @ (basis @ raw)

    _, history = invert_text(orthogonal.float(), codebook, num_tokens=1, steps=50, return_history=True)
    assert history[-1] <= 0.05


def test_two_tokens_split_a_two_concept_mixture(codebook):
    mixture = (codebook.entries[1] + codebook.entries[5]) / 2
    tokens = invert_text(mixture, codebook, num_tokens=2, steps=50)
    assert set(codebook.nearest(tokens).tolist()) == {1, 5}


def test_ascent_never_decreases_the_objective(codebook):
    mixture = (codebook.entries[2] + 0.5 * codebook.entries[9]) / 2
    _, history = invert_text(mixture, codebook, num_tokens=2, steps=30, lr=0.01, return_history=True)
    assert len(history) == 31
    assert all(b >= a - 1e-6 for a, b in zip(history, history[1:]))


def test_batched_inversion_matches_single(codebook):
    features = codebook.entries[[0, 4]] + 0.1 * codebook.entries[[6, 7]]
    batched = invert_text(features, codebook, num_tokens=2, steps=10)
    single = invert_text(features[1], codebook, num_tokens=2, steps=10)
    assert batched.shape == (2, 2, 32)
    assert torch.allclose(batched[1], single, atol=1e-6)


def test_inversion_errors(codebook):
    with pytest.raises(ValueError, match="zero-norm"):
        invert_text(torch.zeros(32), codebook, num_tokens=1)
    with pytest.raises(ValueError):
        invert_text(codebook.entries[0], codebook, num_tokens=0)
    with pytest.raises(ValueError):
        invert_text(torch.ones(8), codebook, num_tokens=1)


def test_equal_logits_average_the_tokens():
    tokens = torch.randn(3, 4)
    fused = fuse_texts(tokens, w=torch.zeros(3))
    assert torch.allclose(fused.fused, tokens.mean(dim=0), atol=1e-6)


def test_saturated_logit_selects_one_token():
    l_v, l_s, l_f = torch.randn(2, 4), torch.randn(2, 4), torch.randn(3, 2, 4)
    w = torch.zeros(2 + 2 + 6)
    w[5] = 50.0
    fused = fuse_texts(l_v, l_s, l_f, w)
    # Index 5 is the second token of the first frame
    assert torch.allclose(fused.fused, l_f[0, 1], atol=1e-6)


def test_hand_weighted_fusion():
    tokens = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1 / math.sqrt(2), 1 / math.sqrt(2)]], dtype=torch.float64)
    w = torch.tensor([0.0, math.log(2), 0.0], dtype=torch.float64)
    fused = fuse_texts(tokens, w=w)
    expected = (tokens[0] + 2 * tokens[1] + tokens[2]) / 4
    assert torch.allclose(fused.fused, expected, atol=1e-12)
    assert float(fused.weights.sum()) == pytest.approx(1.0, abs=1e-6)


def test_slots_decompose_the_fused_text():
    l_v, l_s, l_f = torch.randn(2, 3, 4), torch.randn(2, 3, 4), torch.randn(2, 5, 3, 4)
    fused = fuse_texts(l_v, l_s, l_f, torch.randn(2, 21))

    assert fused.slots.shape == (2, 3, 4)
    assert torch.allclose(fused.slot_mass.sum(dim=-1), torch.ones(2), atol=1e-6)
    recomposed = (fused.slot_mass.unsqueeze(-1) * fused.slots).sum(dim=-2)
    assert torch.allclose(recomposed, fused.fused, atol=1e-5)


def test_fusion_gradient_matches_finite_differences():
    tokens = torch.randn(2, 3, dtype=torch.float64)
    frames = torch.randn(2, 2, 3, dtype=torch.float64)
    w = torch.randn(6, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda logits: fuse_texts(tokens, None, frames, logits).fused, (w,))


def test_learned_fusion_starts_uniform():
    fused = TextFusion(4)(torch.randn(2, 2, 4), torch.randn(2, 2, 4), torch.randn(2, 3, 2, 4))
    assert torch.allclose(fused.weights, torch.full((2, 10), 0.1), atol=1e-6)


def force_gate(gate:nn.Sequential, logit:float):
    with torch.no_grad():
        gate[-1].weight.zero_()
        gate[-1].bias.fill_(logit)


def test_open_gates_with_identity_projection_concatenate():
    gate = GateConcat(4)
    force_gate(gate.visual_gate, 50.0)
    force_gate(gate.audio_gate, 50.0)
    with torch.no_grad():
        gate.projection.weight.copy_(torch.eye(4))
        gate.projection.bias.zero_()

    visual, audio = torch.randn(3, 4), torch.randn(3, 4)
    z = gate_concat(gate, visual, audio)
    assert torch.allclose(z, torch.cat([visual, audio]), atol=1e-6)


def test_closed_audio_gate_projects_zero():
    gate = GateConcat(4)
    force_gate(gate.audio_gate, -50.0)
    z = gate_concat(gate, torch.randn(2, 4, 4), torch.randn(2, 4, 4))
    assert z.shape == (2, 8, 4)
    assert torch.allclose(z[:, 4:], gate.projection.bias.expand(2, 4, 4), atol=1e-6)


def test_implicit_text_bundle():
    torch.manual_seed(0)
    generator = torch.Generator().manual_seed(0)
    sizes = [(4, 16, 16), (8, 8, 8), (8, 4, 4), (8, 2, 2)]
    stack = VisualFeatureStack(
        scales=[torch.randn(2, 3, *size, generator=generator) for size in sizes],
        pooled=torch.zeros(2, 3, 6),
    )
    streams = TemporalContext([256, 64, 16, 4], GranularityConfig())(stack)
    model = ImplicitText(visual_dim=8, audio_dim=16, text_dim=16, num_tokens=2, num_distractors=4, steps=3)
    bundle = model(streams, torch.randn(2, 3, 16, generator=generator))

    assert bundle.l_v.shape == (2, 2, 16)
    assert bundle.l_s.shape == (2, 2, 16)
    assert bundle.l_f.shape == (2, 3, 2, 16)
    assert bundle.visual.weights.shape == (2, 10)
    assert bundle.audio_tokens.shape == (2, 2, 16)
    assert bundle.audio_text.shape == (2, 16)
    assert bundle.z.shape == (2, 4, 16)
    assert all(not p.requires_grad for p in model.visual_proj.parameters())
    assert all(torch.isfinite(t).all() for t in (bundle.z, bundle.visual.fused))
