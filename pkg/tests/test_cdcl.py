import math

import numpy as np
import pytest
import scipy.linalg
import torch

from harness.config import ContrastConfig
from model.cdcl import (
    GaussianSummary,
    TriModalContrast,
    contrast_from_distances,
    counterfactual_weights,
    distance,
    distribution_distance,
    entropy,
    gaussian_summary,
    loss_a_l,
    loss_v_a,
    loss_v_l,
    masked_mean,
    partition_by_audio_anchor,
    prototype_distance,
)

EPS = 1e-4


def random_psd(rng, d):
    m = rng.normal(size=(d, d))
    return m @ m.T + 0.1 * np.eye(d)


def summary(mean, cov):
    return GaussianSummary.from_moments(torch.as_tensor(mean, dtype=torch.float64), torch.as_tensor(cov, dtype=torch.float64))


def test_constant_rows_leave_only_shrinkage():
    row = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    s = gaussian_summary(row.expand(5, 3), EPS)
    assert torch.equal(s.mean, row)
    assert torch.allclose(s.cov, EPS * torch.eye(3, dtype=torch.float64), atol=1e-15)
    assert s.n == 5


def test_one_dimensional_biased_variance():
    s = gaussian_summary(torch.tensor([[0.0], [2.0]], dtype=torch.float64), EPS)
    assert float(s.mean) == 1.0
    assert float(s.cov) == pytest.approx(1 + EPS, abs=1e-12)


def test_covariance_matches_an_independent_oracle():
    x = np.random.default_rng(0).normal(size=(10, 4))
    s = gaussian_summary(torch.from_numpy(x), EPS)
    expected = np.cov(x, rowvar=False, bias=True) + EPS * np.eye(4)
    assert np.allclose(s.cov.numpy(), expected, atol=1e-10)
    assert np.allclose(s.mean.numpy(), x.mean(axis=0), atol=1e-12)


def test_entropy_closed_forms():
    zero = entropy(torch.tensor([[1 / (2 * math.pi * math.e)]], dtype=torch.float64))
    assert float(zero) == pytest.approx(0.0, abs=1e-10)
    assert float(entropy(torch.ones(1, 1, dtype=torch.float64))) == pytest.approx(1.41894, abs=1e-5)
    for d in (1, 4, 16):
        value = entropy(torch.eye(d, dtype=torch.float64))
        assert float(value) == pytest.approx(d / 2 * math.log(2 * math.pi * math.e), abs=1e-10)


def test_entropy_rejects_asymmetric_matrices():
    with pytest.raises(ValueError):
        entropy(torch.tensor([[1.0, 0.5], [0.0, 1.0]], dtype=torch.float64))


def test_stored_entropy_is_recomputable():
    s = gaussian_summary(torch.randn(7, 5, dtype=torch.float64), EPS)
    assert torch.equal(s.entropy, entropy(s.cov))


def test_identical_summaries_are_at_distance_zero():
    s = gaussian_summary(torch.randn(8, 4, dtype=torch.float64), EPS)
    assert abs(float(distance(s, s))) < 1e-8


def test_one_dimensional_closed_form():
    a, b = summary([0.0], [[1.0]]), summary([3.0], [[1.0]])
    assert float(distance(a, b)) == pytest.approx(9.0, abs=1e-10)


def test_random_pairs_match_a_matrix_square_root_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        mean_a, mean_b = rng.normal(size=4), rng.normal(size=4)
        cov_a, cov_b = random_psd(rng, 4), random_psd(rng, 4)
        root_b = scipy.linalg.sqrtm(cov_b).real
        cross = np.trace(scipy.linalg.sqrtm(root_b @ cov_a @ root_b).real)
        expected = np.sum((mean_a - mean_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * cross

        a, b = summary(mean_a, cov_a), summary(mean_b, cov_b)
        assert float(distance(a, b)) == pytest.approx(expected, abs=1e-6)
        assert abs(float(distance(a, b)) - float(distance(b, a))) < 1e-8
        assert float(distance(a, b)) >= -1e-8


def test_entropy_term_is_weighted_by_gamma():
    a = gaussian_summary(torch.randn(6, 3, dtype=torch.float64), EPS)
    b = gaussian_summary(torch.randn(6, 3, dtype=torch.float64), EPS)
    gap = distance(a, b, gamma=0.1) - distance(a, b, gamma=0.0)
    assert float(gap) == pytest.approx(0.1 * float(a.entropy + b.entropy), abs=1e-10)


def test_distance_dimension_mismatch():
    with pytest.raises(ValueError):
        distance(summary([0.0], [[1.0]]), summary([0.0, 0.0], np.eye(2)))


def test_partitions():
    identical = torch.ones(3, 4)
    assert partition_by_audio_anchor(identical).all()

    orthogonal = torch.eye(4)
    assert torch.equal(partition_by_audio_anchor(orthogonal, 0.85), torch.eye(4, dtype=torch.bool))

    pairs = torch.tensor([[1.0, 0.0, 0.0], [1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.2]])
    expected = torch.tensor([
        [True, True, False, False],
        [True, True, False, False],
        [False, False, True, True],
        [False, False, True, True],
    ])
    assert torch.equal(partition_by_audio_anchor(pairs, 0.85), expected)

    with pytest.raises(ValueError):
        partition_by_audio_anchor(torch.ones(1, 4))


def test_no_negatives_gives_zero_loss():
    cfg = ContrastConfig()
    visual, audio = torch.randn(3, 4), torch.randn(3, 4)
    loss = loss_v_a(visual, audio, torch.ones(3, 3, dtype=torch.bool), cfg, prototype_distance)
    assert float(loss) == pytest.approx(0.0, abs=1e-6)


def test_equidistant_positive_and_negative_give_log_two():
    cfg = ContrastConfig()
    visual = torch.zeros(2, 2)
    audio = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
    loss = loss_v_a(visual, audio, torch.eye(2, dtype=torch.bool), cfg, prototype_distance)
    assert float(loss) == pytest.approx(math.log(2), abs=1e-6)


def test_kernel_decreases_with_distance():
    negative = torch.tensor([[1.5]])
    losses = [float(contrast_from_distances(torch.tensor([[d]]), negative, 1.0)) for d in (0.5, 1.0, 2.0, 4.0)]
    assert losses == sorted(losses)
    assert len(set(losses)) == 4


def test_counterfactual_weights():
    assert torch.allclose(counterfactual_weights(torch.full((2, 4), 0.75)), torch.full((2, 4), 0.25))
    assert counterfactual_weights(torch.tensor([0.0, 0.75], dtype=torch.float64)).tolist() == pytest.approx([2 / 3, 1 / 3])

    weights = counterfactual_weights(torch.tensor([0.1, 0.5, 0.7, 0.9]))
    assert float(weights.sum()) == pytest.approx(1.0, abs=1e-6)
    assert torch.all(weights[1:] < weights[:-1])

    with pytest.raises(ValueError):
        counterfactual_weights(torch.ones(3))


def test_far_counterfactuals_cost_nothing():
    cfg = ContrastConfig()
    visual = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    text = visual.clone()
    pool = torch.full((1, 3, 2), 1e3, dtype=torch.float64)
    loss = loss_v_l(visual, text, pool, torch.full((1, 3), 0.75, dtype=torch.float64), cfg, prototype_distance)
    assert float(loss) == pytest.approx(0.0, abs=1e-9)


def test_weighted_text_contrast_hand_fixture():
    cfg = ContrastConfig(temperature=1.0)
    modality = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    text = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    pool = torch.tensor([[[2.0, 0.0], [3.0, 0.0]]], dtype=torch.float64)
    alphas = torch.tensor([[0.0, 0.75]], dtype=torch.float64)

    expected = -math.log(math.exp(-1) / (math.exp(-1) + 2 / 3 * math.exp(-4) + 1 / 3 * math.exp(-9)))
    visual_loss = loss_v_l(modality, text, pool, alphas, cfg, prototype_distance)
    audio_loss = loss_a_l(modality, text, pool, alphas, cfg, prototype_distance)
    assert float(visual_loss) == pytest.approx(expected, abs=1e-12)
    assert float(audio_loss) == float(visual_loss)


def test_visual_audio_gradient_through_the_bures_path():
    cfg = ContrastConfig(eps_reg=1e-2)
    generator = torch.Generator().manual_seed(0)
    visual = torch.randn(3, 6, 4, generator=generator, dtype=torch.float64, requires_grad=True)
    audio = torch.randn(3, 6, 4, generator=generator, dtype=torch.float64, requires_grad=True)
    positives = torch.tensor([[True, True, False], [True, True, False], [False, False, True]])

    def loss(v, a):
        return loss_v_a(gaussian_summary(v, cfg.eps_reg), gaussian_summary(a, cfg.eps_reg), positives, cfg, distribution_distance)

    assert torch.autograd.gradcheck(loss, (visual, audio), rtol=1e-3)


def test_visual_text_gradient_through_the_bures_path():
    cfg = ContrastConfig(eps_reg=1e-2)
    generator = torch.Generator().manual_seed(1)
    visual = torch.randn(2, 6, 4, generator=generator, dtype=torch.float64, requires_grad=True)
    text = torch.randn(2, 5, 4, generator=generator, dtype=torch.float64, requires_grad=True)
    pool = torch.randn(2, 3, 5, 4, generator=generator, dtype=torch.float64)
    alphas = torch.tensor([[0.7, 0.75, 0.8], [0.72, 0.7, 0.79]], dtype=torch.float64)

    def loss(v, t):
        return loss_v_l(gaussian_summary(v, cfg.eps_reg), gaussian_summary(t, cfg.eps_reg),
                        gaussian_summary(pool, cfg.eps_reg), alphas, cfg, distribution_distance)

    assert torch.autograd.gradcheck(loss, (visual, text), rtol=1e-3)


@pytest.mark.parametrize("mode", ["distribution", "prototype", "feature"])
@pytest.mark.parametrize("with_pool", [True, False])
def test_tri_modal_contrast_is_finite(mode, with_pool):
    torch.manual_seed(0)
    contrast = TriModalContrast(visual_dim=6, audio_dim=5, text_dim=4, config=ContrastConfig(embed_dim=3))
    pool = torch.randn(3, 2, 2, 4) if with_pool else None
    alphas = torch.full((3, 2), 0.75) if with_pool else None

    losses = contrast(torch.randn(3, 4, 6), torch.randn(3, 4, 5), torch.randn(3, 2, 4), torch.randn(3, 4),
                      pool=pool, alphas=alphas, mode=mode)
    assert sorted(losses) == ["a_l", "v_a", "v_l"]
    assert all(torch.isfinite(loss) for loss in losses.values())

    sum(losses.values()).backward()
    assert contrast.text_head.weight.grad is not None
    assert torch.isfinite(contrast.visual_head.weight.grad).all()


def test_contrast_pairs_can_be_disabled():
    contrast = TriModalContrast(visual_dim=6, audio_dim=5, text_dim=4, config=ContrastConfig(embed_dim=3))
    losses = contrast(torch.randn(2, 4, 6), torch.randn(2, 4, 5), torch.randn(2, 2, 4), pairs=("v_l",), mode="prototype")
    assert list(losses) == ["v_l"]
    with pytest.raises(ValueError):
        contrast(torch.randn(2, 4, 6), torch.randn(2, 4, 5), mode="cosine")


def test_masked_mean():
    seq = torch.tensor([[[1.0, 0.0], [3.0, 2.0], [5.0, 4.0]], [[1.0, 1.0], [3.0, 3.0], [5.0, 5.0]]])
    mask = torch.tensor([[True, False, True], [False, False, False]])
    assert masked_mean(seq, mask).tolist() == [[3.0, 2.0], [3.0, 3.0]]
    assert torch.equal(masked_mean(seq), seq.mean(dim=1))


def test_visual_prototype_averages_the_masked_frames():
    torch.manual_seed(2)
    contrast = TriModalContrast(visual_dim=6, audio_dim=5, text_dim=4, config=ContrastConfig(embed_dim=3)).double()
    visual = torch.randn(3, 4, 6, dtype=torch.float64)
    audio = torch.randn(3, 4, 5, dtype=torch.float64)
    first_frames = torch.tensor([[True, False, False, False]] * 3)

    masked = contrast(visual, audio, pairs=("v_a",), mode="prototype", visual_mask=first_frames)["v_a"]
    sliced = contrast(visual[:, :1], audio, pairs=("v_a",), mode="prototype")["v_a"]
    unmasked = contrast(visual, audio, pairs=("v_a",), mode="prototype")["v_a"]
    everything = contrast(visual, audio, pairs=("v_a",), mode="prototype", visual_mask=torch.ones(3, 4, dtype=torch.bool))["v_a"]

    assert torch.allclose(masked, sliced)
    assert torch.allclose(unmasked, everything)


@pytest.mark.parametrize("mode", ["distribution", "prototype", "feature"])
def test_without_a_pool_the_other_texts_are_the_negatives(mode):
    torch.manual_seed(3)
    contrast = TriModalContrast(visual_dim=6, audio_dim=5, text_dim=4, config=ContrastConfig(embed_dim=3)).double()
    visual = torch.randn(3, 4, 6, dtype=torch.float64)
    audio = torch.randn(3, 4, 5, dtype=torch.float64)
    z = torch.randn(3, 2, 4, dtype=torch.float64)
    others = torch.tensor([[1, 2], [0, 2], [0, 1]])

    implicit = contrast(visual, audio, z, pairs=("v_l", "a_l"), mode=mode)
    explicit = contrast(visual, audio, z, pool=z[others], alphas=torch.zeros(3, 2, dtype=torch.float64),
                        pairs=("v_l", "a_l"), mode=mode)
    for pair in ("v_l", "a_l"):
        assert torch.allclose(implicit[pair], explicit[pair])
