"""Edge posterior, prior, KL, relaxation, and ranking metrics."""

import math

import numpy as np
import pytest

from mathkg import diffcore as dc
from mathkg.diffcore import RunRng, Tensor, finite_difference_check
from mathkg.knowledge import (
    build_prior, draw_noise, edge_probability, kl_to_prior,
    nested_known_edges, pair_net_shapes, precision_at_k, rank_ww_edges,
    rank_wo_edges, relax_sample, wo_logit_matrix, ww_logit_matrix,
)


def _pair_params(rng, d, prefixes=("kenc.ww", "kenc.wo")):
    params = {}
    for prefix in prefixes:
        for name, shape in pair_net_shapes(d).items():
            fan_in = shape[0] if len(shape) > 1 else 1
            params[f"{prefix}.{name}"] = Tensor(
                rng.uniform(-1, 1, shape) / np.sqrt(fan_in), requires_grad=True)
    return params


def test_ww_logits_are_symmetric():
    rng = np.random.default_rng(0)
    params = _pair_params(rng, 8)
    emb = Tensor(rng.standard_normal((6, 8)))
    mat = ww_logit_matrix(params, emb).data
    assert mat == pytest.approx(mat.T)
    assert np.isfinite(mat).all()


def test_wo_logits_shape_and_finite():
    rng = np.random.default_rng(1)
    params = _pair_params(rng, 8)
    words = Tensor(rng.standard_normal((10, 8)))
    ops = Tensor(rng.standard_normal((4, 8)))
    mat = wo_logit_matrix(params, words, ops).data
    assert mat.shape == (10, 4)
    assert np.isfinite(mat).all()


def test_edge_probability_examples():
    assert edge_probability(Tensor([0.0])).data == pytest.approx([0.5])
    p30 = edge_probability(Tensor([30.0])).data[0]
    assert 1.0 - p30 == pytest.approx(9.357622968840175e-14)
    probs = edge_probability(Tensor(np.linspace(-5, 5, 50))).data
    assert (np.diff(probs) > 0).all()  # monotone


# ---------------------------------------------------------------------------
# relaxation
# ---------------------------------------------------------------------------

def test_relax_sample_zero_noise_midpoint():
    for tau in (0.1, 0.5, 1.0):
        out = relax_sample(Tensor([0.0]), tau, np.zeros(1)).data
        assert out == pytest.approx([0.5])


def test_relax_sample_low_temperature_saturates():
    out = relax_sample(Tensor([2.0]), 0.1, np.zeros(1)).data[0]
    assert 1.0 - out == pytest.approx(2.0611536181902037e-09)


def test_relax_sample_rejects_bad_temperature():
    with pytest.raises(ValueError):
        relax_sample(Tensor([0.0]), 0.0, np.zeros(1))


def test_relax_sample_hard_threshold_matches_sigmoid():
    # P(sample > 1/2) equals sigma(logit) under logistic noise.
    rng = RunRng(7).stream("gumbel")
    for logit in (-1.2, 0.0, 0.8):
        noise = draw_noise(rng, 100_000, "logistic")
        samples = relax_sample(Tensor(np.full(100_000, logit)), 0.1, noise).data
        frac = (samples > 0.5).mean()
        expected = 1.0 / (1.0 + math.exp(-logit))
        assert frac == pytest.approx(expected, abs=0.01)


def test_relax_sample_outputs_strictly_inside_unit_interval():
    rng = RunRng(3).stream("gumbel")
    noise = draw_noise(rng, 10_000, "logistic")
    out = relax_sample(Tensor(np.zeros(10_000)), 0.5, noise).data
    assert (out > 0).all() and (out < 1).all()


def test_relax_sample_variance_concentrates_as_tau_drops():
    rng = RunRng(11).stream("gumbel")
    logits = Tensor(np.full(10_000, 0.3))
    spread = []
    for tau in (0.5, 0.3, 0.1):
        noise = draw_noise(RunRng(11).stream("gumbel"), 10_000, "logistic")
        s = relax_sample(logits, tau, noise).data
        spread.append(float(np.minimum(s, 1 - s).mean()))  # distance from {0,1}
    assert spread[0] > spread[1] > spread[2]


def test_relax_sample_gradient_matches_finite_differences():
    logits = Tensor(np.array([0.4, -1.0, 2.0]), requires_grad=True)
    noise = draw_noise(RunRng(5).stream("gumbel"), 3, "logistic")

    def f():
        return dc.tsum(relax_sample(logits, 0.37, noise))

    assert finite_difference_check(f, [logits]) < 1e-4


def test_gumbel_flavor_is_selectable_and_different():
    rng1 = RunRng(9).stream("gumbel")
    rng2 = RunRng(9).stream("gumbel")
    a = draw_noise(rng1, 100, "logistic")
    b = draw_noise(rng2, 100, "gumbel")
    assert not np.allclose(a, b)
    with pytest.raises(ValueError):
        draw_noise(rng1, 3, "uniform")


# ---------------------------------------------------------------------------
# KL
# ---------------------------------------------------------------------------

def test_kl_zero_at_matching_probabilities():
    probs = Tensor(np.full(10, 0.1))
    assert float(kl_to_prior(probs, np.full(10, 0.1)).data) == pytest.approx(0.0, abs=1e-12)


def test_kl_half_vs_tenth_closed_form():
    expected = 0.5 * math.log(5.0) + 0.5 * math.log(5.0 / 9.0)
    got = float(kl_to_prior(Tensor([0.5]), [0.1]).data)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.5108, abs=1e-4)


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(13)
    p = rng.uniform(0.001, 0.999, 1000)
    q = rng.uniform(0.001, 0.999, 1000)
    for i in range(0, 1000, 50):
        val = float(kl_to_prior(Tensor(p[i:i + 50]), q[i:i + 50]).data)
        assert val >= 0.0


def test_kl_zero_iff_probabilities_match_prior():
    val = float(kl_to_prior(Tensor([0.1, 0.3]), [0.1, 0.1]).data)
    assert val > 1e-3


# ---------------------------------------------------------------------------
# prior
# ---------------------------------------------------------------------------

def _edges(n):
    return [(i, i + 1) for i in range(n)]


def test_alpha_zero_prior_is_uniform():
    prior = build_prior(_edges(40), alpha=0.0, seed=1)
    assert prior.known_ww == set()
    assert prior.ww_prior(0, 1) == 0.1
    assert prior.wo_prior(3, 2) == 0.1


def test_alpha_point_two_reveals_exactly_eight_of_forty():
    prior = build_prior(_edges(40), alpha=0.2, seed=1)
    assert len(prior.known_ww) == 8
    for i, j in prior.known_ww:
        assert prior.ww_prior(i, j) == 0.5
        assert prior.ww_prior(j, i) == 0.5


def test_alpha_one_reveals_everything():
    prior = build_prior(_edges(40), alpha=1.0, seed=1)
    assert len(prior.known_ww) == 40


def test_known_sets_nest_across_alpha():
    smaller = nested_known_edges(_edges(40), 0.2, seed=9)
    larger = nested_known_edges(_edges(40), 0.6, seed=9)
    assert smaller <= larger


# ---------------------------------------------------------------------------
# ranking / precision
# ---------------------------------------------------------------------------

def test_rank_ww_orders_and_breaks_ties():
    m = np.zeros((3, 3))
    m[0, 1] = m[1, 0] = 0.9
    m[1, 2] = m[2, 1] = 0.2
    m[0, 2] = m[2, 0] = 0.9
    order = rank_ww_edges(m)
    assert order == [(0, 1), (0, 2), (1, 2)]
    assert rank_ww_edges(m, exclude={(0, 1)}) == [(0, 2), (1, 2)]
    assert rank_ww_edges(np.zeros((0, 0))) == []


def test_rank_ww_never_contains_both_orders_or_self():
    rng = np.random.default_rng(2)
    m = rng.random((6, 6))
    m = (m + m.T) / 2
    order = rank_ww_edges(m)
    assert len(order) == 15
    seen = set()
    for i, j in order:
        assert i < j
        assert (j, i) not in seen
        seen.add((i, j))


def test_rank_wo_tie_rule():
    m = np.array([[0.5, 0.9], [0.9, 0.1]])
    assert rank_wo_edges(m) == [(0, 1), (1, 0), (0, 0), (1, 1)]


def test_precision_at_k_basics():
    ranking = [(0, 1), (2, 3), (4, 5)]
    truth = {(0, 1), (2, 3), (4, 5)}
    assert precision_at_k(ranking, truth, 2) == 1.0
    assert precision_at_k(ranking, {(9, 9)}, 3) == 0.0
    # fewer candidates than k: divide by what exists
    assert precision_at_k(ranking, truth, 10) == 1.0
    assert precision_at_k([(0, 1), (7, 8)], truth, 10) == 0.5


def test_precision_random_ranking_matches_density():
    # Monte-Carlo oracle: expected precision of a random ranking is the
    # density of true edges among candidates.
    rng = np.random.default_rng(31)
    n = 40
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    truth = {pairs[i] for i in rng.choice(len(pairs), size=60, replace=False)}
    density = len(truth) / len(pairs)
    total = 0.0
    shuffles = 1000
    for _ in range(shuffles):
        perm = rng.permutation(len(pairs))
        total += precision_at_k([pairs[i] for i in perm], truth, 20)
    assert total / shuffles == pytest.approx(density, abs=0.01)
