"""Edge posterior over word-word and word-operator relations.

Each candidate edge gets a Bernoulli parameter from a small pair-scoring
perceptron over the two endpoint embeddings.  During training edges are
drawn through a temperature-sharpened sigmoid relaxation so gradients flow
through the solver's use of the graph; a Bernoulli prior (sparse by
default, elevated on an optionally revealed subset of true edges)
regularizes the posterior through a KL term.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PROB_CLAMP = 1e-6


def pair_net_shapes(d: int) -> dict[str, tuple]:
    """Parameter shapes of one pair scorer: a 2d -> d -> 1 perceptron."""
    return {"w1": (2 * d, d), "b1": (d,), "w2": (d, 1), "b2": (1,)}


def pair_net_apply(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    """Score a batch of concatenated endpoint embeddings, one logit per row."""
    h = dc.tanh(dc.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return dc.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _pair_logits_all(params: dict[str, Tensor], prefix: str,
                     left_emb: Tensor, right_emb: Tensor) -> Tensor:
    """Pair scores for every (left row, right row) combination.

    Equivalent to running the scorer on each concatenated pair: the first
    layer acting on a concatenation splits into two row blocks, so the two
    projections are computed once per endpoint and broadcast-added.
    """
    d = left_emb.shape[-1]
    p, c = left_emb.shape[0], right_emb.shape[0]
    w1, b1 = params[f"{prefix}.w1"], params[f"{prefix}.b1"]
    li = dc.matmul(left_emb, dc.slice_rows(w1, 0, d))
    rj = dc.matmul(right_emb, dc.slice_rows(w1, d, 2 * d))
    h = dc.tanh(dc.add(dc.add(dc.reshape(li, (p, 1, d)),
                              dc.reshape(rj, (1, c, d))), b1))
    logits = dc.add(dc.matmul(dc.reshape(h, (p * c, d)), params[f"{prefix}.w2"]),
                    params[f"{prefix}.b2"])
    return dc.reshape(logits, (p, c))


def ww_logit_matrix(params: dict[str, Tensor], emb: Tensor) -> Tensor:
    """Symmetric word-word logits for all row pairs of ``emb`` (P x P).

    The scorer is order-sensitive on concatenated inputs, so both orders
    are averaged; the diagonal is meaningless and excluded downstream.
    """
    mat = _pair_logits_all(params, "kenc.ww", emb, emb)
    return dc.scalar_mul(dc.add(mat, dc.transpose(mat)), 0.5)


def wo_logit_matrix(params: dict[str, Tensor], word_emb: Tensor,
                    op_emb: Tensor) -> Tensor:
    """Word-operator logits (P x C)."""
    return _pair_logits_all(params, "kenc.wo", word_emb, op_emb)


def edge_probability(logit):
    """Posterior edge probability sigma(logit)."""
    return dc.sigmoid(logit)


def logistic_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """log U - log(1-U): the noise of the binary-concrete relaxation."""
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return np.log(u) - np.log1p(-u)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Single Gumbel(0,1) draw; selectable alternative noise flavor."""
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def draw_noise(rng: np.random.Generator, shape, flavor: str = "logistic") -> np.ndarray:
    if flavor == "logistic":
        return logistic_noise(rng, shape)
    if flavor == "gumbel":
        return gumbel_noise(rng, shape)
    raise ValueError(f"unknown relaxation flavor {flavor!r}")


def relax_sample(logits, tau: float, noise: np.ndarray):
    """Soft edge values sigma((logit + noise) / tau), differentiable in logits.

    ``noise`` is drawn outside (see ``draw_noise``) so the whole forward
    pass stays deterministic given the run's substreams.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    return dc.sigmoid(dc.scalar_mul(dc.add(logits, Tensor(noise)), 1.0 / tau))


def kl_to_prior(probs, prior_probs):
    """Sum of KL(Ber(p) || Ber(delta)) over an edge set.

    Probabilities are clamped to [1e-6, 1-1e-6] for stability; the sum is
    zero iff p equals delta on every edge (within the clamp).
    """
    p = dc.clip(probs if isinstance(probs, Tensor) else Tensor(probs),
                PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = np.clip(np.asarray(prior_probs, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_minus_p = dc.sub(1.0, p)
    term1 = dc.mul(p, dc.sub(dc.log(p), Tensor(np.log(q))))
    term2 = dc.mul(one_minus_p, dc.sub(dc.log(one_minus_p), Tensor(np.log1p(-q))))
    return dc.tsum(dc.add(term1, term2))


# ---------------------------------------------------------------------------
# Prior
# ---------------------------------------------------------------------------

@dataclass
class KnowledgePrior:
    """Bernoulli edge prior: sparse base rate plus an elevated rate on a
    revealed ("known") subset of true word-word edges."""

    delta_base: float = 0.1
    delta_known: float = 0.5
    known_ww: set[tuple[int, int]] = field(default_factory=set)

    def ww_prior(self, i: int, j: int) -> float:
        key = (i, j) if i < j else (j, i)
        return self.delta_known if key in self.known_ww else self.delta_base

    def wo_prior(self, i: int, c: int) -> float:
        return self.delta_base


def nested_known_edges(true_edges: list[tuple[int, int]], alpha: float,
                       seed: int) -> set[tuple[int, int]]:
    """The first floor(alpha * |edges|) of a seeded permutation.

    Using one fixed permutation makes known sets nested across alpha
    values, so prior sweeps compare supersets rather than resamples.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    edges = sorted(tuple(sorted(e)) for e in true_edges)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA1FA)))
    perm = rng.permutation(len(edges))
    n_known = int(len(edges) * alpha)
    return {edges[k] for k in perm[:n_known]}


def build_prior(true_ww_edges: list[tuple[int, int]], alpha: float, seed: int,
                delta_base: float = 0.1, delta_known: float = 0.5) -> KnowledgePrior:
    """Prior with an alpha fraction of true word-word edges revealed."""
    known = nested_known_edges(true_ww_edges, alpha, seed)
    return KnowledgePrior(delta_base=delta_base, delta_known=delta_known,
                          known_ww=known)


# ---------------------------------------------------------------------------
# Ranking and recovery metrics
# ---------------------------------------------------------------------------

def rank_ww_edges(prob_matrix: np.ndarray,
                  exclude: set[tuple[int, int]] = frozenset(),
                  candidates: list[int] | None = None) -> list[tuple[int, int]]:
    """Upper-triangle pairs by descending probability.

    Ties break toward the smaller (i, j); self edges never appear and each
    unordered pair appears once.  ``candidates`` restricts the vertex set.
    """
    n = prob_matrix.shape[0]
    idx = candidates if candidates is not None else range(n)
    idx = sorted(idx)
    pairs = []
    for a, i in enumerate(idx):
        for j in idx[a + 1:]:
            if (i, j) not in exclude:
                pairs.append((-prob_matrix[i, j], i, j))
    pairs.sort()
    return [(i, j) for _, i, j in pairs]


def rank_wo_edges(prob_matrix: np.ndarray,
                  exclude: set[tuple[int, int]] = frozenset(),
                  candidates: list[int] | None = None) -> list[tuple[int, int]]:
    """(word, operator) pairs by descending probability, ties toward
    smaller indices."""
    n, c = prob_matrix.shape
    idx = candidates if candidates is not None else range(n)
    pairs = [(-prob_matrix[i, k], i, k)
             for i in sorted(idx) for k in range(c) if (i, k) not in exclude]
    pairs.sort()
    return [(i, k) for _, i, k in pairs]


def precision_at_k(ranking: list, truth: set, k: int) -> float:
    """|top-k intersect truth| / k, shrinking k to the candidate count."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    top = ranking[:k]
    if not top:
        return 0.0
    return sum(1 for e in top if tuple(e) in truth) / len(top)


def export_ranked_graph(path, ww_probs: np.ndarray, wo_probs: np.ndarray,
                        words: list[str], operators: list[str],
                        exclude_ww: set[tuple[int, int]] = frozenset(),
                        limit: int | None = None) -> None:
    """Ranked edge lists as JSON: {"ww": [...], "wo": [...]}."""
    ww = rank_ww_edges(ww_probs, exclude=exclude_ww)
    wo = rank_wo_edges(wo_probs)
    if limit is not None:
        ww, wo = ww[:limit], wo[:limit]
    payload = {
        "ww": [{"i": words[i], "j": words[j], "prob": float(ww_probs[i, j])}
               for i, j in ww],
        "wo": [{"i": words[i], "c": operators[c], "prob": float(wo_probs[i, c])}
               for i, c in wo],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
