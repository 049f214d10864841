"""Contrastive losses on a pairing plan, with exact gradients w.r.t. embeddings.

Every per-pair term is ``-log softmax`` of the positive logit against the
positive plus the negatives of the anchor. Terms are averaged within each
direction and the direction means are summed, which gives the two-normalizer
forward/backward form for ordered plans and a plain mean otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pairing import PairTerm, PairingPlan

NEG_L2 = "neg_l2"
COSINE = "cosine"


@dataclass(frozen=True)
class SimilarityKind:
    kind: str = NEG_L2
    temperature: float = 1.0
    squared: bool = False  # NEG_L2 only

    def __post_init__(self):
        if self.kind not in (NEG_L2, COSINE):
            raise ValueError(f"unknown similarity {self.kind!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class LossOutput:
    value: float
    grad: np.ndarray
    term_values: np.ndarray


def similarity(u, v, sim: SimilarityKind = SimilarityKind()) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if sim.kind == COSINE:
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            raise ValueError("cosine similarity of a zero vector")
        return float(u @ v / (nu * nv * sim.temperature))
    d2 = float(np.sum((u - v) ** 2))
    return -(d2 if sim.squared else math.sqrt(d2)) / sim.temperature


def similarity_matrix(V: np.ndarray, sim: SimilarityKind = SimilarityKind()):
    """Pairwise similarities and the cached quantities needed for backprop."""
    V = np.asarray(V, dtype=float)
    if sim.kind == COSINE:
        norms = np.linalg.norm(V, axis=1)
        if np.any(norms == 0):
            raise ValueError("cosine similarity of a zero vector")
        N = V / norms[:, None]
        return N @ N.T / sim.temperature, (N, norms)
    diff = V[:, None, :] - V[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    if sim.squared:
        return -d2 / sim.temperature, None
    dist = np.sqrt(d2)
    return -dist / sim.temperature, dist


def similarity_backward(V, G, cache, sim: SimilarityKind = SimilarityKind()) -> np.ndarray:
    """Gradient w.r.t. ``V`` given ``G = dLoss/dS`` for the symmetric matrix S."""
    H = G + G.T
    tau = sim.temperature
    if sim.kind == COSINE:
        N, norms = cache
        dN = H @ N / tau
        radial = np.sum(dN * N, axis=1, keepdims=True)
        return (dN - radial * N) / norms[:, None]
    if sim.squared:
        return -2.0 / tau * (H.sum(axis=1)[:, None] * V - H @ V)
    dist = cache
    K = np.zeros_like(H)
    nz = dist > 0  # subgradient 0 at coincident points
    K[nz] = H[nz] / dist[nz]
    return -1.0 / tau * (K.sum(axis=1)[:, None] * V - K @ V)


def _logsumexp(z) -> float:
    m = max(z)
    return m + math.log(math.fsum(math.exp(x - m) for x in z))


def pair_term_loss(term: PairTerm, embeddings, sim: SimilarityKind = SimilarityKind()) -> float:
    """``-log p(positive | anchor, negatives)`` for a single term."""
    if not term.negatives:
        raise ValueError("pair term without negatives")
    V = np.asarray(embeddings, dtype=float)
    s_ap = similarity(V[term.anchor], V[term.positive], sim)
    logits = [s_ap] + [similarity(V[term.anchor], V[n], sim) for n in term.negatives]
    return _logsumexp(logits) - s_ap


def term_weights(plan: PairingPlan) -> np.ndarray:
    """Per-term weight 1/|terms in the same direction|."""
    w = np.zeros(len(plan))
    for d in np.unique(plan.directions):
        sel = plan.directions == d
        w[sel] = 1.0 / np.count_nonzero(sel)
    return w


def contrastive_loss(plan: PairingPlan, embeddings, sim: SimilarityKind = SimilarityKind()) -> LossOutput:
    V = np.asarray(embeddings, dtype=float)
    if len(plan) == 0:
        return LossOutput(0.0, np.zeros_like(V), np.zeros(0))
    if plan.batch_size != len(V):
        raise ValueError(f"plan covers {plan.batch_size} elements, got {len(V)} embeddings")
    S, cache = similarity_matrix(V, sim)
    T = len(plan)
    rows = np.arange(T)
    member = plan.negatives.copy()
    member[rows, plan.positives] = True
    logits = np.where(member, S[plan.anchors], -np.inf)
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    sums = ex.sum(axis=1)
    lse = m[:, 0] + np.log(sums)
    s_ap = S[plan.anchors, plan.positives]
    terms = lse - s_ap

    w = term_weights(plan)
    value = float(np.dot(w, terms))
    soft = ex / sums[:, None]
    soft[rows, plan.positives] -= 1.0
    G = np.zeros_like(S)
    np.add.at(G, plan.anchors, w[:, None] * soft)
    grad = similarity_backward(V, G, cache, sim)
    return LossOutput(value, grad, terms)


# Named entry points; all share the same reduction rule.
chronocon_loss = contrastive_loss
ordinal_loss = contrastive_loss
rnc_loss = contrastive_loss
rnc_time_loss = contrastive_loss
simclr_loss = contrastive_loss


def dae_loss(inputs, noisy_inputs, reconstructions):
    """Mean squared reconstruction error against the clean inputs and its gradient."""
    x = np.asarray(inputs, dtype=float)
    r = np.asarray(reconstructions, dtype=float)
    if x.shape != r.shape or np.shape(noisy_inputs) != x.shape:
        raise ValueError(f"shape mismatch: {x.shape}, {np.shape(noisy_inputs)}, {r.shape}")
    diff = r - x
    n = diff.size
    if n == 0:
        return 0.0, np.zeros_like(r)
    return float(np.sum(diff * diff) / n), 2.0 * diff / n
