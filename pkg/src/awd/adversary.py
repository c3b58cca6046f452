"""Learned dropout adversary.

A causal LSTM assigns each decoder-input position a Gaussian score
distribution. A score is sampled per position; the K smallest eligible
scores are dropped (hard, exact-K). The backward pass sees a relaxed
iterative-softmax version of the selection through a straight-through
node, and gradient reversal on the sampled scores makes the adversary
descend the objective the VAE ascends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SequenceBatch
from .model import LOGSIG_LIMIT, Linear, LSTMCell, ModelSizes, Params


@dataclass
class ScoreDistribution:
    mu: Tensor             # (B, T) per-position score mean
    log_sigma: Tensor      # (B, T) clamped
    eligibility: np.ndarray  # (B, T) binary; 1 = droppable

    @property
    def sigma(self) -> Tensor:
        return ad.exp(self.log_sigma)


@dataclass
class DropMask:
    keep: Tensor           # straight-through node, binary in forward, (B, T)
    hard_keep: np.ndarray  # forward value (1 = keep, 0 = drop)
    soft_drop: Tensor      # relaxed drop weights in [0, 1]
    k_per_row: np.ndarray  # (B,)
    eligibility: np.ndarray
    score_dist: ScoreDistribution = None


class Adversary:
    def __init__(self, params: Params, sizes: ModelSizes, gen, dtype=np.float32):
        self.sizes = sizes
        self.dtype = dtype
        self.emb = params.new("adv.emb", (sizes.vocab, sizes.emb), gen, dtype=dtype)
        self.lstm = LSTMCell(params, "adv.lstm", sizes.emb, sizes.adv_hidden, gen, dtype)
        self.head = Linear(params, "adv.head", sizes.adv_hidden, 2, gen, dtype)

    def score_params(self, batch: SequenceBatch) -> ScoreDistribution:
        """Per-position (mu, sigma) over decoder-input positions 0..L-2.

        The LSTM is unidirectional, so position t's parameters depend only
        on tokens up to t.
        """
        input_ids = batch.ids[:, :-1]
        B, T = input_ids.shape
        emb = ad.gather_rows(self.emb, input_ids)
        h = Tensor(np.zeros((B, self.sizes.adv_hidden), dtype=self.dtype))
        c = Tensor(np.zeros_like(h.data))
        stats = []
        for t in range(T):
            h, c = self.lstm(emb[:, t, :], h, c)
            stats.append(self.head(h))                     # (B, 2)
        stats = ad.stack(stats, axis=1)                    # (B, T, 2)
        mu = stats[:, :, 0]
        log_sigma = ad.clip(stats[:, :, 1], -LOGSIG_LIMIT, LOGSIG_LIMIT)
        return ScoreDistribution(mu, log_sigma, eligibility(batch))


def eligibility(batch: SequenceBatch) -> np.ndarray:
    """Droppable decoder-input positions: <sos> through the last real token.

    Position t feeds the prediction of token t+1; <eos> (a target only)
    and pads are never maskable.
    """
    T = batch.max_len - 1
    return (np.arange(T)[None, :] <= batch.lengths[:, None] - 2).astype(np.float64)


def sample_scores(dist: ScoreDistribution, eps: np.ndarray) -> Tensor:
    return dist.mu + dist.sigma * Tensor(eps.astype(dist.mu.dtype))


def compute_K(rate: float, eligible_count) -> np.ndarray:
    """K = round-half-away-from-zero(rate * T), clamped to [0, T]."""
    t = np.asarray(eligible_count, dtype=np.float64)
    k = np.floor(rate * t + 0.5)  # rate*t >= 0, so this is half-away-from-zero
    return np.clip(k, 0, t).astype(np.int64)


def topk_mask(scores: np.ndarray, k_per_row: np.ndarray,
              elig: np.ndarray) -> np.ndarray:
    """Hard keep mask: per row the K eligible positions with smallest
    scores get 0 (dropped); ties broken by lowest index."""
    B, T = scores.shape
    keep = np.ones((B, T), dtype=np.float64)
    ranked = np.where(elig > 0, scores, np.inf)
    order = np.argsort(ranked, axis=1, kind="stable")
    for b in range(B):
        k = int(min(k_per_row[b], elig[b].sum()))
        keep[b, order[b, :k]] = 0.0
    return keep


def relaxed_topk(scores: Tensor, k_per_row: np.ndarray, tau: float,
                 elig: np.ndarray) -> Tensor:
    """Differentiable drop weights via K rounds of masked softmax.

    Each round takes softmax(-s/tau) over the remaining eligible mass,
    adds it to the drop weights and removes the selected mass. Row sums
    equal that row's K before the final [0, 1] clamp.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    B, T = scores.shape
    logits = scores * (-1.0 / tau)
    alive = Tensor(elig.astype(scores.dtype))
    soft = Tensor(np.zeros((B, T), dtype=scores.dtype))
    max_k = int(k_per_row.max()) if len(k_per_row) else 0
    for r in range(max_k):
        active = (k_per_row > r).astype(scores.dtype)[:, None]
        # renormalize per round: at low tau the selected position's residual
        # mass underflows, so the shift must track the remaining live mass
        live = (alive.data > 1e-12) & (elig > 0)
        any_live = live.any(axis=1, keepdims=True)
        shift = np.where(live, logits.data, -np.inf).max(axis=1, keepdims=True)
        shift = np.where(any_live, shift, 0.0)
        pen = np.where(live, -np.broadcast_to(shift, (B, T)),
                       -1e9 - logits.data).astype(scores.dtype)
        w = alive * ad.exp(logits + pen)
        den = ad.tsum(w, axis=1, keepdims=True) + (1.0 - any_live)
        p = (w / den) * active
        soft = soft + p
        alive = alive * (1.0 - p)
    return ad.clip(soft, 0.0, 1.0)


def adversary_mask(batch: SequenceBatch, adv: Adversary, rate: float,
                   tau: float, gen: np.random.Generator) -> DropMask:
    """Sample a mask; scores pass through gradient reversal so one backward
    pass trains the adversary against the VAE."""
    elig = eligibility(batch)
    if rate == 0.0:
        hard = np.ones_like(elig)
        keep = Tensor(hard.astype(adv.dtype))
        return DropMask(keep, hard, Tensor(np.zeros_like(hard, dtype=adv.dtype)),
                        np.zeros(batch.size, dtype=np.int64), elig)
    dist = adv.score_params(batch)
    eps = gen.standard_normal(dist.mu.shape)
    s = ad.reverse_grad(sample_scores(dist, eps))
    k = compute_K(rate, elig.sum(axis=1))
    hard_keep = topk_mask(s.data, k, elig)
    soft_drop = relaxed_topk(s, k, tau, elig)
    keep = ad.straight_through(hard_keep, 1.0 - soft_drop)
    return DropMask(keep, hard_keep, soft_drop, k, elig, dist)


def uniform_dropout_mask(batch: SequenceBatch, rate: float,
                         gen: np.random.Generator, dtype=np.float32) -> DropMask:
    """Exact-K drops chosen uniformly without replacement; no gradient path."""
    elig = eligibility(batch)
    k = compute_K(rate, elig.sum(axis=1))
    hard = np.ones_like(elig)
    for b in range(batch.size):
        pos = np.flatnonzero(elig[b] > 0)
        if k[b] > 0:
            drop = gen.choice(pos, size=int(min(k[b], len(pos))), replace=False)
            hard[b, drop] = 0.0
    return DropMask(Tensor(hard.astype(dtype)), hard,
                    Tensor((1.0 - hard).astype(dtype)), k, elig)
