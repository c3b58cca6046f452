"""Training objectives: masked autoregressive ELBO, Gaussian KLs,
score regularizer, KL annealing, and the dropout/PMI identity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adversary import ScoreDistribution
from .autodiff import Tensor
from .data import SequenceBatch
from .model import SeqVAE


@dataclass
class LossBreakdown:
    recon: float       # nats, token-summed, batch-averaged
    kl_latent: float
    reg_score: float
    beta: float
    total: float
    total_node: Tensor = None  # graph node for backward(); recon + beta*kl + reg

    def as_dict(self):
        return {"recon": self.recon, "kl": self.kl_latent, "reg": self.reg_score,
                "beta": self.beta, "total": self.total}


def reconstruction_term(logits: Tensor, targets: np.ndarray,
                        target_mask: np.ndarray):
    """Negative log-likelihood of targets under the logits.

    Returns (per_row, mean): per-row token sums (B,) and the batch mean.
    Positions with zero target_mask contribute exactly nothing.
    """
    if np.any((target_mask > 0) & (targets < 0)):
        raise ValueError("invalid target id at an unmasked position")
    lp = ad.log_softmax(logits, axis=-1)
    picked = ad.take_along_last(lp, targets)
    per_row = ad.tsum(-picked * target_mask, axis=1)
    return per_row, ad.tmean(per_row)


def kl_gaussian_standard(mu, sigma):
    """KL(N(mu, sigma^2) || N(0, 1)) summed over the last axis, in nats."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    return float(np.sum(0.5 * (mu ** 2 + sigma ** 2 - 1.0 - 2.0 * np.log(sigma))))


def score_regularizer(dist: ScoreDistribution, lam: float) -> Tensor:
    """lam * sum over eligible positions of KL(p(s_i|x) || N(0,1)),
    averaged over batch rows. Gradient reaches the adversary directly
    (not through gradient reversal)."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    sig2 = ad.exp(dist.log_sigma * 2.0)
    kl = 0.5 * (dist.mu * dist.mu + sig2 - 1.0 - dist.log_sigma * 2.0)
    per_row = ad.tsum(kl * dist.eligibility, axis=1)
    return lam * ad.tmean(per_row)


def anneal_beta(step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / warmup_steps)


def masked_elbo(batch: SequenceBatch, keep_mask, model: SeqVAE,
                eps_z: np.ndarray, beta: float):
    """Single-sample masked ELBO, sign-flipped for minimization.

    Returns (posterior, breakdown); breakdown.total_node = recon + beta*kl
    (the negated ELBO estimate, with reg_score left at 0 for the caller).
    `keep_mask` is a (B, L-1) node or array of keep weights, binary in the
    forward pass.
    """
    from .model import reparameterize

    posterior = model.encoder(batch)
    z = reparameterize(posterior, eps_z)
    logits = model.decoder.decode_logits(batch, keep_mask, z)
    targets = batch.ids[:, 1:]
    target_mask = batch.pad_mask[:, 1:]
    _, recon = reconstruction_term(logits, targets, target_mask)
    kl = ad.tmean(posterior.kl_to_standard_rows())
    total = recon + beta * kl
    breakdown = LossBreakdown(recon=recon.item(), kl_latent=kl.item(),
                              reg_score=0.0, beta=beta, total=total.item(),
                              total_node=total)
    return posterior, breakdown


def wd_identity(p_full: float, p_reduced: float, d: float):
    """Two closed forms of the per-token dropout objective contribution.

    lhs: (1-d) log p_full + d log p_reduced
    rhs: log p_full - d * log(p_full / p_reduced)
    They are algebraically identical; both are returned for checking.
    """
    if p_full <= 0 or p_reduced <= 0:
        raise ValueError("probabilities must be positive")
    lhs = (1.0 - d) * math.log(p_full) + d * math.log(p_reduced)
    rhs = math.log(p_full) - d * math.log(p_full / p_reduced)
    return lhs, rhs
