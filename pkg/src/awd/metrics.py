"""Evaluation: perplexity, mutual information, adversary statistics,
saliency reports, and the exact Markov PMI oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import adversary as advmod
from . import autodiff as ad
from .data import SequenceBatch, MarkovSpec
from .model import SeqVAE, reparameterize
from .objectives import reconstruction_term


@dataclass
class EvalRecord:
    neg_elbo: float      # nats per sentence
    recon: float
    kl_latent: float
    ppl: float
    mi: float
    token_count: int
    sentence_count: int


@dataclass
class AdversaryStats:
    score_l1: float = 0.0          # mean |s| per position
    score_sigma: float = 0.0       # mean per-position sigma
    grad_norm: float = 0.0
    drop_freq_by_position: np.ndarray = field(default=None)
    drop_freq_by_token: dict = field(default_factory=dict)


def perplexity(total_nll_bound: float, token_count: int) -> float:
    if token_count <= 0:
        raise ValueError("token_count must be positive")
    return math.exp(total_nll_bound / token_count)


def _log_gauss(z, mu, sigma):
    """log N(z; mu, sigma^2 I), diagonal. Shapes broadcast; sums last axis."""
    return np.sum(-0.5 * np.log(2 * np.pi) - np.log(sigma)
                  - 0.5 * ((z - mu) / sigma) ** 2, axis=-1)


def mutual_information(mus: np.ndarray, sigmas: np.ndarray,
                       gen: np.random.Generator, n_z_samples: int = 1) -> float:
    """I(X;Z) estimate from per-sentence posterior parameters.

    MI = E_x[KL(q(z|x)||p0)] - E_{x,z~q}[log qhat(z) - log p0(z)], where
    qhat is the aggregated posterior (equal-weight Gaussian mixture over
    the given sentences).
    """
    n_x = mus.shape[0]
    if n_x < 2:
        raise ValueError("need at least two sentences")
    kl_term = np.mean(np.sum(0.5 * (mus ** 2 + sigmas ** 2 - 1.0
                                    - 2.0 * np.log(sigmas)), axis=1))
    gaps = []
    for _ in range(n_z_samples):
        z = mus + sigmas * gen.standard_normal(mus.shape)   # (N, D)
        # log qhat(z_n) = logsumexp_m log N(z_n; mu_m, sigma_m) - log N
        comp = _log_gauss(z[:, None, :], mus[None, :, :], sigmas[None, :, :])
        m = comp.max(axis=1, keepdims=True)
        log_qhat = (m[:, 0] + np.log(np.exp(comp - m).sum(axis=1))) - np.log(n_x)
        log_p0 = _log_gauss(z, 0.0, 1.0)
        gaps.append(np.mean(log_qhat - log_p0))
    return float(kl_term - np.mean(gaps))


def posterior_params(model: SeqVAE, batches) -> tuple:
    mus, sigmas = [], []
    for b in batches:
        post = model.encoder(b)
        mus.append(post.mu.data.astype(np.float64))
        sigmas.append(np.exp(post.log_sigma.data.astype(np.float64)))
    return np.concatenate(mus), np.concatenate(sigmas)


# Markov PMI oracle ---------------------------------------------------

def pmi_oracle(spec: MarkovSpec, i: int, states) -> float:
    """Exact PMI(x_i; x_{i-1} | x_{i-2}) under the chain, in nats.

    `states` holds chain state indices covering x_0..x_i. Dropping x_{i-1}
    marginalizes one chain step: p(x_i|x_{i-2}) = (A^2)[x_{i-2}, x_i]; for
    i = 1 the predecessor is the initial state, marginalized under pi.
    """
    if i < 1:
        raise ValueError("position must have a predecessor")
    prev_prev = states[i - 2] if i >= 2 else None
    return pmi_next(spec, prev_prev, states[i - 1], states[i])


def pmi_next(spec: MarkovSpec, prev_prev, prev, nxt) -> float:
    """PMI of observing `nxt` given `prev` vs. marginalizing `prev` out.

    prev_prev is None when `prev` is the first chain state (then the
    marginal is pi-weighted).
    """
    A = spec.transitions
    p_full = A[prev, nxt]
    if prev_prev is None:
        p_reduced = float(spec.pi @ A[:, nxt])
    else:
        p_reduced = float(A[prev_prev] @ A[:, nxt])
    if p_full <= 0 or p_reduced <= 0:
        raise ValueError("zero-probability path")
    return math.log(p_full) - math.log(p_reduced)


def sentence_pmi(spec: MarkovSpec, states) -> np.ndarray:
    """Per-position PMI for dropping each chain token x_j (its effect on
    predicting x_{j+1}); the last token gets 0 (nothing to predict)."""
    out = np.zeros(len(states))
    for j in range(len(states) - 1):
        prev_prev = states[j - 1] if j >= 1 else None
        out[j] = pmi_next(spec, prev_prev, states[j], states[j + 1])
    return out


# adversary statistics -------------------------------------------------

def drop_frequency(hard_keeps, eligibilities, batches=None) -> AdversaryStats:
    """Empirical drop rates per position index and per token type.

    hard_keeps/eligibilities are lists of (B, T) arrays; batches (optional,
    aligned) enable the per-token-type frequencies.
    """
    max_t = max(h.shape[1] for h in hard_keeps)
    drops = np.zeros(max_t)
    counts = np.zeros(max_t)
    tok_drops, tok_counts = {}, {}
    for idx, (keep, elig) in enumerate(zip(hard_keeps, eligibilities)):
        T = keep.shape[1]
        drops[:T] += ((1.0 - keep) * elig).sum(axis=0)
        counts[:T] += elig.sum(axis=0)
        if batches is not None:
            ids = batches[idx].ids[:, :-1]
            for b in range(ids.shape[0]):
                for t in range(T):
                    if elig[b, t] > 0:
                        tok = int(ids[b, t])
                        tok_counts[tok] = tok_counts.get(tok, 0) + 1
                        if keep[b, t] == 0:
                            tok_drops[tok] = tok_drops.get(tok, 0) + 1
    with np.errstate(invalid="ignore"):
        by_pos = np.where(counts > 0, drops / np.maximum(counts, 1), 0.0)
    by_tok = {tok: tok_drops.get(tok, 0) / cnt for tok, cnt in tok_counts.items()}
    return AdversaryStats(drop_freq_by_position=by_pos, drop_freq_by_token=by_tok)


def saliency_report(batch: SequenceBatch, adv, rate: float, vocab=None) -> list:
    """Per-sentence normalized drop saliencies from the score means.

    Saliency = (max - mu_i) / (max - min) over eligible positions (higher
    = more likely dropped); degenerate spread maps to all zeros. Marks the
    K lowest-mean positions as dropped. One dict per sentence.
    """
    dist = adv.score_params(batch)
    mu = dist.mu.data.astype(np.float64)
    elig = dist.eligibility
    k = advmod.compute_K(rate, elig.sum(axis=1))
    hard = advmod.topk_mask(mu, k, elig)
    reports = []
    for b in range(batch.size):
        pos = np.flatnonzero(elig[b] > 0)
        if len(pos) < 1 or batch.lengths[b] < 2:
            raise ValueError("sentence too short for saliency")
        vals = mu[b, pos]
        spread = vals.max() - vals.min()
        if spread <= 0:
            sal = np.zeros(len(pos))
        else:
            sal = (vals.max() - vals) / spread
        tokens = [vocab.token(i) for i in batch.ids[b, pos]] if vocab else \
                 [str(i) for i in batch.ids[b, pos]]
        reports.append({
            "tokens": tokens,
            "positions": pos.tolist(),
            "saliency": sal.tolist(),
            "dropped": np.flatnonzero(hard[b] == 0).tolist(),
        })
    return reports


def format_saliency_line(report: dict) -> str:
    pairs = "\t".join(f"{tok}:{sal:.4f}"
                      for tok, sal in zip(report["tokens"], report["saliency"]))
    return pairs + "\tdropped=" + ",".join(map(str, report["dropped"]))


def adversary_stats(score_trace, sigma_trace, grad_norm_trace) -> AdversaryStats:
    """Windowed means over a training trace of sampled scores, sigmas and
    adversary gradient norms."""
    if not score_trace:
        raise ValueError("empty trace")
    l1 = float(np.mean([np.abs(s).mean() for s in score_trace]))
    sg = float(np.mean([np.mean(s) for s in sigma_trace]))
    gn = float(np.mean(grad_norm_trace)) if grad_norm_trace else 0.0
    return AdversaryStats(score_l1=l1, score_sigma=sg, grad_norm=gn)


# bounds ---------------------------------------------------------------

def iw_bound_rows(model: SeqVAE, batch: SequenceBatch, n_samples: int,
                  gen: np.random.Generator) -> np.ndarray:
    """Importance-weighted log-likelihood lower bound per sentence (nats)."""
    post = model.encoder(batch)
    mu = post.mu.data.astype(np.float64)
    sigma = np.exp(post.log_sigma.data.astype(np.float64))
    ones = model.full_keep_mask(batch)
    targets = batch.ids[:, 1:]
    tmask = batch.pad_mask[:, 1:]
    log_ws = []
    for _ in range(n_samples):
        eps = gen.standard_normal(mu.shape)
        z = mu + sigma * eps
        logits = model.decoder.decode_logits(batch, ones, ad.Tensor(
            z.astype(model.dtype)))
        per_row, _ = reconstruction_term(logits, targets, tmask)
        log_px_z = -per_row.data.astype(np.float64)
        log_w = log_px_z + _log_gauss(z, 0.0, 1.0) - _log_gauss(z, mu, sigma)
        log_ws.append(log_w)
    log_ws = np.stack(log_ws)                              # (S, B)
    m = log_ws.max(axis=0)
    return m + np.log(np.exp(log_ws - m).mean(axis=0))


def evaluate(model: SeqVAE, batches, seed: int, compute_mi: bool = True) -> EvalRecord:
    """Validation metrics with a single posterior sample per sentence."""
    from . import rng as rngmod

    gen = rngmod.stream(seed, "eval")
    tot_recon = tot_kl = 0.0
    n_tok = n_sent = 0
    for b in batches:
        post = model.encoder(b)
        eps = gen.standard_normal(post.mu.shape)
        z = reparameterize(post, eps)
        logits = model.decoder.decode_logits(b, model.full_keep_mask(b), z)
        per_row, _ = reconstruction_term(logits, b.ids[:, 1:], b.pad_mask[:, 1:])
        tot_recon += float(per_row.data.astype(np.float64).sum())
        tot_kl += float(post.kl_to_standard_rows().data.astype(np.float64).sum())
        n_tok += int(b.pad_mask[:, 1:].sum())   # predicted tokens incl. <eos>
        n_sent += b.size
    neg_elbo = tot_recon + tot_kl
    mi = 0.0
    if compute_mi:
        mus, sigmas = posterior_params(model, batches)
        mi = mutual_information(mus, sigmas, rngmod.stream(seed, "eval-mi"))
    return EvalRecord(neg_elbo=neg_elbo / n_sent, recon=tot_recon / n_sent,
                      kl_latent=tot_kl / n_sent,
                      ppl=perplexity(neg_elbo, n_tok), mi=mi,
                      token_count=n_tok, sentence_count=n_sent)
