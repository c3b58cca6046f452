"""Sequence VAE: LSTM encoder, Double-LSTM autoregressive decoder.

The decoder stacks two LSTM units per step. Unit 1 sees only the latent
vector and the previous hidden state, so a latent-only path to the output
always exists; unit 2 additionally consumes the (possibly masked)
teacher-forced word embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import EOS, MSK, SOS, SequenceBatch

LOGSIG_LIMIT = 8.0


@dataclass
class ModelSizes:
    vocab: int
    emb: int = 64
    enc_hidden: int = 128
    dec_hidden: int = 128
    adv_hidden: int = 128
    latent: int = 32
    tie_embeddings: bool = False


def _init(shape, gen, scale=None, dtype=np.float32):
    scale = scale if scale is not None else 1.0 / np.sqrt(shape[0])
    return gen.uniform(-scale, scale, size=shape).astype(dtype)


class Params(dict):
    """Named parameter tensors; plain dict with convenience constructors."""

    def new(self, name, shape, gen, scale=None, dtype=np.float32) -> Tensor:
        t = Tensor(_init(shape, gen, scale, dtype), is_param=True, name=name)
        self[name] = t
        return t

    def zero_grads(self):
        for t in self.values():
            t.zero_grad()


class LSTMCell:
    def __init__(self, params: Params, prefix: str, n_in: int, n_hidden: int,
                 gen, dtype=np.float32):
        self.H = n_hidden
        self.W = params.new(f"{prefix}.W", (n_in, 4 * n_hidden), gen, dtype=dtype)
        self.U = params.new(f"{prefix}.U", (n_hidden, 4 * n_hidden), gen, dtype=dtype)
        self.b = params.new(f"{prefix}.b", (4 * n_hidden,), gen, scale=0.0, dtype=dtype)

    def __call__(self, x: Tensor, h: Tensor, c: Tensor):
        gates = (x @ self.W) + (h @ self.U) + self.b
        H = self.H
        i = ad.sigmoid(gates[:, 0 * H:1 * H])
        f = ad.sigmoid(gates[:, 1 * H:2 * H])
        g = ad.tanh(gates[:, 2 * H:3 * H])
        o = ad.sigmoid(gates[:, 3 * H:4 * H])
        c_new = f * c + i * g
        h_new = o * ad.tanh(c_new)
        return h_new, c_new


class Linear:
    def __init__(self, params: Params, prefix: str, n_in: int, n_out: int,
                 gen, dtype=np.float32):
        self.W = params.new(f"{prefix}.W", (n_in, n_out), gen, dtype=dtype)
        self.b = params.new(f"{prefix}.b", (n_out,), gen, scale=0.0, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.W) + self.b


@dataclass
class LatentGaussian:
    mu: Tensor        # (B, D)
    log_sigma: Tensor  # (B, D), already clamped

    @property
    def sigma(self) -> Tensor:
        return ad.exp(self.log_sigma)

    def kl_to_standard_rows(self) -> Tensor:
        """Per-row KL(q || N(0, I)) in nats, shape (B,)."""
        sig2 = ad.exp(self.log_sigma * 2.0)
        terms = 0.5 * (self.mu * self.mu + sig2 - 1.0 - self.log_sigma * 2.0)
        return ad.tsum(terms, axis=1)


class Encoder:
    """q(z|x): unidirectional LSTM, final non-pad state -> (mu, log sigma)."""

    def __init__(self, params: Params, sizes: ModelSizes, gen, dtype=np.float32):
        self.sizes = sizes
        self.dtype = dtype
        self.emb = params.new("enc.emb", (sizes.vocab, sizes.emb), gen, dtype=dtype)
        self.lstm = LSTMCell(params, "enc.lstm", sizes.emb, sizes.enc_hidden, gen, dtype)
        self.head = Linear(params, "enc.head", sizes.enc_hidden, 2 * sizes.latent, gen, dtype)

    def __call__(self, batch: SequenceBatch) -> LatentGaussian:
        B, L = batch.ids.shape
        H = self.sizes.enc_hidden
        emb = ad.gather_rows(self.emb, batch.ids)           # (B, L, E)
        h = Tensor(np.zeros((B, H), dtype=self.dtype))
        c = Tensor(np.zeros((B, H), dtype=self.dtype))
        live = batch.pad_mask.astype(self.dtype)            # (B, L)
        for t in range(L):
            m = live[:, t:t + 1]                            # freeze state at pads
            if not m.any():
                break
            h_new, c_new = self.lstm(emb[:, t, :], h, c)
            h = h_new * m + h * (1.0 - m)
            c = c_new * m + c * (1.0 - m)
        stats = self.head(h)
        D = self.sizes.latent
        mu = stats[:, :D]
        log_sigma = ad.clip(stats[:, D:], -LOGSIG_LIMIT, LOGSIG_LIMIT)
        return LatentGaussian(mu, log_sigma)


def reparameterize(g: LatentGaussian, eps: np.ndarray) -> Tensor:
    return g.mu + g.sigma * Tensor(eps.astype(g.mu.dtype))


class Decoder:
    """Double-LSTM p(x_i | masked history, z) with teacher forcing."""

    def __init__(self, params: Params, sizes: ModelSizes, gen,
                 dtype=np.float32, tied_emb: Tensor = None):
        self.sizes = sizes
        self.dtype = dtype
        if tied_emb is not None:
            self.emb = tied_emb
        else:
            self.emb = params.new("dec.emb", (sizes.vocab, sizes.emb), gen, dtype=dtype)
        D, E, H = sizes.latent, sizes.emb, sizes.dec_hidden
        self.lstm1 = LSTMCell(params, "dec.lstm1", D, H, gen, dtype)
        self.lstm2 = LSTMCell(params, "dec.lstm2", D + E, H, gen, dtype)
        self.init_map = Linear(params, "dec.init", D, 3 * H, gen, dtype)
        self.out = Linear(params, "dec.out", H, sizes.vocab, gen, dtype)

    def _initial_state(self, z: Tensor):
        H = self.sizes.dec_hidden
        s = ad.tanh(self.init_map(z))
        return s[:, :H], s[:, H:2 * H], s[:, 2 * H:]

    def step(self, h: Tensor, c1: Tensor, c2: Tensor, z: Tensor, w: Tensor):
        h_mid, c1 = self.lstm1(z, h, c1)
        h_new, c2 = self.lstm2(ad.concat([z, w], axis=1), h_mid, c2)
        return h_new, c1, c2

    def masked_input_embeddings(self, input_ids: np.ndarray, mask: Tensor) -> Tensor:
        """mask[t]*emb(x_t) + (1-mask[t])*emb(<msk>); mask is (B, L-1)."""
        emb = ad.gather_rows(self.emb, input_ids)           # (B, T, E)
        msk = ad.gather_rows(self.emb, np.array([MSK]))     # (1, E)
        m = ad.reshape(mask, (*mask.shape, 1))
        return m * emb + (1.0 - m) * ad.reshape(msk, (1, 1, self.sizes.emb))

    def decode_logits(self, batch: SequenceBatch, mask: Tensor, z: Tensor) -> Tensor:
        """Teacher-forced logits, shape (B, L-1, V)."""
        input_ids = batch.ids[:, :-1]
        if not isinstance(mask, Tensor):
            mask = Tensor(np.asarray(mask, dtype=self.dtype))
        emb_in = self.masked_input_embeddings(input_ids, mask)
        h, c1, c2 = self._initial_state(z)
        logits = []
        for t in range(input_ids.shape[1]):
            h, c1, c2 = self.step(h, c1, c2, z, emb_in[:, t, :])
            logits.append(self.out(h))
        return ad.stack(logits, axis=1)

    def generate(self, z: np.ndarray, max_len: int, mode: str = "greedy",
                 temperature: float = 1.0, gen=None) -> list:
        """Roll forward from <sos> feeding back predictions; no masking."""
        z_t = Tensor(np.asarray(z, dtype=self.dtype).reshape(1, -1))
        h, c1, c2 = self._initial_state(z_t)
        tok = SOS
        out_ids = [SOS]
        for _ in range(max_len - 1):
            w = ad.gather_rows(self.emb, np.array([tok]))
            h, c1, c2 = self.step(h, c1, c2, z_t, w)
            logits = self.out(h).data[0]
            if mode == "greedy":
                tok = int(np.argmax(logits))
            elif mode == "sample":
                scaled = logits.astype(np.float64) / temperature
                scaled -= scaled.max()
                p = np.exp(scaled)
                p /= p.sum()
                tok = int(gen.choice(len(p), p=p))
            else:
                raise ValueError(f"unknown generation mode '{mode}'")
            out_ids.append(tok)
            if tok == EOS:
                break
        return out_ids


@dataclass
class SeqVAE:
    sizes: ModelSizes
    params: Params
    encoder: Encoder
    decoder: Decoder
    dtype: type = np.float32

    @classmethod
    def build(cls, sizes: ModelSizes, gen, dtype=np.float32) -> "SeqVAE":
        params = Params()
        encoder = Encoder(params, sizes, gen, dtype)
        tied = encoder.emb if sizes.tie_embeddings else None
        decoder = Decoder(params, sizes, gen, dtype, tied_emb=tied)
        return cls(sizes, params, encoder, decoder, dtype)

    def full_keep_mask(self, batch: SequenceBatch) -> Tensor:
        return Tensor(np.ones((batch.size, batch.max_len - 1), dtype=self.dtype))

    def interpolate(self, x_a: SequenceBatch, x_b: SequenceBatch, steps: int,
                    max_len: int = 40) -> list:
        """Greedy decodes along the line between posterior means (endpoints included)."""
        mu_a = self.encoder(x_a).mu.data[0]
        mu_b = self.encoder(x_b).mu.data[0]
        outs = []
        for k in range(steps + 2):
            alpha = k / (steps + 1)
            z = (1.0 - alpha) * mu_a + alpha * mu_b
            outs.append(self.decoder.generate(z, max_len, mode="greedy"))
        return outs
