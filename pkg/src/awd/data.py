"""Corpus ingestion, vocabulary, batching, and synthetic Markov corpora."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import rng

PAD, SOS, EOS, UNK, MSK = 0, 1, 2, 3, 4
RESERVED = ["<pad>", "<sos>", "<eos>", "_unk", "<msk>"]


@dataclass
class Vocab:
    itos: list
    stoi: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stoi:
            self.stoi = {tok: i for i, tok in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            itos = [line.rstrip("\n") for line in fh]
        if itos[:5] != RESERVED:
            raise ValueError(f"vocab file {path} is missing the reserved header")
        return cls(itos)


@dataclass
class SequenceBatch:
    ids: np.ndarray        # (B, L) int64, <pad>-padded
    lengths: np.ndarray    # (B,) true lengths incl. <sos>/<eos>

    @property
    def pad_mask(self) -> np.ndarray:
        return (np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]).astype(np.float64)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def max_len(self) -> int:
        return self.ids.shape[1]


def load_corpus(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh if line.strip()]


def save_corpus(path, corpus) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sent in corpus:
            fh.write(" ".join(sent) + "\n")


def build_vocab(corpus, min_freq: int = 1, max_size: int = 10000) -> Vocab:
    if min_freq < 1 or max_size <= len(RESERVED):
        raise ValueError("min_freq >= 1 and max_size > 5 required")
    counts = Counter(tok for sent in corpus for tok in sent)
    # most frequent first, ties lexicographic
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, c in ranked if c >= min_freq][: max_size - len(RESERVED)]
    return Vocab(RESERVED + kept)


def encode(sentence, vocab: Vocab) -> list:
    return [SOS] + [vocab.id(tok) for tok in sentence] + [EOS]


def decode(ids, vocab: Vocab) -> list:
    return [vocab.token(i) for i in ids if i not in (PAD, SOS, EOS)]


def batch(encoded) -> SequenceBatch:
    if not encoded:
        raise ValueError("cannot batch an empty list")
    lengths = np.array([len(seq) for seq in encoded], dtype=np.int64)
    out = np.full((len(encoded), int(lengths.max())), PAD, dtype=np.int64)
    for i, seq in enumerate(encoded):
        out[i, : len(seq)] = seq
    return SequenceBatch(out, lengths)


def batches_for_epoch(encoded, batch_size: int, seed: int, epoch: int,
                      shuffle: bool = True) -> list:
    """Deterministically shuffled mini-batches for one epoch."""
    order = np.arange(len(encoded))
    if shuffle:
        rng.stream(seed, "epoch-shuffle", epoch).shuffle(order)
    return [batch([encoded[i] for i in order[lo: lo + batch_size]])
            for lo in range(0, len(order), batch_size)]


# synthetic Markov corpora -------------------------------------------

@dataclass
class MarkovSpec:
    states: list                 # token strings
    pi: np.ndarray               # (S,) initial distribution
    transitions: np.ndarray      # (S, S) row-stochastic
    min_len: int
    max_len: int

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        if abs(self.pi.sum() - 1.0) > 1e-9:
            raise ValueError("initial distribution must sum to 1")
        rows = self.transitions.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-9):
            raise ValueError("transition rows must sum to 1")
        if np.any(rows == 0):
            raise ValueError("degenerate transition row")


def gen_markov_corpus(spec: MarkovSpec, n: int, seed: int) -> list:
    gen = rng.stream(seed, "markov-corpus")
    n_states = len(spec.states)
    corpus = []
    for _ in range(n):
        length = int(gen.integers(spec.min_len, spec.max_len + 1))
        s = int(gen.choice(n_states, p=spec.pi))
        sent = [spec.states[s]]
        for _ in range(length - 1):
            s = int(gen.choice(n_states, p=spec.transitions[s]))
            sent.append(spec.states[s])
        corpus.append(sent)
    return corpus


def planted_chain_spec(strong: float = 0.97, min_len: int = 8, max_len: int = 12) -> MarkovSpec:
    """4-state chain with one high-PMI transition a->b; rows c, d uniform."""
    states = ["a", "b", "c", "d"]
    weak = (1.0 - strong) / 3.0
    A = np.full((4, 4), 0.25)
    A[0] = [weak, strong, weak, weak]
    return MarkovSpec(states, np.full(4, 0.25), A, min_len, max_len)
