import numpy as np
import pytest

from awd import data as dt
from awd import rng
from awd.training import TrainConfig, System


def tiny_config(**kw):
    base = dict(seed=0, emb_dim=4, enc_hidden=4, dec_hidden=4, adv_hidden=4,
                latent_dim=2, batch_size=4, max_epochs=3, compute_mi=False,
                warmup_steps=10)
    base.update(kw)
    return TrainConfig(**base)


def tiny_vocab(n_words=3):
    return dt.Vocab(dt.RESERVED + [f"w{i}" for i in range(n_words)])


@pytest.fixture
def tiny_system():
    cfg = tiny_config()
    vocab = tiny_vocab()
    return System.build(cfg.sizes(len(vocab)), seed=1, dtype=np.float64), cfg, vocab


@pytest.fixture
def tiny_batch():
    return dt.batch([[1, 5, 6, 7, 2], [1, 6, 5, 2], [1, 7, 7, 6, 2]])


def rand_batch(gen, n_rows, vocab_size, min_len=2, max_len=8):
    rows = []
    for _ in range(n_rows):
        n = int(gen.integers(min_len, max_len + 1))
        body = gen.integers(5, vocab_size, size=n).tolist()
        rows.append([dt.SOS] + body + [dt.EOS])
    return dt.batch(rows)


def stream(*args):
    return rng.stream(*args)
