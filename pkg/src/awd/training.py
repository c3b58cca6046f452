"""Minimax training loop: joint single-backward updates via gradient
reversal, clipped SGD, exponential LR decay, Polyak-averaged evaluation,
early stopping, and binary checkpoints."""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import data as dt
from . import metrics as mx
from . import rng as rngmod
from .adversary import Adversary, adversary_mask, uniform_dropout_mask
from .autodiff import NonFiniteError
from .model import Decoder, Encoder, ModelSizes, Params, SeqVAE
from .objectives import anneal_beta, masked_elbo, score_regularizer

CKPT_MAGIC = b"AWDV"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    train_path: str = ""
    valid_path: str = ""
    vocab_path: str = ""
    dropout_rate: float = 0.3
    lam: float = 1.0
    tau: float = 1.0
    lr: float = 0.1
    lr_decay: float = 0.96
    clip_norm: float = 5.0
    warmup_steps: int = -1      # -1: ten epochs' worth, resolved at run start
    polyak: float = 0.9995
    patience: int = 5
    max_epochs: int = 20
    batch_size: int = 32
    emb_dim: int = 64
    enc_hidden: int = 128
    dec_hidden: int = 128
    adv_hidden: int = 128
    latent_dim: int = 32
    max_vocab: int = 10000
    min_freq: int = 1
    seed: int = 0
    tie_embeddings: bool = False
    adversary: str = "on"       # on | uniform | off
    compute_mi: bool = True

    def validate(self):
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout_rate must be in [0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if not 0.0 <= self.polyak <= 1.0:
            raise ValueError("polyak must be in [0, 1]")
        if self.adversary not in ("on", "uniform", "off"):
            raise ValueError("adversary must be one of on|uniform|off")
        return self

    def sizes(self, vocab_size: int) -> ModelSizes:
        return ModelSizes(vocab=vocab_size, emb=self.emb_dim,
                          enc_hidden=self.enc_hidden, dec_hidden=self.dec_hidden,
                          adv_hidden=self.adv_hidden, latent=self.latent_dim,
                          tie_embeddings=self.tie_embeddings)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, overrides: dict = None) -> "TrainConfig":
        kwargs = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {ln}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            kwargs[key] = val
        kwargs.update(overrides or {})
        cfg = cls()
        for key, val in kwargs.items():
            hit = [f for f in fields(cls) if f.name == key]
            if not hit:
                raise ValueError(f"unknown config key '{key}'")
            f = hit[0]
            if f.type == "bool" or isinstance(getattr(cfg, key), bool):
                val = str(val).lower() in ("1", "true", "yes", "on") \
                    if not isinstance(val, bool) else val
            elif isinstance(getattr(cfg, key), int):
                val = int(val)
            elif isinstance(getattr(cfg, key), float):
                val = float(val)
            setattr(cfg, key, val)
        return cfg.validate()


@dataclass
class System:
    """The three parameter groups plus their Polyak shadow."""
    sizes: ModelSizes
    params: Params
    model: SeqVAE
    adv: Adversary
    polyak: dict = field(default_factory=dict)

    @classmethod
    def build(cls, sizes: ModelSizes, seed: int, dtype=np.float32) -> "System":
        params = Params()
        enc = Encoder(params, sizes, rngmod.stream(seed, "init-enc"), dtype)
        tied = enc.emb if sizes.tie_embeddings else None
        dec = Decoder(params, sizes, rngmod.stream(seed, "init-dec"), dtype,
                      tied_emb=tied)
        adv = Adversary(params, sizes, rngmod.stream(seed, "init-adv"), dtype)
        model = SeqVAE(sizes, params, enc, dec, dtype)
        polyak = {k: v.data.copy() for k, v in params.items()}
        return cls(sizes, params, model, adv, polyak)

    def polyak_step(self, rho: float):
        for name, t in self.params.items():
            avg = self.polyak[name]
            avg *= rho
            avg += (1.0 - rho) * t.data

    def swap_in_polyak(self):
        """Swap averaged weights in for evaluation; returns restore handle."""
        saved = {k: t.data for k, t in self.params.items()}
        for k, t in self.params.items():
            t.data = self.polyak[k]
        return saved

    def restore(self, saved):
        for k, t in self.params.items():
            t.data = saved[k]


def lr_schedule(epoch: int, base_lr: float, gamma: float) -> float:
    return base_lr * gamma ** epoch


def polyak_update(avg: np.ndarray, params: np.ndarray, rho: float) -> np.ndarray:
    return rho * avg + (1.0 - rho) * params


def should_stop(history, patience: int, min_delta: float = 1e-4) -> bool:
    """True iff the best validation neg-ELBO has not improved by at least
    min_delta for `patience` consecutive evaluations."""
    if not history:
        raise ValueError("empty history")
    best = history[0]
    bad = 0
    for v in history[1:]:
        if v <= best - min_delta:
            best = v
            bad = 0
        else:
            bad += 1
    return bad >= patience


def clip_gradients(params: Params, clip_norm: float) -> float:
    """Scale all gradients so the global L2 norm is <= clip_norm.
    Returns the pre-clip norm."""
    sq = 0.0
    for t in params.values():
        if t.grad is not None:
            sq += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(sq))
    if norm > clip_norm > 0:
        scale = np.float32(clip_norm / norm)
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


def train_step(system: System, batch: dt.SequenceBatch, config: TrainConfig,
               step_idx: int, lr: float, freeze_adversary: bool = False):
    """One joint forward/backward/update over theta, phi and psi.

    Returns (LossBreakdown, info dict) or (None, info) if the step was
    skipped on a non-finite loss.
    """
    beta = anneal_beta(step_idx, config.warmup_steps)
    info = {}
    try:
        if config.adversary == "on" and config.dropout_rate > 0:
            gen = rngmod.stream(config.seed, "adv-eps", step_idx)
            mask = adversary_mask(batch, system.adv, config.dropout_rate,
                                  config.tau, gen)
        elif config.adversary == "uniform" and config.dropout_rate > 0:
            gen = rngmod.stream(config.seed, "uniform-mask", step_idx)
            mask = uniform_dropout_mask(batch, config.dropout_rate, gen,
                                        system.model.dtype)
        else:
            mask = None
        keep = mask.keep if mask is not None else system.model.full_keep_mask(batch)
        eps_z = rngmod.stream(config.seed, "eps-z", step_idx).standard_normal(
            (batch.size, config.latent_dim))
        _, breakdown = masked_elbo(batch, keep, system.model, eps_z, beta)
        total = breakdown.total_node
        if config.adversary == "on" and config.dropout_rate > 0 and mask.score_dist is not None:
            reg = score_regularizer(mask.score_dist, config.lam)
            breakdown.reg_score = reg.item()
            total = total + reg
            breakdown.total = total.item()
            breakdown.total_node = total
            info["score_abs_mean"] = float(np.abs(
                mask.score_dist.mu.data).mean())
            info["score_sigma_mean"] = float(np.exp(
                mask.score_dist.log_sigma.data).mean())
        system.params.zero_grads()
        total.backward()
    except NonFiniteError as err:
        system.params.zero_grads()
        return None, {"skipped": str(err)}
    info["grad_norm"] = clip_gradients(system.params, config.clip_norm)
    adv_sq = sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                 for k, t in system.params.items()
                 if k.startswith("adv.") and t.grad is not None)
    info["adv_grad_norm"] = float(np.sqrt(adv_sq))
    lr_t = np.float32(lr) if system.model.dtype == np.float32 else lr
    for name, t in system.params.items():
        if freeze_adversary and name.startswith("adv."):
            continue
        if t.grad is not None:
            t.data = t.data - lr_t * t.grad
    system.polyak_step(config.polyak)
    return breakdown, info


# checkpointing --------------------------------------------------------

def _write_named(buf, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(arr.astype("<f4").tobytes())


def _read_named(buf):
    (nlen,) = struct.unpack("<H", buf.read(2))
    name = buf.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<B", buf.read(1))
    dims = [struct.unpack("<I", buf.read(4))[0] for _ in range(rank)]
    n = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(buf.read(4 * n), dtype="<f4").reshape(dims)
    return name, arr


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: dt.Vocab
    tensors: dict            # name -> float32 ndarray (params + polyak/*)
    counters: dict           # step, epoch, best_val, bad_evals
    rng_seed: int

    def build_system(self) -> System:
        system = System.build(self.config.sizes(len(self.vocab)),
                              self.config.seed)
        for name, t in system.params.items():
            stored = self.tensors.get(name)
            if stored is None:
                raise ValueError(f"checkpoint missing tensor '{name}'")
            if stored.shape != t.data.shape:
                raise ValueError(
                    f"dimension mismatch for tensor '{name}': "
                    f"checkpoint {stored.shape} vs config {t.data.shape}")
            t.data = stored.copy()
            system.polyak[name] = self.tensors[f"polyak/{name}"].copy()
        return system


def save_checkpoint(path, system: System, config: TrainConfig,
                    vocab: dt.Vocab, counters: dict):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<B", CKPT_VERSION))
    cfg_text = config.to_text().encode("utf-8")
    vocab_text = "\n".join(vocab.itos).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_text)))
    buf.write(cfg_text)
    buf.write(struct.pack("<I", len(vocab_text)))
    buf.write(vocab_text)
    names = list(system.params)
    buf.write(struct.pack("<I", 2 * len(names)))
    for name in names:
        _write_named(buf, name, system.params[name].data)
    for name in names:
        _write_named(buf, f"polyak/{name}", system.polyak[name])
    opt_items = [("opt.step", counters.get("step", 0)),
                 ("opt.epoch", counters.get("epoch", 0)),
                 ("opt.best_val", counters.get("best_val", float("inf"))),
                 ("opt.bad_evals", counters.get("bad_evals", 0))]
    buf.write(struct.pack("<I", len(opt_items)))
    for name, val in opt_items:
        _write_named(buf, name, np.asarray(float(val) if np.isfinite(val)
                                           else np.float32(np.inf)))
    # RNG section: streams are derived from (seed, label, counters), so
    # the seed is the whole replayable state.
    buf.write(struct.pack("<I", 1))
    _write_named(buf, "rng.seed", np.asarray(float(config.seed)))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if buf.read(4) != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<B", buf.read(1))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", buf.read(4))
    config = TrainConfig.from_text(buf.read(clen).decode("utf-8"))
    (vlen,) = struct.unpack("<I", buf.read(4))
    vocab = dt.Vocab(buf.read(vlen).decode("utf-8").split("\n"))
    (count,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(count):
        name, arr = _read_named(buf)
        tensors[name] = arr
    (opt_count,) = struct.unpack("<I", buf.read(4))
    counters = {}
    for _ in range(opt_count):
        name, arr = _read_named(buf)
        counters[name.removeprefix("opt.")] = float(arr)
    (rng_count,) = struct.unpack("<I", buf.read(4))
    rng_seed = 0
    for _ in range(rng_count):
        name, arr = _read_named(buf)
        if name == "rng.seed":
            rng_seed = int(arr)
    counters = {"step": int(counters.get("step", 0)),
                "epoch": int(counters.get("epoch", 0)),
                "best_val": counters.get("best_val", float("inf")),
                "bad_evals": int(counters.get("bad_evals", 0))}
    return Checkpoint(config, vocab, tensors, counters, rng_seed)


# training loop ----------------------------------------------------------

def format_metrics_line(rec: dict) -> str:
    return " ".join(f"{k}={rec[k]:.6g}" for k in
                    ("step", "neg_elbo", "recon", "kl", "reg", "beta", "ppl",
                     "mi", "s_l1", "s_sigma", "adv_grad_norm"))


def run_training(config: TrainConfig, out_dir, corpora=None, quiet: bool = True):
    """Full training protocol. Returns (best EvalRecord, metrics records).

    `corpora` optionally supplies (train_sentences, valid_sentences) in
    place of reading config.train_path / config.valid_path.
    """
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    if corpora is not None:
        train_sents, valid_sents = corpora
    else:
        train_sents = dt.load_corpus(config.train_path)
        valid_sents = dt.load_corpus(config.valid_path)
    if config.vocab_path:
        vocab = dt.Vocab.load(config.vocab_path)
    else:
        vocab = dt.build_vocab(train_sents, config.min_freq, config.max_vocab)
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    with open(os.path.join(out_dir, "config.cfg"), "w") as fh:
        fh.write(config.to_text())

    train_enc = [dt.encode(s, vocab) for s in train_sents]
    valid_enc = [dt.encode(s, vocab) for s in valid_sents]
    valid_batches = dt.batches_for_epoch(valid_enc, config.batch_size,
                                         config.seed, 0, shuffle=False)
    steps_per_epoch = (len(train_enc) + config.batch_size - 1) // config.batch_size
    if config.warmup_steps < 0:
        config = replace(config, warmup_steps=10 * steps_per_epoch)

    system = System.build(config.sizes(len(vocab)), config.seed)
    return _train_loop(system, config, vocab, train_enc, valid_batches,
                       out_dir, counters=None, quiet=quiet)


def resume_training(ckpt: Checkpoint, out_dir, corpora=None,
                    max_epochs: int = None, quiet: bool = True):
    """Continue a run from a checkpoint, bit-exactly."""
    config = ckpt.config.validate()
    if max_epochs is not None:
        config = replace(config, max_epochs=max_epochs)
    os.makedirs(out_dir, exist_ok=True)
    if corpora is not None:
        train_sents, valid_sents = corpora
    else:
        train_sents = dt.load_corpus(config.train_path)
        valid_sents = dt.load_corpus(config.valid_path)
    vocab = ckpt.vocab
    train_enc = [dt.encode(s, vocab) for s in train_sents]
    valid_enc = [dt.encode(s, vocab) for s in valid_sents]
    valid_batches = dt.batches_for_epoch(valid_enc, config.batch_size,
                                         config.seed, 0, shuffle=False)
    system = ckpt.build_system()
    return _train_loop(system, config, vocab, train_enc, valid_batches,
                       out_dir, counters=ckpt.counters, quiet=quiet)


def _train_loop(system: System, config: TrainConfig, vocab, train_enc,
                valid_batches, out_dir, counters=None, quiet=True):
    counters = counters or {"step": 0, "epoch": 0,
                            "best_val": float("inf"), "bad_evals": 0}
    step = counters["step"]
    history = []
    records = []
    best_record = None
    log_path = os.path.join(out_dir, "metrics.log")
    consecutive_skips = 0
    with open(log_path, "a") as log:
        for epoch in range(counters["epoch"], config.max_epochs):
            lr = lr_schedule(epoch, config.lr, config.lr_decay)
            batches = dt.batches_for_epoch(train_enc, config.batch_size,
                                           config.seed, epoch)
            s_l1 = s_sigma = adv_gn = 0.0
            n_stat = 0
            epoch_losses = []
            for b in batches:
                breakdown, info = train_step(system, b, config, step, lr)
                step += 1
                if breakdown is None:
                    consecutive_skips += 1
                    if consecutive_skips >= 10:
                        raise RuntimeError("training diverged: 10 consecutive "
                                           "non-finite steps")
                    continue
                consecutive_skips = 0
                epoch_losses.append(breakdown)
                if "score_abs_mean" in info:
                    s_l1 += info["score_abs_mean"]
                    s_sigma += info["score_sigma_mean"]
                    adv_gn += info["adv_grad_norm"]
                    n_stat += 1
            saved = system.swap_in_polyak()
            try:
                rec = mx.evaluate(system.model, valid_batches, config.seed,
                                  compute_mi=config.compute_mi)
            finally:
                system.restore(saved)
            history.append(rec.neg_elbo)
            last = epoch_losses[-1] if epoch_losses else None
            record = {"step": step, "neg_elbo": rec.neg_elbo, "recon": rec.recon,
                      "kl": rec.kl_latent,
                      "reg": last.reg_score if last else 0.0,
                      "beta": last.beta if last else 1.0,
                      "ppl": rec.ppl, "mi": rec.mi,
                      "s_l1": s_l1 / max(n_stat, 1),
                      "s_sigma": s_sigma / max(n_stat, 1),
                      "adv_grad_norm": adv_gn / max(n_stat, 1)}
            records.append(record)
            log.write(format_metrics_line(record) + "\n")
            log.flush()
            if not quiet:
                print(format_metrics_line(record))
            counters = {"step": step, "epoch": epoch + 1,
                        "best_val": min(counters["best_val"], rec.neg_elbo),
                        "bad_evals": 0}
            if rec.neg_elbo <= min(history):
                best_record = rec
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), system,
                                config, vocab, counters)
            save_checkpoint(os.path.join(out_dir, "last.ckpt"), system,
                            config, vocab, counters)
            if should_stop(history, config.patience):
                break
    return best_record, records
