"""Command-line entry point.

Subcommands: train, eval, generate, interpolate, saliency, make-synthetic,
grid. All randomness flows from --seed; every subcommand is re-runnable to
identical output. AWD_RUN_ROOT sets the default output root.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace


from . import data as dt
from . import metrics as mx
from . import rng as rngmod
from . import training as tr


def parse_config(path, overrides: dict = None) -> tr.TrainConfig:
    text = ""
    if path:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return tr.TrainConfig.from_text(text, overrides)


def _out_dir(args, default_name: str) -> str:
    if args.out:
        return args.out
    root = os.environ.get("AWD_RUN_ROOT", ".")
    return os.path.join(root, default_name)


def _config_overrides(args) -> dict:
    mapping = {"dropout_rate": args.dropout_rate, "lam": args.lam,
               "tau": args.tau, "lr": args.lr, "max_epochs": args.epochs,
               "batch_size": args.batch_size, "adversary": args.adversary,
               "seed": args.seed}
    return {k: v for k, v in mapping.items() if v is not None}


def cmd_train(args) -> int:
    config = parse_config(args.config, _config_overrides(args))
    out = _out_dir(args, "run")
    best, _ = tr.run_training(config, out, quiet=False)
    if best is not None:
        print(f"best neg_elbo={best.neg_elbo:.4f} ppl={best.ppl:.2f} "
              f"kl={best.kl_latent:.4f} mi={best.mi:.4f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = tr.load_checkpoint(args.ckpt)
    system = ckpt.build_system()
    sents = dt.load_corpus(args.data)
    enc = [dt.encode(s, ckpt.vocab) for s in sents]
    batches = dt.batches_for_epoch(enc, ckpt.config.batch_size,
                                   ckpt.config.seed, 0, shuffle=False)
    rec = mx.evaluate(system.model, batches, args.seed or ckpt.config.seed)
    print(f"neg_elbo={rec.neg_elbo:.4f} recon={rec.recon:.4f} "
          f"kl={rec.kl_latent:.4f} ppl={rec.ppl:.2f} mi={rec.mi:.4f} "
          f"tokens={rec.token_count} sentences={rec.sentence_count}")
    return 0


def cmd_generate(args) -> int:
    ckpt = tr.load_checkpoint(args.ckpt)
    system = ckpt.build_system()
    seed = args.seed if args.seed is not None else ckpt.config.seed
    zgen = rngmod.stream(seed, "generate-z")
    sgen = rngmod.stream(seed, "generate-sample")
    for _ in range(args.n):
        z = zgen.standard_normal(ckpt.config.latent_dim)
        ids = system.model.decoder.generate(z, args.max_len, mode=args.mode,
                                            temperature=args.temperature,
                                            gen=sgen)
        print(" ".join(dt.decode(ids, ckpt.vocab)))
    return 0


def _encode_sentence_file(path, vocab) -> dt.SequenceBatch:
    sents = dt.load_corpus(path)
    if not sents:
        raise ValueError(f"{path}: no sentence found")
    return dt.batch([dt.encode(sents[0], vocab)])


def cmd_interpolate(args) -> int:
    ckpt = tr.load_checkpoint(args.ckpt)
    system = ckpt.build_system()
    a = _encode_sentence_file(args.a, ckpt.vocab)
    b = _encode_sentence_file(args.b, ckpt.vocab)
    for ids in system.model.interpolate(a, b, args.steps, args.max_len):
        print(" ".join(dt.decode(ids, ckpt.vocab)))
    return 0


def cmd_saliency(args) -> int:
    ckpt = tr.load_checkpoint(args.ckpt)
    system = ckpt.build_system()
    sents = dt.load_corpus(args.data)
    for sent in sents:
        batch = dt.batch([dt.encode(sent, ckpt.vocab)])
        rep = mx.saliency_report(batch, system.adv,
                                 ckpt.config.dropout_rate, ckpt.vocab)[0]
        print(mx.format_saliency_line(rep))
    return 0


def cmd_make_synthetic(args) -> int:
    if args.kind == "markov":
        spec = dt.planted_chain_spec(min_len=args.min_len, max_len=args.max_len)
        corpus = dt.gen_markov_corpus(spec, args.n, args.seed or 0)
    elif args.kind == "templates":
        from .synthetic import gen_template_corpus
        corpus = gen_template_corpus(args.n, args.seed or 0)
    else:
        raise ValueError(f"unknown corpus kind '{args.kind}'")
    dt.save_corpus(args.out, corpus)
    print(f"wrote {len(corpus)} sentences to {args.out}")
    return 0


def cmd_grid(args) -> int:
    config = parse_config(args.config, _config_overrides(args))
    lrs = [float(x) for x in args.lrs.split(",")]
    rates = [float(x) for x in args.rates.split(",")]
    root = _out_dir(args, "grid")
    for lr in lrs:
        for rate in rates:
            run_dir = os.path.join(root, f"lr{lr}_r{rate}")
            if os.path.exists(run_dir):
                raise RuntimeError(f"refusing to reuse run directory {run_dir}")
            cfg = replace(config, lr=lr, dropout_rate=rate)
            best, _ = tr.run_training(cfg, run_dir, quiet=True)
            if best is not None:
                print(f"lr={lr} R={rate} neg_elbo={best.neg_elbo:.4f} "
                      f"kl={best.kl_latent:.4f} mi={best.mi:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="awd",
                                description="Adversarial word-dropout sequence "
                                            "VAE toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        if ckpt:
            sp.add_argument("--ckpt", required=True)

    def train_flags(sp):
        sp.add_argument("--config", default=None)
        sp.add_argument("--dropout-rate", dest="dropout_rate", type=float)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--adversary", choices=["on", "uniform", "off"])

    sp = sub.add_parser("train", help="train a model into a run directory")
    common(sp)
    train_flags(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    common(sp, ckpt=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("generate", help="sample sentences from the prior")
    common(sp, ckpt=True)
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--max-len", dest="max_len", type=int, default=40)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("interpolate",
                        help="decode along the line between two posteriors")
    common(sp, ckpt=True)
    sp.add_argument("--a", required=True, help="file with the first sentence")
    sp.add_argument("--b", required=True, help="file with the second sentence")
    sp.add_argument("--steps", type=int, default=3)
    sp.add_argument("--max-len", dest="max_len", type=int, default=40)
    sp.set_defaults(fn=cmd_interpolate)

    sp = sub.add_parser("saliency", help="per-token drop scores for sentences")
    common(sp, ckpt=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(fn=cmd_saliency)

    sp = sub.add_parser("make-synthetic", help="write a synthetic corpus")
    sp.add_argument("--kind", choices=["markov", "templates"], default="markov")
    sp.add_argument("--n", type=int, default=5000)
    sp.add_argument("--min-len", dest="min_len", type=int, default=8)
    sp.add_argument("--max-len", dest="max_len", type=int, default=12)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_make_synthetic)

    sp = sub.add_parser("grid", help="cross product of lr x dropout-rate runs")
    common(sp)
    train_flags(sp)
    sp.add_argument("--lrs", default="0.0001,0.001,0.1,1")
    sp.add_argument("--rates", default="0.2,0.3,0.4,0.5")
    sp.add_argument("--parallel", type=int, default=1)
    sp.set_defaults(fn=cmd_grid)
    return p


def dispatch(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main():
    raise SystemExit(dispatch())


if __name__ == "__main__":
    main()
