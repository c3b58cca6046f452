"""Synthetic template corpus: miniature natural-style sentences with
latent "theme" structure. Each sentence realizes one theme; the theme is
recoverable from the full sentence but, once words are dropped from the
decoder input, only from the latent code."""

from __future__ import annotations

from . import rng as rngmod

_SUBJECTS = ["cat", "dog", "bird", "fox", "horse", "mouse", "owl", "wolf",
             "bear", "deer", "frog", "crab"]
_VERBS = ["chases", "watches", "follows", "ignores", "greets", "carries",
          "finds", "leads", "guards", "feeds", "paints", "draws"]
_OBJECTS = ["ball", "stone", "leaf", "stick", "rope", "lamp", "book", "cup",
            "bell", "coin", "drum", "kite"]
_PLACES = ["garden", "forest", "river", "meadow", "harbor", "market",
           "valley", "bridge", "castle", "desert", "island", "tower"]


def gen_template_corpus(n: int, seed: int, n_themes: int = 24) -> list:
    """Sentences of the form 'the S V the O in the P'; a theme pins
    (S, V, O, P) jointly, with one synonym coin-flip per content slot."""
    gen = rngmod.stream(seed, "template-corpus")
    theme_gen = rngmod.stream(seed ^ 0x5EED, "template-themes")
    themes = []
    for _ in range(n_themes):
        themes.append({
            "s": theme_gen.choice(len(_SUBJECTS), size=2, replace=False),
            "v": theme_gen.choice(len(_VERBS), size=2, replace=False),
            "o": theme_gen.choice(len(_OBJECTS), size=2, replace=False),
            "p": theme_gen.choice(len(_PLACES), size=2, replace=False),
        })
    corpus = []
    for _ in range(n):
        th = themes[int(gen.integers(n_themes))]
        s = _SUBJECTS[th["s"][int(gen.integers(2))]]
        v = _VERBS[th["v"][int(gen.integers(2))]]
        o = _OBJECTS[th["o"][int(gen.integers(2))]]
        p = _PLACES[th["p"][int(gen.integers(2))]]
        corpus.append(["the", s, v, "the", o, "in", "the", p])
    return corpus
