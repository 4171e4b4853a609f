"""Seeded slot-filling grammar with garden-path ambiguity.

Every sentence belongs to one domain, signalled by a single cue word. Names
such as "paris" or "jordan" are tagged as an artist, a city or a restaurant
depending on that domain, so a name seen before the cue can only be labelled
correctly once the cue arrives. Cues are placed early, mid-sentence or late.
Music is the most frequent domain and some music sentences have no cue, so
"artist" is the reading to fall back on until a cue says otherwise.
"""
from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .corpus import Corpus, Sentence

DOMAINS = {
    "music": ("artist", ("play", "listen", "song", "album")),
    "travel": ("city", ("fly", "flight", "trip", "hotel")),
    "food": ("restaurant", ("eat", "dinner", "table", "menu")),
}
# Skewed domain prior: before the cue there is a sensible default reading
# (music), which a late travel or food cue overturns.
DOMAIN_WEIGHTS = (0.55, 0.25, 0.20)
# share of default-domain sentences that carry no cue at all
NO_CUE_RATE = 0.07
NAMES = ("jordan", "paris", "phoenix", "georgia", "madison", "austin", "florence", "victoria")
TIMES = (("tonight",), ("tomorrow",), ("monday",), ("friday",), ("next", "week"))
COUNTS = ("two", "three", "four", "five")
FILLERS = ("i", "want", "to", "a", "the", "please", "me", "for", "at", "with",
           "some", "and", "near", "by", "on", "in", "find", "book", "show", "like")

Chunk = List[Tuple[str, str]]


def _fillers(rng: np.random.Generator, lo: int, hi: int) -> Chunk:
    n = int(rng.integers(lo, hi + 1))
    return [(FILLERS[int(rng.integers(len(FILLERS)))], "O") for _ in range(n)]


def _name(rng: np.random.Generator, etype: str) -> Chunk:
    n = 1 if rng.random() < 0.7 else 2
    picks = rng.choice(len(NAMES), size=n, replace=False)
    return [(NAMES[int(i)], ("B-" if j == 0 else "I-") + etype) for j, i in enumerate(picks)]


def _other_slot(rng: np.random.Generator) -> Chunk:
    if rng.random() < 0.5:
        words = TIMES[int(rng.integers(len(TIMES)))]
        return [(w, ("B-" if j == 0 else "I-") + "time") for j, w in enumerate(words)]
    return [(COUNTS[int(rng.integers(len(COUNTS)))], "B-count")]


def generate_sentence(rng: np.random.Generator, n_names: Tuple[int, int] = (1, 3),
                      n_other: Tuple[int, int] = (0, 2)) -> Sentence:
    domain = list(DOMAINS)[int(rng.choice(len(DOMAINS), p=DOMAIN_WEIGHTS))]
    etype, cues = DOMAINS[domain]
    slots: List[Chunk] = [_name(rng, etype) for _ in range(int(rng.integers(n_names[0], n_names[1] + 1)))]
    slots += [_other_slot(rng) for _ in range(int(rng.integers(n_other[0], n_other[1] + 1)))]
    order = rng.permutation(len(slots))
    body: Chunk = []
    for i in order:
        body += _fillers(rng, 1, 2) + slots[int(i)]
    cue = [(cues[int(rng.integers(len(cues)))], "O")]
    r = rng.random()
    if domain == list(DOMAINS)[0] and rng.random() < NO_CUE_RATE:
        words = body
    elif r < 0.35:
        words = cue + body
    elif r < 0.75:
        words = body + _fillers(rng, 0, 1) + cue
    else:
        # right after a random slot boundary in the body
        cut = int(rng.integers(1, len(body) + 1))
        while cut < len(body) and body[cut][1].startswith("I-"):
            cut += 1
        words = body[:cut] + cue + body[cut:]
    return Sentence(tuple(w for w, _ in words), tuple(lab for _, lab in words))


def generate_corpus(n: int, seed: int, min_len: int = 1, max_len: int = 200,
                    n_names: Tuple[int, int] = (1, 3), n_other: Tuple[int, int] = (0, 2)) -> Corpus:
    """``n`` sentences whose lengths fall in [min_len, max_len] (rejection sampling)."""
    rng = np.random.default_rng(seed)
    out: List[Sentence] = []
    while len(out) < n:
        s = generate_sentence(rng, n_names, n_other)
        if min_len <= len(s) <= max_len:
            out.append(s)
    return Corpus(out, labels=all_labels())


def generate_long_corpus(n: int, seed: int, min_len: int = 20) -> Corpus:
    return generate_corpus(n, seed, min_len=min_len, max_len=200, n_names=(3, 5), n_other=(1, 3))


def all_labels() -> List[str]:
    types = sorted({t for t, _ in DOMAINS.values()} | {"time", "count"})
    return ["O"] + [f"{p}-{t}" for t in types for p in ("B", "I")]

