"""WRITE/REVISE supervision from a single-layer Linear Transformer.

The generator is trained causally (it behaves like an RNN), then run
unmasked on every prefix of each training sentence. Because a single LT
layer computes the same final-position output either way, row t ends with
the label the causal model would emit at t, while earlier positions may
change as right context arrives. Those changes become REVISE actions.
"""
from __future__ import annotations

from collections import Counter
from typing import Dict, List, Optional, Sequence

import torch

from .config import Config
from .corpus import PAD_ID, Corpus, DataError, Vocab
from .engine import Counters, PrefixTimeline
from .layers import REVISE, WRITE, Encoder
from .trainer import History, pad, split_train_val, train_encoder

HEADER = "#corpus-sha256="


class SignalError(ValueError):
    pass


def train_action_generator(corpus: Corpus, vocab: Vocab, labels: Sequence[str], cfg: Config,
                           echo=print, val: Optional[Corpus] = None):
    """Causal single-layer LT trained with cross-entropy on the labelling task."""
    s, t = cfg.signal, cfg.train
    if s.layers != 1:
        raise SignalError("the action generator must have exactly one layer")
    if val is None:
        corpus, val = split_train_val(corpus, t.val_fraction, t.seed)
    return train_encoder(
        corpus, val, vocab, labels, kind="lt", layers=1, d_model=s.d_model, ffn=s.ffn_dim, heads=s.heads,
        embed_dim=cfg.model.embed_dim, mask="causal", lr=s.lr, batch=s.batch, clip=s.clip, epochs=s.epochs,
        patience=None, warmup=s.warmup, decay_points=(), dropout_rate=s.dropout, unk_prob=t.unk_prob,
        seed=t.seed, weight_decay=t.weight_decay, eps=t.eps, beta1=t.beta1, beta2=t.beta2,
        embeddings=cfg.paths.embeddings, echo=echo)


def _check_single_layer(model: Encoder) -> None:
    if model.kind != "lt" or model.n_layers != 1:
        raise SignalError("prefix timelines need a single-layer linear-attention encoder")


def collect_prefix_timeline(model: Encoder, ids: Sequence[int], labels: Sequence[str]) -> PrefixTimeline:
    """Row t: argmax of the unmasked forward over x_1..x_t.

    All prefixes go through one padded batch; the key mask keeps padding out
    of the attention sums so each row matches a standalone run.
    """
    _check_single_layer(model)
    n = len(ids)
    if n == 0:
        raise ValueError("empty sentence")
    prefixes = [list(ids[:t]) for t in range(1, n + 1)]
    batch = pad(prefixes, PAD_ID)
    key_mask = pad([[1] * t for t in range(1, n + 1)], 0).bool()
    model.eval()
    with torch.inference_mode():
        pred = model(batch, key_mask, "none").argmax(-1)
    rows = [[labels[int(i)] for i in pred[t - 1, :t]] for t in range(1, n + 1)]
    counters = Counters(reviser_calls=n, reviser_tokens=n * (n + 1) // 2)
    return PrefixTimeline(rows, [REVISE] * n, [1.0] * n, 0, counters)


def derive_actions(timeline) -> List[str]:
    """a_1 = W; a_t = R iff row t changed any of the first t-1 labels of row t-1."""
    rows = getattr(timeline, "rows", timeline)
    for t, row in enumerate(rows, 1):
        if len(row) != t:
            raise SignalError(f"ragged timeline: row {t} has {len(row)} labels")
    actions = []
    for t, row in enumerate(rows):
        if t == 0:
            actions.append(WRITE)
            continue
        prev = rows[t - 1]
        actions.append(REVISE if list(row[:t]) != list(prev) else WRITE)
    return actions


def generate_actions(model: Encoder, corpus: Corpus, vocab: Vocab, labels: Sequence[str]) -> List[List[str]]:
    return [derive_actions(collect_prefix_timeline(model, vocab.encode(s.tokens), labels)) for s in corpus]


def action_shares(actions: Sequence[Sequence[str]]) -> Dict[str, float]:
    c = Counter(a for seq in actions for a in seq)
    total = sum(c.values())
    return {WRITE: c[WRITE] / total if total else 0.0, REVISE: c[REVISE] / total if total else 0.0}


def write_actions(path, actions: Sequence[Sequence[str]], corpus_sha256: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{HEADER}{corpus_sha256}\n")
        for seq in actions:
            fh.write(" ".join(seq) + "\n")


def read_actions(path, expect_sha256: Optional[str] = None) -> List[List[str]]:
    """Parse an actions file; with ``expect_sha256`` the header must match."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(HEADER):
        raise DataError(f"{path}: missing {HEADER}<hex> header")
    digest = lines[0][len(HEADER):].strip()
    if expect_sha256 is not None and digest != expect_sha256:
        raise DataError(f"{path}: actions were generated for corpus {digest[:12]}..., "
                        f"not {expect_sha256[:12]}...")
    out = []
    for n, line in enumerate(lines[1:], 2):
        seq = line.split()
        if not seq or any(a not in (WRITE, REVISE) for a in seq) or seq[0] != WRITE:
            raise DataError(f"{path}:{n}: malformed action line")
        out.append(seq)
    return out
