"""CoNLL-column corpora, vocabulary, UNK handling and embedding loading."""
from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .tensorkit import xavier_init

log = logging.getLogger(__name__)

MAX_SENTENCE_LEN = 200
PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Sentence:
    tokens: Tuple[str, ...]
    labels: Tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise DataError("empty sentence")
        if len(self.tokens) != len(self.labels):
            raise DataError("token and label counts differ")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Corpus:
    sentences: List[Sentence]
    labels: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.labels:
            self.labels = label_inventory(self.sentences)

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    @property
    def sha256(self) -> str:
        return corpus_hash(self.sentences)

    def subset(self, indices: Iterable[int]) -> "Corpus":
        return Corpus([self.sentences[i] for i in indices], list(self.labels))


def label_inventory(sentences: Iterable[Sentence]) -> List[str]:
    """"O" first (when present), then the remaining labels sorted."""
    seen = {lab for s in sentences for lab in s.labels}
    rest = sorted(seen - {"O"})
    return (["O"] if "O" in seen else []) + rest


def corpus_hash(sentences: Iterable[Sentence]) -> str:
    h = hashlib.sha256()
    for s in sentences:
        for tok, lab in zip(s.tokens, s.labels):
            h.update(tok.encode("utf-8") + b"\t" + lab.encode("utf-8") + b"\n")
        h.update(b"\n")
    return h.hexdigest()


def load_conll(path, max_len: int = MAX_SENTENCE_LEN) -> Corpus:
    """Read a CoNLL column file: first column token, last column label.

    Sentences longer than ``max_len`` are dropped with a warning.
    """
    path = Path(path)
    sentences: List[Sentence] = []
    tokens: List[str] = []
    labels: List[str] = []
    n_cols: Optional[int] = None
    dropped = 0

    def flush():
        nonlocal tokens, labels, n_cols, dropped
        if tokens:
            if len(tokens) > max_len:
                dropped += 1
            else:
                sentences.append(Sentence(tuple(tokens), tuple(labels)))
        tokens, labels, n_cols = [], [], None

    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                flush()
                continue
            if line.startswith("-DOCSTART-"):
                continue
            cols = line.split("\t") if "\t" in line else line.split()
            if len(cols) < 2:
                raise DataError(f"{path}:{lineno}: expected at least token and label columns")
            if n_cols is not None and len(cols) != n_cols:
                raise DataError(f"{path}:{lineno}: ragged line ({len(cols)} columns, expected {n_cols})")
            n_cols = len(cols)
            tokens.append(cols[0])
            labels.append(cols[-1])
    flush()
    if dropped:
        log.warning("%s: dropped %d sentence(s) longer than %d tokens", path, dropped, max_len)
    if not sentences:
        raise DataError(f"{path}: no sentences")
    return Corpus(sentences)


def write_conll(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in corpus:
            for tok, lab in zip(s.tokens, s.labels):
                fh.write(f"{tok}\t{lab}\n")
            fh.write("\n")


class Vocab:
    """Token ids: PAD=0, UNK=1, then by descending frequency, ties lexicographic."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:2]) != [PAD, UNK]:
            raise ValueError("vocabulary must start with PAD and UNK")
        self.itos = list(tokens)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, corpora: Iterable[Corpus]) -> "Vocab":
        counts: Counter = Counter()
        for c in corpora:
            for s in c:
                counts.update(s.tokens)
        for special in (PAD, UNK):
            counts.pop(special, None)
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls([PAD, UNK] + ordered)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]


def encode(sentence: Sentence, vocab: Vocab) -> List[int]:
    return vocab.encode(sentence.tokens)


def encode_labels(sentence: Sentence, labels: Sequence[str]) -> List[int]:
    index = {lab: i for i, lab in enumerate(labels)}
    try:
        return [index[lab] for lab in sentence.labels]
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]!r} not in the trained label inventory") from None


def apply_unk_training_mask(ids, p: float, rng: np.random.Generator):
    """Independently replace each (non-PAD) id by UNK with probability ``p``."""
    arr = np.asarray(ids)
    if p <= 0:
        return arr.copy()
    hit = rng.random(arr.shape) < p
    out = arr.copy()
    out[hit & (arr != PAD_ID)] = UNK_ID
    return out


def load_embeddings(path, vocab: Vocab, dim: int, generator: Optional[torch.Generator] = None) -> np.ndarray:
    """Fill rows for vocab words found in a "word v1 ... vdim" text file;
    the remaining rows are Xavier-initialised."""
    generator = generator or torch.Generator().manual_seed(0)
    table = xavier_init((len(vocab), dim), generator, torch.float64).numpy().astype(np.float32)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            idx = vocab.stoi.get(parts[0])
            if idx is None:
                continue
            try:
                table[idx] = np.array(parts[1:], dtype=np.float32)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric embedding value") from None
    return table


def is_iob(labels: Iterable[str]) -> bool:
    return all(lab == "O" or (len(lab) > 2 and lab[:2] in ("B-", "I-")) for lab in labels)
