"""Training loops: full-sequence encoders (reviser, reference, action
generator) and the two-pass model's processor/controller/policy."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import Config, ModelConfig, SignalConfig, TrainConfig
from .corpus import (PAD_ID, Corpus, DataError, Vocab, apply_unk_training_mask, encode_labels, is_iob,
                     load_embeddings)
from .engine import TapirModel
from .evalkit import span_f1_iob, token_accuracy
from .layers import Encoder
from .tensorkit import (NumericError, OptimState, adamw_step, backward, bce_loss, check_finite,
                        clip_global_norm, cross_entropy_loss, lr_schedule)

log = logging.getLogger(__name__)
IGNORE = -1


def progress_line(epoch: int, split: str, loss: float, metric: float, lr: float) -> str:
    return f"epoch={epoch} split={split} loss={loss:.6f} metric={metric:.6f} lr={lr:.8f}"


@dataclass
class History:
    lines: List[str] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_metric: List[float] = field(default_factory=list)
    best_epoch: int = -1

    def log(self, line: str, echo: Optional[Callable[[str], None]]) -> None:
        self.lines.append(line)
        if echo:
            echo(line)


def split_train_val(corpus: Corpus, fraction: float, seed: int) -> Tuple[Corpus, Optional[Corpus]]:
    if fraction <= 0 or len(corpus) < 2:
        return corpus, None
    order = np.random.default_rng(seed).permutation(len(corpus))
    n_val = max(1, int(round(len(corpus) * fraction)))
    val_idx = sorted(int(i) for i in order[:n_val])
    train_idx = sorted(int(i) for i in order[n_val:])
    return corpus.subset(train_idx), corpus.subset(val_idx)


def pad(seqs: Sequence[Sequence[int]], value: int) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), value, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def _task_metric(pred: List[List[str]], gold: List[List[str]]) -> float:
    if all(is_iob(g) for g in gold):
        return span_f1_iob(pred, gold)
    return token_accuracy(pred, gold)


def _params(module: torch.nn.Module, skip_prefix: str = "") -> List[torch.Tensor]:
    return [p for n, p in module.named_parameters() if not (skip_prefix and n.startswith(skip_prefix))]


def _update(params, loss, opt: OptimState, clip: float) -> None:
    for p in params:
        p.grad = None
    backward(loss)
    grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
    for g in grads:
        check_finite(g, "gradient")
    clip_global_norm(grads, clip if clip and clip > 0 else None)
    adamw_step(params, grads, opt)


def _init_embeddings(embedding_weight: torch.Tensor, path: str, vocab: Vocab) -> None:
    if path:
        table = load_embeddings(path, vocab, embedding_weight.shape[1])
        with torch.no_grad():
            embedding_weight.copy_(torch.from_numpy(table))


# --------------------------------------------------------------------------
# encoders


def encoder_predict(encoder: Encoder, ids_list: Sequence[Sequence[int]], mask: str = "none",
                    batch: int = 64) -> List[List[int]]:
    encoder.eval()
    out: List[List[int]] = []
    with torch.inference_mode():
        for lo in range(0, len(ids_list), batch):
            chunk = ids_list[lo:lo + batch]
            ids = pad(chunk, PAD_ID)
            key_mask = pad([[1] * len(s) for s in chunk], 0).bool()
            pred = encoder(ids, key_mask, mask).argmax(-1)
            out += [pred[i, : len(s)].tolist() for i, s in enumerate(chunk)]
    return out


def train_encoder(train: Corpus, val: Optional[Corpus], vocab: Vocab, labels: Sequence[str], *,
                  kind: str, layers: int, d_model: int, ffn: int, heads: int, embed_dim: int,
                  mask: str, lr: float, batch: int, clip: float, epochs: int, patience: Optional[int],
                  warmup: int, decay_points, dropout_rate: float, unk_prob: float, seed: int,
                  weight_decay: float, eps: float, beta1: float, beta2: float, embeddings: str = "",
                  echo: Optional[Callable[[str], None]] = print) -> Tuple[Encoder, History]:
    """Cross-entropy training with AdamW, warmup/decay schedule and (when a
    validation set is given) early stopping on the task metric."""
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = Encoder(kind, len(vocab), embed_dim, d_model, ffn, layers, len(labels), gen, heads, dropout_rate)
    _init_embeddings(model.embedding.weight, embeddings, vocab)
    params = _params(model)
    opt = OptimState(lr=lr, beta1=beta1, beta2=beta2, weight_decay=weight_decay, eps=eps)
    x_all = [vocab.encode(s.tokens) for s in train]
    y_all = [encode_labels(s, labels) for s in train]
    hist = History()
    best_state, best_metric, stale = None, -1.0, 0
    for epoch in range(epochs):
        opt.lr = lr_schedule(epoch, lr, warmup, decay_points)
        model.train()
        order = rng.permutation(len(x_all))
        tot, hit, n_tok = 0.0, 0, 0
        for lo in range(0, len(order), batch):
            idx = order[lo:lo + batch]
            ids = pad([apply_unk_training_mask(x_all[i], unk_prob, rng) for i in idx], PAD_ID)
            gold = pad([y_all[i] for i in idx], IGNORE)
            key_mask = gold != IGNORE
            logits = model(ids, key_mask, mask)
            loss = cross_entropy_loss(logits, gold.clamp(min=0), key_mask)
            _update(params, loss, opt, clip)
            tot += loss.item() * int(key_mask.sum())
            hit += int(((logits.argmax(-1) == gold) & key_mask).sum())
            n_tok += int(key_mask.sum())
        train_loss = tot / n_tok
        if not np.isfinite(train_loss):
            raise NumericError(f"training loss diverged at epoch {epoch}")
        hist.train_loss.append(train_loss)
        hist.log(progress_line(epoch, "train", train_loss, hit / n_tok, opt.lr), echo)
        if val is None:
            continue
        val_loss, metric = evaluate_encoder(model, val, vocab, labels, mask)
        hist.val_metric.append(metric)
        hist.log(progress_line(epoch, "val", val_loss, metric, opt.lr), echo)
        if metric > best_metric:
            best_metric, best_state, stale = metric, copy.deepcopy(model.state_dict()), 0
            hist.best_epoch = epoch
        else:
            stale += 1
            if patience is not None and stale >= patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        hist.best_epoch = epochs - 1
    model.eval()
    model.vocab, model.labels = vocab, list(labels)
    return model, hist


def evaluate_encoder(model: Encoder, corpus: Corpus, vocab: Vocab, labels: Sequence[str],
                     mask: str = "none") -> Tuple[float, float]:
    x = [vocab.encode(s.tokens) for s in corpus]
    y = [encode_labels(s, labels) for s in corpus]
    model.eval()
    with torch.inference_mode():
        ids = pad(x, PAD_ID)
        gold = pad(y, IGNORE)
        key_mask = gold != IGNORE
        loss = float(cross_entropy_loss(model(ids, key_mask, mask), gold.clamp(min=0), key_mask))
    pred = encoder_predict(model, x, mask)
    metric = _task_metric([[labels[i] for i in p] for p in pred], [list(s.labels) for s in corpus])
    return loss, metric


def _encoder_kwargs(cfg: Config, role: str) -> dict:
    m, t = cfg.model, cfg.train
    return dict(kind="trf" if role == "reference" else m.reviser_kind, layers=m.reviser_layers,
                d_model=m.d_model, ffn=m.ffn_dim, heads=m.heads, embed_dim=m.embed_dim, mask="none",
                lr=t.lr, batch=t.batch, clip=t.clip, epochs=t.epochs, patience=t.patience, warmup=t.warmup,
                decay_points=t.decay_points, dropout_rate=t.dropout, unk_prob=t.unk_prob, seed=t.seed,
                weight_decay=t.weight_decay, eps=t.eps, beta1=t.beta1, beta2=t.beta2,
                embeddings=cfg.paths.embeddings)


def train_reviser(corpus: Corpus, vocab: Vocab, labels: Sequence[str], cfg: Config, echo=print,
                  val: Optional[Corpus] = None):
    """Step one of two-step training: the unmasked second-pass encoder."""
    if val is None:
        corpus, val = split_train_val(corpus, cfg.train.val_fraction, cfg.train.seed)
    return train_encoder(corpus, val, vocab, labels, echo=echo, **_encoder_kwargs(cfg, "reviser"))


def train_reference(corpus: Corpus, vocab: Vocab, labels: Sequence[str], cfg: Config, echo=print,
                    val: Optional[Corpus] = None):
    """Restart-incremental baseline: a Transformer encoder with the reviser recipe."""
    if val is None:
        corpus, val = split_train_val(corpus, cfg.train.val_fraction, cfg.train.seed)
    return train_encoder(corpus, val, vocab, labels, echo=echo, **_encoder_kwargs(cfg, "reference"))


# --------------------------------------------------------------------------
# two-pass model


def _tapir_batch(x_all, y_all, a_all, idx, delay: int, unk_prob: float, rng):
    ids, gold, act = [], [], []
    for i in idx:
        x = list(apply_unk_training_mask(x_all[i], unk_prob, rng)) + [PAD_ID] * delay
        ids.append(x)
        gold.append([IGNORE] * delay + list(y_all[i]))
        act.append(list(a_all[i]) + [IGNORE] * delay)
    return pad(ids, PAD_ID), pad(gold, IGNORE), pad(act, IGNORE)


def _tapir_loss(model: TapirModel, ids, gold, act):
    logits, scores = model.forward_train(ids)
    ymask = gold != IGNORE
    amask = act != IGNORE
    ce = cross_entropy_loss(logits, gold.clamp(min=0), ymask)
    bce = bce_loss(scores, act.clamp(min=0), amask)
    return ce + bce, logits, ymask


def train_tapir(corpus: Corpus, actions: Sequence[Sequence[str]], reviser: Encoder, vocab: Vocab,
                labels: Sequence[str], cfg: Config, echo=print,
                val: Optional[Tuple[Corpus, Sequence[Sequence[str]]]] = None) -> Tuple[TapirModel, History]:
    """Step two: processor, controller and policy trained jointly on
    CE(gold labels) + BCE(generated actions); the reviser is carried along untouched."""
    if len(actions) != len(corpus):
        raise DataError("actions file and corpus differ in sentence count")
    for s, a in zip(corpus, actions):
        if len(a) != len(s):
            raise DataError("action sequence length differs from its sentence")
    if reviser.head.weight.shape[0] != len(labels):
        raise DataError("reviser label inventory does not match the corpus labels")
    m, t = cfg.model, cfg.train
    if val is None and t.val_fraction > 0 and len(corpus) > 1:
        tr, va = split_train_val(corpus, t.val_fraction, t.seed)
        index = {id(s): i for i, s in enumerate(corpus.sentences)}
        train_actions = [actions[index[id(s)]] for s in tr]
        val_pair = (va, [actions[index[id(s)]] for s in va])
    else:
        tr, train_actions, val_pair = corpus, list(actions), val

    gen = torch.Generator().manual_seed(t.seed)
    torch.manual_seed(t.seed)
    rng = np.random.default_rng(t.seed)
    model = TapirModel(len(vocab), len(labels), reviser, gen, embed_dim=m.embed_dim, lstm_hidden=m.lstm_hidden,
                       lstm_layers=m.lstm_layers, ctrl_hidden=m.ctrl_hidden, ctrl_layers=m.ctrl_layers,
                       memory_size=m.memory_size, tau=m.tau, delay=t.delay, dropout_rate=t.dropout)
    _init_embeddings(model.embedding.weight, cfg.paths.embeddings, vocab)
    model.vocab, model.labels = vocab, list(labels)
    params = _params(model, skip_prefix="reviser.")
    opt = OptimState(lr=t.tapir_lr, beta1=t.beta1, beta2=t.beta2, weight_decay=t.weight_decay, eps=t.eps)

    enc = lambda c: [vocab.encode(s.tokens) for s in c]
    lab = lambda c: [encode_labels(s, labels) for s in c]
    act01 = lambda acts: [[1 if x == "R" else 0 for x in a] for a in acts]
    x_all, y_all, a_all = enc(tr), lab(tr), act01(train_actions)
    if val_pair is not None:
        vx, vy, va_ = enc(val_pair[0]), lab(val_pair[0]), act01(val_pair[1])

    hist = History()
    best_state, best_loss, stale = None, float("inf"), 0
    for epoch in range(t.epochs):
        opt.lr = lr_schedule(epoch, t.tapir_lr, 0, t.decay_points)
        model.train()
        model.reviser.eval()
        order = rng.permutation(len(x_all))
        tot, hit, n_tok = 0.0, 0, 0
        for lo in range(0, len(order), t.batch):
            idx = order[lo:lo + t.batch]
            ids, gold, act = _tapir_batch(x_all, y_all, a_all, idx, t.delay, t.unk_prob, rng)
            loss, logits, ymask = _tapir_loss(model, ids, gold, act)
            _update(params, loss, opt, t.tapir_clip)
            k = int(ymask.sum())
            tot += loss.item() * k
            hit += int(((logits.argmax(-1) == gold) & ymask).sum())
            n_tok += k
        train_loss = tot / n_tok
        if not np.isfinite(train_loss):
            raise NumericError(f"training loss diverged at epoch {epoch}")
        hist.train_loss.append(train_loss)
        hist.log(progress_line(epoch, "train", train_loss, hit / n_tok, opt.lr), echo)
        if val_pair is None:
            continue
        model.eval()
        with torch.inference_mode():
            ids, gold, act = _tapir_batch(vx, vy, va_, range(len(vx)), t.delay, 0.0, rng)
            vloss, logits, ymask = _tapir_loss(model, ids, gold, act)
        vloss = float(vloss)
        pred = logits.argmax(-1)
        d = t.delay
        pred_labels = [[labels[int(i)] for i in pred[j, d: d + len(vy[j])]] for j in range(len(vy))]
        metric = _task_metric(pred_labels, [list(s.labels) for s in val_pair[0]])
        hist.val_metric.append(metric)
        hist.log(progress_line(epoch, "val", vloss, metric, opt.lr), echo)
        if vloss < best_loss:
            best_loss, best_state, stale = vloss, copy.deepcopy(model.state_dict()), 0
            hist.best_epoch = epoch
        else:
            stale += 1
            if stale >= t.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, hist
