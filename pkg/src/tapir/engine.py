"""Incremental inference: the adaptive two-pass step loop, the
restart-incremental reference runner and prefix-timeline recording."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .corpus import PAD_ID
from .layers import (REVISE, WRITE, Embedding, Encoder, LstmnController, LstmStack, OutputProjection,
                     PolicyHead, decide_action)
from .memory import CacheSet
from .tensorkit import dropout


class TapirModel(nn.Module):
    """Incremental processor, output projections, controller, policy and reviser."""

    def __init__(self, n_tokens: int, n_labels: int, reviser: Encoder, gen: torch.Generator, *,
                 embed_dim: int = 300, lstm_hidden: int = 256, lstm_layers: int = 1,
                 ctrl_hidden: int = 256, ctrl_layers: int = 1, memory_size: int = 5,
                 tau: float = 0.5, delay: int = 0, dropout_rate: float = 0.1):
        super().__init__()
        if reviser.head.weight.shape[0] != n_labels:
            raise ValueError("reviser and incremental processor label inventories differ")
        self.hparams = dict(n_tokens=n_tokens, n_labels=n_labels, embed_dim=embed_dim,
                            lstm_hidden=lstm_hidden, lstm_layers=lstm_layers, ctrl_hidden=ctrl_hidden,
                            ctrl_layers=ctrl_layers, memory_size=memory_size, dropout_rate=dropout_rate)
        self.embedding = Embedding(n_tokens, embed_dim, gen)
        self.lstm = LstmStack(embed_dim, lstm_hidden, lstm_layers, n_labels, gen, dropout_rate)
        self.proj = OutputProjection(n_labels, lstm_hidden, ctrl_hidden, gen)
        self.controller = LstmnController(ctrl_hidden, lstm_hidden, embed_dim, ctrl_hidden, gen, ctrl_layers)
        self.policy = PolicyHead(ctrl_hidden, gen)
        self.reviser = reviser
        self.memory_size = memory_size
        self.tau = tau
        self.delay = delay
        self.dropout_rate = dropout_rate
        self.vocab = None
        self.labels: List[str] = []
        self._kernel: Optional["Kernel"] = None

    def forward_train(self, ids: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Teacher-free training pass over [B, T] ids: the controller reads
        caches filled from the processor's own outputs (every step a WRITE).
        Returns (logits [B, T, L], policy scores [B, T])."""
        x = dropout(self.embedding(ids), self.dropout_rate, self.training)
        h_all, logits = self.lstm(x)
        _, phi = self.proj(h_all, logits)
        b, t_len = ids.shape
        n = self.memory_size
        k_tilde = torch.zeros(b, self.controller.phi_dim, dtype=phi.dtype)
        upper = self.controller.init_upper(b)
        cells: List[torch.Tensor] = []
        scores = []
        for t in range(t_len):
            lo = max(0, t - n)
            slots = phi[:, lo:t] if t > 0 else None
            tape = torch.stack(cells[lo:t], dim=1) if t > 0 else None
            k, c, k_tilde, _, _, upper = self.controller.step(slots, tape, h_all[:, t], x[:, t], k_tilde, upper)
            cells.append(c)
            scores.append(self.policy(k))
        return logits, torch.stack(scores, dim=1)

    @property
    def kernel(self) -> "Kernel":
        if self._kernel is None:
            self._kernel = Kernel(self)
        return self._kernel

    def invalidate_kernel(self) -> None:
        self._kernel = None

    def train(self, mode: bool = True):
        self._kernel = None
        return super().train(mode)


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float32).copy()


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _gates(pre: np.ndarray, c_prev: np.ndarray, n: int):
    """LSTM update from pre-activations ordered (i, f, o, g)."""
    sig = _sigmoid(pre[: 3 * n])
    c = sig[n: 2 * n] * c_prev + sig[:n] * np.tanh(pre[3 * n:])
    return sig[2 * n:] * np.tanh(c), c


class Kernel:
    """numpy snapshot of the per-token path (processor, projections,
    controller, policy) used by the streaming loop.

    Input-side products that depend only on the token id (first LSTM layer
    and the controller's x half of the gate matrix) are tabulated per
    vocabulary entry.
    """

    def __init__(self, model: TapirModel):
        self.embedding = _np(model.embedding.weight)
        self.lstm = [(_np(model.lstm.w_ih[i]).T.copy(), _np(model.lstm.w_hh[i]).T.copy(), _np(model.lstm.b[i]))
                     for i in range(model.lstm.n_layers)]
        w_ih0, _, b0 = self.lstm[0]
        self.lstm_in = self.embedding @ w_ih0 + b0
        self.head_w = _np(model.lstm.head.weight).T.copy()
        self.head_b = _np(model.lstm.head.bias)
        pr = model.proj
        self.w_y, self.b_z = _np(pr.w_y).T.copy(), _np(pr.b_z)
        self.w_in, self.w_out, self.b_phi = _np(pr.w_in).T.copy(), _np(pr.w_out).T.copy(), _np(pr.b_phi)
        ct = model.controller
        self.w_c, self.w_h, self.w_k = _np(ct.w_c).T.copy(), _np(ct.w_h).T.copy(), _np(ct.w_k).T.copy()
        self.b_u, self.v = _np(ct.b_u), _np(ct.v)
        w_gate = _np(ct.w_gate).T.copy()
        self.w_gate_k = w_gate[: ct.phi_dim].copy()
        self.gate_in = self.embedding @ w_gate[ct.phi_dim:] + _np(ct.b_gate)
        self.upper = [(_np(ct.up_w_ih[i]).T.copy(), _np(ct.up_w_hh[i]).T.copy(), _np(ct.up_b[i]))
                      for i in range(ct.n_layers - 1)]
        self.theta = _np(model.policy.theta).astype(np.float64)
        self.b_k = float(model.policy.b_k.detach()[0])
        self.lstm_hidden = model.lstm.hidden
        self.ctrl_hidden = ct.hidden
        self.phi_dim = ct.phi_dim

    def init_lstm(self):
        z = np.zeros(self.lstm_hidden, dtype=np.float32)
        return [(z, z) for _ in self.lstm]

    def init_upper(self):
        z = np.zeros(self.ctrl_hidden, dtype=np.float32)
        return [(z, z) for _ in self.upper]

    def lstm_step(self, state, token: int):
        n = self.lstm_hidden
        new = []
        inp = None
        for layer, ((h, c), (w_ih, w_hh, b)) in enumerate(zip(state, self.lstm)):
            pre = self.lstm_in[token] + h @ w_hh if layer == 0 else inp @ w_ih + h @ w_hh + b
            h, c = _gates(pre, c, n)
            new.append((h, c))
            inp = h
        return new, inp, inp @ self.head_w + self.head_b

    def head(self, h):
        return h @ self.head_w + self.head_b

    def project(self, h, logits):
        """z and phi for one step, or for stacked steps along the first axis."""
        z = np.tanh(logits @ self.w_y + self.b_z)
        return z, np.tanh(h @ self.w_in + z @ self.w_out + self.b_phi)

    def controller(self, slots, cells, h, token: int, k_tilde_prev, upper):
        if slots is None:
            k_tilde = np.zeros(self.phi_dim, dtype=np.float32)
            c_tilde = np.zeros(self.ctrl_hidden, dtype=np.float32)
            pre = self.gate_in[token]
        else:
            e = np.tanh(slots @ self.w_c + (h @ self.w_h + k_tilde_prev @ self.w_k + self.b_u)) @ self.v
            e = np.exp(e - e.max())
            s = e / e.sum()
            k_tilde = s @ slots
            c_tilde = s @ cells
            pre = k_tilde @ self.w_gate_k + self.gate_in[token]
        k, c = _gates(pre, c_tilde, self.ctrl_hidden)
        new_upper = []
        for (uh, uc), (w_ih, w_hh, b) in zip(upper, self.upper):
            uh, uc = _gates(k @ w_ih + uh @ w_hh + b, uc, self.ctrl_hidden)
            new_upper.append((uh, uc))
            k = uh
        return k, c, k_tilde, new_upper

    def policy(self, k) -> float:
        a = float(k.astype(np.float64) @ self.theta) + self.b_k
        return float(_sigmoid(a))


def full_sequence_logits(encoder: Encoder, ids: Sequence[int]) -> np.ndarray:
    """Unmasked encoder logits [T, L] for one sentence, inference mode."""
    with torch.inference_mode():
        return encoder(torch.as_tensor(ids, dtype=torch.long)).numpy()


# --------------------------------------------------------------------------
# timelines


@dataclass
class Counters:
    reviser_calls: int = 0
    reviser_tokens: int = 0
    lstm_tokens: int = 0

    def add(self, other: "Counters") -> None:
        self.reviser_calls += other.reviser_calls
        self.reviser_tokens += other.reviser_tokens
        self.lstm_tokens += other.lstm_tokens

    @property
    def token_forwards(self) -> int:
        return self.reviser_tokens + self.lstm_tokens


@dataclass
class PrefixTimeline:
    """Committed label sequence after each step, with the action and policy score."""
    rows: List[List[str]]
    actions: List[str]
    scores: List[float]
    delay: int = 0
    counters: Counters = field(default_factory=Counters)

    def __len__(self) -> int:
        return len(self.rows)


def finalize(timeline: PrefixTimeline) -> List[str]:
    """The last committed row, verbatim (no forced recomputation at the end)."""
    if not timeline.rows:
        raise ValueError("empty timeline")
    return list(timeline.rows[-1])


def format_timeline(timeline: PrefixTimeline) -> str:
    lines = []
    for t, (row, a, p) in enumerate(zip(timeline.rows, timeline.actions, timeline.scores), 1):
        lines.append("\t".join([f"t={t} a={a} p={p:.6f}"] + list(row)))
    return "\n".join(lines)


def write_timelines(timelines: Iterable[PrefixTimeline], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tl in timelines:
            fh.write(format_timeline(tl) + "\n\n")


def read_timelines(path) -> List[PrefixTimeline]:
    out: List[PrefixTimeline] = []
    rows, actions, scores = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                if rows:
                    out.append(PrefixTimeline(rows, actions, scores))
                    rows, actions, scores = [], [], []
                continue
            head, *labels = line.split("\t")
            fields = dict(part.split("=", 1) for part in head.split(" "))
            if int(fields["t"]) != len(rows) + 1:
                raise ValueError(f"timeline step out of order: {head}")
            rows.append(labels)
            actions.append(fields["a"])
            scores.append(float(fields["p"]))
    if rows:
        out.append(PrefixTimeline(rows, actions, scores))
    return out


# --------------------------------------------------------------------------
# the step loop


@dataclass
class InferenceState:
    cache: CacheSet
    lstm: list
    upper: list
    k_tilde: np.ndarray
    t: int = 0
    x_buf: List[int] = field(default_factory=list)
    y_buf: List[int] = field(default_factory=list)
    tape: List[np.ndarray] = field(default_factory=list)
    counters: Counters = field(default_factory=Counters)

    @classmethod
    def initial(cls, model: TapirModel) -> "InferenceState":
        k = model.kernel
        return cls(cache=CacheSet(model.memory_size), lstm=k.init_lstm(), upper=k.init_upper(),
                   k_tilde=np.zeros(k.phi_dim, dtype=np.float32))


def step(model: TapirModel, state: InferenceState, token: int, flush: bool = False,
         tau: Optional[float] = None) -> Tuple[str, float, List[int]]:
    """Consume one input (a real token, or a PAD flush input when ``flush``).

    Returns (action, policy score, committed label ids after the step).
    """
    k = model.kernel
    tau = model.tau if tau is None else tau
    d = model.delay
    t = state.t + 1
    state.lstm, h, logits = k.lstm_step(state.lstm, token)
    state.counters.lstm_tokens += 1
    y = int(np.argmax(logits))

    slots = state.cache.phi_matrix()
    cells = None if slots is None else np.array([state.tape[j - 1] for j in state.cache.p_times])
    k_top, c, state.k_tilde, state.upper = k.controller(slots, cells, h, token, state.k_tilde, state.upper)
    state.tape.append(c)
    score = k.policy(k_top)
    action = decide_action(score, tau)

    if not flush:
        state.x_buf.append(token)
    state.cache.push_h(h, t)
    if action == WRITE:
        if t > d:
            state.y_buf.append(y)
        z, phi = k.project(h, logits)
        state.cache.push_output(z, phi, t)
    else:
        eta = full_sequence_logits(model.reviser, state.x_buf)
        if eta.shape[0] != len(state.x_buf):
            raise RuntimeError("reviser output length differs from the input buffer")
        state.counters.reviser_calls += 1
        state.counters.reviser_tokens += len(state.x_buf)
        state.y_buf = [int(i) for i in eta.argmax(axis=-1)[: max(0, t - d)]]
        paired = np.zeros((t, eta.shape[1]), dtype=np.float32)
        for j, hj in state.cache.h:
            tok = j - d
            paired[j - 1] = eta[tok - 1] if tok >= 1 else k.head(hj)
        state.cache.rebuild_after_revise(paired, k.project)
    state.t = t
    return action, score, list(state.y_buf)


def run_sentence(model: TapirModel, ids: Sequence[int], tau: Optional[float] = None,
                 check_cache: bool = False) -> PrefixTimeline:
    """Feed a sentence token by token, then ``delay`` PAD flush inputs."""
    if len(ids) == 0:
        raise ValueError("empty sentence")
    state = InferenceState.initial(model)
    rows, actions, scores = [], [], []
    inputs = [(int(i), False) for i in ids] + [(PAD_ID, True)] * model.delay
    for tok, flush in inputs:
        a, p, row = step(model, state, tok, flush, tau)
        if check_cache:
            state.cache.check_aligned()
        rows.append([model.labels[i] for i in row] if model.labels else [str(i) for i in row])
        actions.append(a)
        scores.append(p)
    return PrefixTimeline(rows, actions, scores, model.delay, state.counters)


def lstm_timeline(model: TapirModel, ids: Sequence[int]) -> PrefixTimeline:
    """The incremental processor alone (a monotonic RNN tagger)."""
    k = model.kernel
    state = k.init_lstm()
    d = model.delay
    out: List[int] = []
    rows = []
    inputs = list(ids) + [PAD_ID] * d
    for t, tok in enumerate(inputs, 1):
        state, _, logits = k.lstm_step(state, int(tok))
        if t > d:
            out.append(int(np.argmax(logits)))
        rows.append([model.labels[i] for i in out])
    n = len(inputs)
    return PrefixTimeline(rows, [WRITE] * n, [0.0] * n, d, Counters(lstm_tokens=n))


def run_restart_incremental(encoder: Encoder, ids: Sequence[int], labels: Sequence[str],
                            delay: int = 0) -> PrefixTimeline:
    """Row t is the encoder's output on x_1..x_t, truncated by ``delay``."""
    if len(ids) == 0:
        raise ValueError("empty sentence")
    counters = Counters()
    rows = []
    pred: List[int] = []
    for t in range(1, len(ids) + delay + 1):
        if t <= len(ids):
            pred = [int(i) for i in full_sequence_logits(encoder, ids[:t]).argmax(axis=-1)]
            counters.reviser_calls += 1
            counters.reviser_tokens += t
        rows.append([labels[i] for i in pred[: max(0, t - delay)]])
    n = len(rows)
    return PrefixTimeline(rows, [REVISE] * n, [1.0] * n, delay, counters)


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - start
