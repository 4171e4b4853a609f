"""Neural building blocks.

Every block accepts optional leading batch dimensions so the same code
serves batched training ([B, ...]) and single-sentence stepping ([...]).
Parameters are Xavier-initialised at construction from an explicit
generator; biases start at zero and layer-norm gains at one.
"""
from __future__ import annotations

import math
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .tensorkit import dropout, elu, softmax, xavier_init

MAX_POSITIONS = 512
LN_EPS = 1e-5
LT_EPS = 1e-6
HEADS = 8

LstmState = List[Tuple[torch.Tensor, torch.Tensor]]


def _weight(gen: torch.Generator, *shape: int) -> nn.Parameter:
    return nn.Parameter(xavier_init(shape, gen))


def _zeros(*shape: int) -> nn.Parameter:
    return nn.Parameter(torch.zeros(shape))


def _ones(*shape: int) -> nn.Parameter:
    return nn.Parameter(torch.ones(shape))


class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int, gen: torch.Generator, bias: bool = True):
        super().__init__()
        self.weight = _weight(gen, n_out, n_in)
        self.bias = _zeros(n_out) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x @ self.weight.T
        return y + self.bias if self.bias is not None else y


class Embedding(nn.Module):
    def __init__(self, n_tokens: int, dim: int, gen: torch.Generator):
        super().__init__()
        self.weight = _weight(gen, n_tokens, dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.weight[ids]


def lstm_cell(x: torch.Tensor, h: torch.Tensor, c: torch.Tensor, w_ih: torch.Tensor,
              w_hh: torch.Tensor, b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Gate order is (input, forget, output, candidate)."""
    gates = x @ w_ih.T + h @ w_hh.T + b
    i, f, o, g = gates.chunk(4, dim=-1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


class LstmStack(nn.Module):
    """Incremental processor: stacked LSTM plus output head producing raw logits."""

    def __init__(self, input_dim: int, hidden: int, layers: int, n_labels: int,
                 gen: torch.Generator, dropout_rate: float = 0.0):
        super().__init__()
        if layers < 1:
            raise ValueError("LstmStack needs at least one layer")
        self.input_dim = input_dim
        self.hidden = hidden
        self.n_layers = layers
        self.dropout_rate = dropout_rate
        self.w_ih = nn.ParameterList()
        self.w_hh = nn.ParameterList()
        self.b = nn.ParameterList()
        for layer in range(layers):
            d_in = input_dim if layer == 0 else hidden
            self.w_ih.append(_weight(gen, 4 * hidden, d_in))
            self.w_hh.append(_weight(gen, 4 * hidden, hidden))
            self.b.append(_zeros(4 * hidden))
        self.head = Linear(hidden, n_labels, gen)

    def init_state(self, batch: Optional[int] = None) -> LstmState:
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        dt = self.head.weight.dtype
        return [(torch.zeros(shape, dtype=dt), torch.zeros(shape, dtype=dt))
                for _ in range(self.n_layers)]

    def step(self, state: LstmState, x: torch.Tensor) -> Tuple[LstmState, torch.Tensor, torch.Tensor]:
        """Advance one token. Returns (state, top hidden h_t, logits)."""
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        new_state = []
        inp = x
        for layer, (h, c) in enumerate(state):
            h, c = lstm_cell(inp, h, c, self.w_ih[layer], self.w_hh[layer], self.b[layer])
            new_state.append((h, c))
            inp = dropout(h, self.dropout_rate, self.training) if layer + 1 < self.n_layers else h
        return new_state, inp, self.head(dropout(inp, self.dropout_rate, self.training))

    def forward(self, xs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Run a whole sequence [.., T, D]; returns (hidden [.., T, H], logits [.., T, L])."""
        batch = xs.shape[0] if xs.dim() == 3 else None
        state = self.init_state(batch)
        hs, logits = [], []
        for t in range(xs.shape[-2]):
            state, h, y = self.step(state, xs[..., t, :])
            hs.append(h)
            logits.append(y)
        return torch.stack(hs, dim=-2), torch.stack(logits, dim=-2)


class OutputProjection(nn.Module):
    """z = tanh(W_y y + b_z) and phi = tanh(W_in h + W_out z + b_phi)."""

    def __init__(self, n_labels: int, hidden: int, phi_dim: int, gen: torch.Generator):
        super().__init__()
        self.w_y = _weight(gen, hidden, n_labels)
        self.b_z = _zeros(hidden)
        self.w_in = _weight(gen, phi_dim, hidden)
        self.w_out = _weight(gen, phi_dim, hidden)
        self.b_phi = _zeros(phi_dim)

    def project_z(self, logits: torch.Tensor) -> torch.Tensor:
        if logits.shape[-1] != self.w_y.shape[1]:
            raise ValueError("logit dimension does not match projection")
        return torch.tanh(logits @ self.w_y.T + self.b_z)

    def fuse_phi(self, h: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != z.shape[-1]:
            raise ValueError("h and z must have the same dimension")
        return torch.tanh(h @ self.w_in.T + z @ self.w_out.T + self.b_phi)

    def forward(self, h: torch.Tensor, logits: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        z = self.project_z(logits)
        return z, self.fuse_phi(h, z)


class LstmnController(nn.Module):
    """Attention over cached input-output vectors followed by an LSTM-style update.

    The first layer is the LSTMN update whose previous cell is replaced by the
    attention-weighted memory tape summary. Any further layers are plain LSTM
    cells stacked on top of its hidden output.
    """

    def __init__(self, phi_dim: int, h_dim: int, input_dim: int, hidden: int,
                 gen: torch.Generator, layers: int = 1):
        super().__init__()
        if hidden != phi_dim:
            raise ValueError("controller hidden size must equal the cache vector size")
        self.phi_dim = phi_dim
        self.hidden = hidden
        self.n_layers = layers
        att = hidden
        self.w_c = _weight(gen, att, phi_dim)
        self.w_h = _weight(gen, att, h_dim)
        self.w_k = _weight(gen, att, phi_dim)
        self.b_u = _zeros(att)
        self.v = _weight(gen, att)
        self.w_gate = _weight(gen, 4 * hidden, phi_dim + input_dim)
        self.b_gate = _zeros(4 * hidden)
        self.up_w_ih = nn.ParameterList()
        self.up_w_hh = nn.ParameterList()
        self.up_b = nn.ParameterList()
        for _ in range(layers - 1):
            self.up_w_ih.append(_weight(gen, 4 * hidden, hidden))
            self.up_w_hh.append(_weight(gen, 4 * hidden, hidden))
            self.up_b.append(_zeros(4 * hidden))

    def attend(self, slots: torch.Tensor, h: torch.Tensor, k_tilde_prev: torch.Tensor) -> torch.Tensor:
        """Attention distribution s over slots [.., n, phi]."""
        query = h @ self.w_h.T + k_tilde_prev @ self.w_k.T + self.b_u
        u = slots @ self.w_c.T + query.unsqueeze(-2)
        return softmax(torch.tanh(u) @ self.v, dim=-1)

    def init_upper(self, batch: Optional[int] = None) -> LstmState:
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        dt = self.v.dtype
        return [(torch.zeros(shape, dtype=dt), torch.zeros(shape, dtype=dt))
                for _ in range(self.n_layers - 1)]

    def step(self, slots: Optional[torch.Tensor], cells: Optional[torch.Tensor], h: torch.Tensor,
             x: torch.Tensor, k_tilde_prev: torch.Tensor, upper: Optional[LstmState] = None):
        """One controller update.

        ``slots`` are the cached phi vectors [.., n, phi] and ``cells`` the
        memory-tape cells [.., n, hidden] computed at the same times; both may
        be None or empty at the first step.
        Returns (k_t, c_t, k_tilde_t, c_tilde_t, s_t, upper_state).
        """
        lead = h.shape[:-1]
        if slots is None or slots.shape[-2] == 0:
            k_tilde = torch.zeros(lead + (self.phi_dim,), dtype=h.dtype)
            c_tilde = torch.zeros(lead + (self.hidden,), dtype=h.dtype)
            s = torch.zeros(lead + (0,), dtype=h.dtype)
        else:
            if cells is None or cells.shape[-2] != slots.shape[-2]:
                raise ValueError("memory tape and cache are misaligned")
            s = self.attend(slots, h, k_tilde_prev)
            k_tilde = (s.unsqueeze(-1) * slots).sum(dim=-2)
            c_tilde = (s.unsqueeze(-1) * cells).sum(dim=-2)
        gates = torch.cat([k_tilde, x], dim=-1) @ self.w_gate.T + self.b_gate
        i, f, o, g = gates.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c_tilde + torch.sigmoid(i) * torch.tanh(g)
        k = torch.sigmoid(o) * torch.tanh(c)
        new_upper = []
        if self.n_layers > 1:
            upper = upper if upper is not None else self.init_upper(lead[0] if lead else None)
            inp = k
            for layer, (uh, uc) in enumerate(upper):
                uh, uc = lstm_cell(inp, uh, uc, self.up_w_ih[layer], self.up_w_hh[layer], self.up_b[layer])
                new_upper.append((uh, uc))
                inp = uh
            k_top = inp
        else:
            k_top = k
        return k_top, c, k_tilde, c_tilde, s, new_upper


class PolicyHead(nn.Module):
    def __init__(self, hidden: int, gen: torch.Generator):
        super().__init__()
        self.theta = _weight(gen, hidden)
        self.b_k = _zeros(1)

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(k @ self.theta + self.b_k[0])


WRITE = "W"
REVISE = "R"


def decide_action(score: float, tau: float) -> str:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    return REVISE if score >= tau else WRITE


# --------------------------------------------------------------------------
# encoders


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: d // 2])
    return pe


def feature_map(x: torch.Tensor) -> torch.Tensor:
    return elu(x) + 1.0


class _HeadsMixin:
    heads: int
    d_head: int

    def split(self, x: torch.Tensor) -> torch.Tensor:
        # [.., T, d] -> [.., h, T, dh]
        t = x.shape[-2]
        return x.reshape(x.shape[:-2] + (t, self.heads, self.d_head)).transpose(-3, -2)

    def merge(self, x: torch.Tensor) -> torch.Tensor:
        x = x.transpose(-3, -2)
        return x.reshape(x.shape[:-2] + (self.heads * self.d_head,))


class SoftmaxAttention(nn.Module, _HeadsMixin):
    def __init__(self, d_model: int, heads: int, gen: torch.Generator):
        super().__init__()
        if d_model % heads:
            raise ValueError("d_model must be divisible by the head count")
        self.heads, self.d_head = heads, d_model // heads
        self.q = Linear(d_model, d_model, gen)
        self.k = Linear(d_model, d_model, gen)
        self.v = Linear(d_model, d_model, gen)
        self.o = Linear(d_model, d_model, gen)
        self.last_weights: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None,
                causal: bool = False) -> torch.Tensor:
        q, k, v = self.split(self.q(x)), self.split(self.k(x)), self.split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        t = x.shape[-2]
        allowed = torch.ones(t, t, dtype=torch.bool)
        if causal:
            allowed = torch.tril(allowed)
        if key_mask is not None:
            allowed = allowed & key_mask.bool()[..., None, None, :]
        scores = scores.masked_fill(~allowed, float("-inf"))
        w = softmax(scores, dim=-1)
        self.last_weights = w.detach()
        return self.o(self.merge(w @ v))


class LinearAttention(nn.Module, _HeadsMixin):
    """Kernelised attention with feature map elu(x)+1.

    ``mode`` is "full" (every position reads the global S_N, Z_N) or "causal"
    (position i reads the prefix sums S_i, Z_i, via cumulative sums).
    """

    def __init__(self, d_model: int, heads: int, gen: torch.Generator):
        super().__init__()
        if d_model % heads:
            raise ValueError("d_model must be divisible by the head count")
        self.heads, self.d_head = heads, d_model // heads
        self.q = Linear(d_model, d_model, gen)
        self.k = Linear(d_model, d_model, gen)
        self.v = Linear(d_model, d_model, gen)
        self.o = Linear(d_model, d_model, gen)

    def features(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None):
        fq = feature_map(self.split(self.q(x)))
        fk = feature_map(self.split(self.k(x)))
        v = self.split(self.v(x))
        if key_mask is not None:
            fk = fk * key_mask.to(fk.dtype)[..., None, :, None]
        return fq, fk, v

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None,
                causal: bool = False) -> torch.Tensor:
        fq, fk, v = self.features(x, key_mask)
        if causal:
            s = torch.cumsum(fk.unsqueeze(-1) * v.unsqueeze(-2), dim=-3)  # [.., h, T, dk, dv]
            z = torch.cumsum(fk, dim=-2)
            num = (fq.unsqueeze(-2) @ s).squeeze(-2)
            den = (fq * z).sum(-1, keepdim=True)
        else:
            s = fk.transpose(-1, -2) @ v  # [.., h, dk, dv]
            z = fk.sum(dim=-2)  # [.., h, dk]
            num = fq @ s
            den = (fq * z.unsqueeze(-2)).sum(-1, keepdim=True)
        return self.o(self.merge(num / (den + LT_EPS)))

    def init_state(self) -> Tuple[torch.Tensor, torch.Tensor]:
        dt = self.q.weight.dtype
        return (torch.zeros(self.heads, self.d_head, self.d_head, dtype=dt),
                torch.zeros(self.heads, self.d_head, dtype=dt))

    def step(self, state, x: torch.Tensor):
        """Recurrent update for one position x [d]: S += phi(K) V^T, Z += phi(K)."""
        s, z = state
        fq = feature_map(self.q(x).reshape(self.heads, self.d_head))
        fk = feature_map(self.k(x).reshape(self.heads, self.d_head))
        v = self.v(x).reshape(self.heads, self.d_head)
        s = s + fk.unsqueeze(-1) * v.unsqueeze(-2)
        z = z + fk
        num = (fq.unsqueeze(-2) @ s).squeeze(-2)
        den = (fq * z).sum(-1, keepdim=True)
        out = (num / (den + LT_EPS)).reshape(-1)
        return (s, z), self.o(out)


class EncoderLayer(nn.Module):
    """Post-norm block: x = LN(x + Att(x)); x = LN(x + FFN(x))."""

    def __init__(self, kind: str, d_model: int, heads: int, ffn: int, gen: torch.Generator,
                 dropout_rate: float = 0.0):
        super().__init__()
        self.attn = SoftmaxAttention(d_model, heads, gen) if kind == "trf" else LinearAttention(d_model, heads, gen)
        self.ff1 = Linear(d_model, ffn, gen)
        self.ff2 = Linear(ffn, d_model, gen)
        self.norm1_g, self.norm1_b = _ones(d_model), _zeros(d_model)
        self.norm2_g, self.norm2_b = _ones(d_model), _zeros(d_model)
        self.d_model = d_model
        self.dropout_rate = dropout_rate

    def _post_attention(self, x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        d = (self.d_model,)
        x = F.layer_norm(x + dropout(a, self.dropout_rate, self.training), d, self.norm1_g, self.norm1_b, LN_EPS)
        f = self.ff2(dropout(torch.relu(self.ff1(x)), self.dropout_rate, self.training))
        return F.layer_norm(x + dropout(f, self.dropout_rate, self.training), d, self.norm2_g, self.norm2_b, LN_EPS)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None,
                causal: bool = False) -> torch.Tensor:
        return self._post_attention(x, self.attn(x, key_mask, causal))

    def step(self, state, x: torch.Tensor):
        state, a = self.attn.step(state, x)
        return state, self._post_attention(x, a)


class Encoder(nn.Module):
    """Full-sequence labeller: embedding, linear projection, sinusoidal
    positions, a stack of Transformer ("trf") or Linear Transformer ("lt")
    blocks and an output head."""

    def __init__(self, kind: str, n_tokens: int, embed_dim: int, d_model: int, ffn: int,
                 layers: int, n_labels: int, gen: torch.Generator, heads: int = HEADS,
                 dropout_rate: float = 0.0):
        super().__init__()
        if kind not in ("trf", "lt"):
            raise ValueError(f"unknown encoder kind {kind!r}")
        self.hparams = dict(kind=kind, n_tokens=n_tokens, embed_dim=embed_dim, d_model=d_model, ffn=ffn,
                            layers=layers, n_labels=n_labels, heads=heads, dropout_rate=dropout_rate)
        self.kind = kind
        self.d_model = d_model
        self.dropout_rate = dropout_rate
        self.embedding = Embedding(n_tokens, embed_dim, gen)
        self.proj = Linear(embed_dim, d_model, gen)
        self.register_buffer("positions", sinusoidal_positions(MAX_POSITIONS, d_model).to(torch.get_default_dtype()))
        self.layers = nn.ModuleList(
            EncoderLayer(kind, d_model, heads, ffn, gen, dropout_rate) for _ in range(layers))
        self.head = Linear(d_model, n_labels, gen)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        t = ids.shape[-1]
        if t > MAX_POSITIONS:
            raise ValueError(f"sequence length {t} exceeds position capacity {MAX_POSITIONS}")
        x = self.proj(self.embedding(ids)) + self.positions[:t].to(self.proj.weight.dtype)
        return dropout(x, self.dropout_rate, self.training)

    def forward(self, ids: torch.Tensor, key_mask: Optional[torch.Tensor] = None,
                mask: str = "none") -> torch.Tensor:
        """Per-position logits for ids [.., T]; ``mask`` is "none" or "causal"."""
        if mask not in ("none", "causal"):
            raise ValueError(f"unknown mask {mask!r}")
        if ids.shape[-1] < 1:
            raise ValueError("empty input")
        x = self.embed(ids)
        for layer in self.layers:
            x = layer(x, key_mask, mask == "causal")
        return self.head(x)

    def init_state(self):
        if self.kind != "lt":
            raise TypeError("recurrent stepping needs a linear-attention encoder")
        return [layer.attn.init_state() for layer in self.layers]

    def step(self, state, token: int, position: int):
        """Process one token at 0-based ``position`` with the recurrent S/Z form."""
        if position >= MAX_POSITIONS:
            raise ValueError(f"position {position} exceeds capacity {MAX_POSITIONS}")
        x = self.proj(self.embedding.weight[token]) + self.positions[position].to(self.proj.weight.dtype)
        x = dropout(x, self.dropout_rate, self.training)
        new_state = []
        for layer, st in zip(self.layers, state):
            st, x = layer.step(st, x)
            new_state.append(st)
        return new_state, self.head(x)

    def forward_recurrent(self, ids: Sequence[int]) -> torch.Tensor:
        state = self.init_state()
        out = []
        for pos, tok in enumerate(ids):
            state, y = self.step(state, int(tok), pos)
            out.append(y)
        return torch.stack(out)
