"""Numerical substrate: autodiff entry point, initialisers, losses, AdamW,
learning-rate schedule, gradient checking and the binary checkpoint format.

Reverse-mode differentiation itself is delegated to torch's autograd; the
pieces that define how the models are trained (optimiser, schedule, losses,
initialisation, clipping) live here so that they are explicit and testable.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

DEFAULT_SEED = 42119392
BCE_EPS = 1e-7

CKPT_MAGIC = b"TAPIRCKPT"
CKPT_VERSION = 1
_DTYPE_TAGS = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_TAG_NP = {0: "<f4", 1: "<f8", 2: "<i8"}


class TensorkitError(RuntimeError):
    pass


class NumericError(TensorkitError):
    """Raised when a forward or backward pass produces NaN/Inf."""


def set_default_precision(double: bool) -> None:
    torch.set_default_dtype(torch.float64 if double else torch.float32)


def make_deterministic(seed: int = DEFAULT_SEED) -> torch.Generator:
    """Single-threaded, deterministic execution; returns a seeded generator."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def backward(loss: torch.Tensor) -> None:
    """Back-propagate a scalar loss through the recorded graph.

    Gradients accumulate into ``.grad`` of every leaf that requires grad.
    A graph can be consumed only once.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise TensorkitError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise TensorkitError("loss is not connected to any tracked tensor")
    check_finite(loss.detach(), "loss")
    try:
        loss.backward()
    except RuntimeError as exc:  # graph freed by an earlier backward
        raise TensorkitError(f"tape already consumed: {exc}") from exc


def zero_grads(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad = None


# --------------------------------------------------------------------------
# initialisation


def _fans(shape: Sequence[int]) -> Tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(shape: Sequence[int], generator: torch.Generator,
                dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    """Uniform Glorot init in [-a, a], a = sqrt(6 / (fan_in + fan_out))."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ValueError(f"xavier_init needs positive extents, got {shape}")
    fan_in, fan_out = _fans(shape)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    dtype = dtype or torch.get_default_dtype()
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    return ((u * 2.0 - 1.0) * bound).to(dtype)


# --------------------------------------------------------------------------
# elementwise helpers shared by the layers


def elu(x: torch.Tensor) -> torch.Tensor:
    return torch.where(x > 0, x, torch.expm1(torch.clamp(x, max=0.0)))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def dropout(x: torch.Tensor, rate: float, training: bool,
            generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Inverted dropout: surviving units are scaled by 1/(1-rate) at train time."""
    if not training or rate <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


# --------------------------------------------------------------------------
# losses


def cross_entropy_loss(logits: torch.Tensor, gold: torch.Tensor,
                       mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over (unmasked) positions of -log softmax(logits)[gold].

    ``logits`` is [..., L]; ``gold`` holds label indices with the leading shape.
    """
    n_labels = logits.shape[-1]
    flat = logits.reshape(-1, n_labels)
    g = gold.reshape(-1)
    if mask is None:
        m = torch.ones_like(g, dtype=torch.bool)
    else:
        m = mask.reshape(-1).bool()
    sel = g[m]
    if sel.numel() and (sel.min() < 0 or sel.max() >= n_labels):
        raise ValueError(f"gold label out of range [0, {n_labels})")
    if not m.any():
        return flat.sum() * 0.0
    logp = log_softmax(flat[m], dim=-1)
    picked = logp.gather(1, sel.unsqueeze(1)).squeeze(1)
    return -picked.mean()


def bce_loss(score: torch.Tensor, target: torch.Tensor,
             mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Binary cross entropy on probabilities, clamped to [eps, 1-eps]."""
    s = torch.clamp(score, BCE_EPS, 1.0 - BCE_EPS)
    t = target.to(s.dtype)
    per = -(t * torch.log(s) + (1.0 - t) * torch.log(1.0 - s))
    if mask is None:
        return per.mean()
    m = mask.to(s.dtype)
    denom = m.sum()
    if denom.item() == 0:
        return per.sum() * 0.0
    return (per * m).sum() / denom


# --------------------------------------------------------------------------
# optimisation


def clip_global_norm(grads: Sequence[torch.Tensor], max_norm: Optional[float]) -> float:
    """Scale ``grads`` in place if their joint L2 norm exceeds ``max_norm``.

    Returns the pre-clip norm. ``max_norm`` of None or <= 0 disables clipping.
    """
    grads = [g for g in grads if g is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g.detach().double() ** 2).sum()) for g in grads))
    if max_norm is not None and max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    exp_avg: List[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: List[torch.Tensor] = field(default_factory=list)


def adamw_step(params: Sequence[torch.Tensor], grads: Sequence[Optional[torch.Tensor]],
               state: OptimState) -> OptimState:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    if len(state.exp_avg) != len(params):
        raise ValueError("optimiser state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape or m.shape != p.shape:
                raise ValueError(f"shape mismatch: param {tuple(p.shape)} grad {tuple(g.shape)}")
            if state.weight_decay:
                p.mul_(1.0 - state.lr * state.weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / bc1)
    return state


def lr_schedule(epoch: int, base_lr: float, warmup_epochs: int = 5,
                decay_points: Iterable[int] = (30, 40, 45), factor: float = 0.5) -> float:
    """Linear warmup (0-indexed epochs, first epoch gets base/warmup), then
    step decay by ``factor`` from each decay epoch onward."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    n = sum(1 for p in decay_points if epoch >= p)
    return base_lr * factor ** n


# --------------------------------------------------------------------------
# gradient checking


def finite_difference_grads(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                            h: float = 1e-5) -> List[torch.Tensor]:
    """Central differences of scalar ``fn()`` w.r.t. every element of ``tensors``.

    The tensors are perturbed in place and restored afterwards.
    """
    out = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat = t.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(fn())
                flat[i] = orig - h
                fm = float(fn())
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            out.append(g)
    return out


def gradient_check(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                   h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max elementwise relative error between autograd and central differences.

    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
                for t in tensors]
    numeric = finite_difference_grads(fn, tensors, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], hyper: Mapping[str, str]) -> None:
    """Write the little-endian TAPIRCKPT container.

    Layout: magic, u32 version, u32 hyper length, UTF-8 ``key=value`` lines,
    u32 entry count, then per entry (u32 name length, name, u8 dtype tag,
    u32 ndim, u32 dims..., u64 offset, u64 nbytes), then the payload region.
    Offsets are relative to the payload start. Entries are sorted by name.
    """
    hyper_lines = []
    for k in sorted(hyper):
        v = str(hyper[k])
        if "\n" in v or "=" in k:
            raise ValueError(f"hyperparameter {k!r} cannot be stored as key=value")
        hyper_lines.append(f"{k}={v}")
    hyper_blob = "\n".join(hyper_lines).encode("utf-8")

    manifest = io.BytesIO()
    payload = io.BytesIO()
    names = sorted(tensors)
    manifest.write(struct.pack("<I", len(names)))
    for name in names:
        t = tensors[name].detach().cpu()
        if t.dtype not in _DTYPE_TAGS:
            raise ValueError(f"unsupported dtype {t.dtype} for {name}")
        tag = _DTYPE_TAGS[t.dtype]
        raw = t.contiguous().numpy().astype(_TAG_NP[tag], copy=False).tobytes()
        nb = name.encode("utf-8")
        manifest.write(struct.pack("<I", len(nb)))
        manifest.write(nb)
        manifest.write(struct.pack("<BI", tag, t.dim()))
        manifest.write(struct.pack(f"<{t.dim()}I", *t.shape))
        manifest.write(struct.pack("<QQ", payload.tell(), len(raw)))
        payload.write(raw)

    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hyper_blob)))
        fh.write(hyper_blob)
        fh.write(manifest.getvalue())
        fh.write(payload.getvalue())


def load_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], Dict[str, str]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a TAPIRCKPT file")
    pos = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    hyper: Dict[str, str] = {}
    for line in data[pos:pos + hlen].decode("utf-8").split("\n"):
        if line:
            k, v = line.split("=", 1)
            hyper[k] = v
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        tag, ndim = struct.unpack_from("<BI", data, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        off, nbytes = struct.unpack_from("<QQ", data, pos)
        pos += 16
        entries.append((name, tag, shape, off, nbytes))
    tensors = {}
    for name, tag, shape, off, nbytes in entries:
        arr = np.frombuffer(data, dtype=_TAG_NP[tag], count=nbytes // np.dtype(_TAG_NP[tag]).itemsize,
                            offset=pos + off).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy()).to(_TAG_DTYPES[tag])
    return tensors, hyper
