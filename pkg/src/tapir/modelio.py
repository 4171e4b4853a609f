"""Saving and restoring encoders and two-pass models as TAPIRCKPT files."""
from __future__ import annotations

from typing import Dict, Tuple, Union

import torch

from .corpus import Vocab
from .engine import TapirModel
from .layers import Encoder
from .tensorkit import load_checkpoint, save_checkpoint

_INT_KEYS = {"n_tokens", "embed_dim", "d_model", "ffn", "layers", "n_labels", "heads", "lstm_hidden",
             "lstm_layers", "ctrl_hidden", "ctrl_layers", "memory_size", "delay"}
_FLOAT_KEYS = {"dropout_rate", "tau"}


def _params(model: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items() if not k.endswith("positions")}


def _parse(hyper: Dict[str, str], prefix: str = "") -> Dict:
    out = {}
    for k, v in hyper.items():
        if not k.startswith(prefix):
            continue
        key = k[len(prefix):]
        if "." in key:
            continue
        if key in _INT_KEYS:
            out[key] = int(v)
        elif key in _FLOAT_KEYS:
            out[key] = float(v)
        else:
            out[key] = v
    return out


def _meta(vocab: Vocab, labels) -> Dict[str, str]:
    return {"vocab": "\t".join(vocab.itos), "labels": "\t".join(labels)}


def save_encoder(path, encoder: Encoder, vocab: Vocab, labels, role: str = "reviser", extra=None) -> None:
    hyper = {"format": "encoder", "role": role, **{k: str(v) for k, v in encoder.hparams.items()}}
    hyper.update(_meta(vocab, labels))
    hyper.update({k: str(v) for k, v in (extra or {}).items()})
    save_checkpoint(path, _params(encoder), hyper)


def _build_encoder(hp: Dict) -> Encoder:
    return Encoder(hp["kind"], hp["n_tokens"], hp["embed_dim"], hp["d_model"], hp["ffn"], hp["layers"],
                   hp["n_labels"], torch.Generator().manual_seed(0), heads=hp["heads"],
                   dropout_rate=hp["dropout_rate"])


def save_tapir(path, model: TapirModel, vocab: Vocab, labels, extra=None) -> None:
    hyper = {"format": "tapir", **{k: str(v) for k, v in model.hparams.items()},
             "tau": repr(float(model.tau)), "delay": str(model.delay)}
    hyper.update({f"reviser.{k}": str(v) for k, v in model.reviser.hparams.items()})
    hyper.update(_meta(vocab, labels))
    hyper.update({k: str(v) for k, v in (extra or {}).items()})
    save_checkpoint(path, _params(model), hyper)


def _restore(model: torch.nn.Module, tensors: Dict[str, torch.Tensor]) -> None:
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    missing = [k for k in missing if not k.endswith("positions")]
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing={missing} unexpected={unexpected}")


def load_model(path) -> Tuple[Union[Encoder, TapirModel], Dict[str, str]]:
    """Restore an Encoder or TapirModel; ``.vocab`` and ``.labels`` are attached."""
    tensors, hyper = load_checkpoint(path)
    fmt = hyper.get("format")
    if fmt == "encoder":
        model = _build_encoder(_parse(hyper))
    elif fmt == "tapir":
        hp = _parse(hyper)
        reviser = _build_encoder(_parse(hyper, "reviser."))
        model = TapirModel(hp["n_tokens"], hp["n_labels"], reviser, torch.Generator().manual_seed(0),
                           embed_dim=hp["embed_dim"], lstm_hidden=hp["lstm_hidden"],
                           lstm_layers=hp["lstm_layers"], ctrl_hidden=hp["ctrl_hidden"],
                           ctrl_layers=hp["ctrl_layers"], memory_size=hp["memory_size"], tau=hp["tau"],
                           delay=hp["delay"], dropout_rate=hp["dropout_rate"])
    else:
        raise ValueError(f"{path}: unknown model format {fmt!r}")
    _restore(model, tensors)
    model.eval()
    model.vocab = Vocab(hyper["vocab"].split("\t"))
    model.labels = hyper["labels"].split("\t")
    return model, hyper
