"""Command-line entry point: ``tapir <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from typing import List, Optional, Sequence

from .config import Config, ConfigError, load_config
from .corpus import Corpus, DataError, Vocab, load_conll, write_conll
from .engine import PrefixTimeline, TapirModel, run_restart_incremental, run_sentence, timed
from .evalkit import delayed_rows, evaluate_timelines, throughput_bench
from .layers import WRITE, Encoder
from .modelio import load_model, save_encoder, save_tapir
from .signal import (SignalError, action_shares, generate_actions, read_actions, train_action_generator,
                     write_actions)
from .synthetic import generate_corpus, generate_long_corpus
from .tensorkit import DEFAULT_SEED, NumericError, make_deterministic
from .trainer import train_reference, train_reviser, train_tapir

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _config(path: Optional[str]) -> Config:
    return load_config(path) if path else Config().validate()


def _setup(args, cfg: Optional[Config] = None) -> None:
    if args.deterministic:
        make_deterministic(cfg.train.seed if cfg else DEFAULT_SEED)


def _load(path, kind) -> object:
    try:
        model, _ = load_model(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc
    if not isinstance(model, kind):
        raise DataError(f"{path}: wrong checkpoint type {type(model).__name__}")
    return model


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _encode_all(model, corpus: Corpus) -> List[List[int]]:
    return [model.vocab.encode(s.tokens) for s in corpus]


def _check_labels(model, corpus: Corpus) -> None:
    unknown = sorted({lab for s in corpus for lab in s.labels} - set(model.labels))
    if unknown:
        raise DataError(f"corpus labels {unknown} are not in the model's inventory")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.long:
        corpus = generate_long_corpus(args.n, args.seed, args.min_len or 20)
    else:
        corpus = generate_corpus(args.n, args.seed, min_len=args.min_len or 1)
    write_conll(corpus, args.out)
    print(f"wrote {len(corpus)} sentences to {args.out} sha256={corpus.sha256}")
    return EXIT_OK


def cmd_gen_actions(args) -> int:
    cfg = _config(args.config)
    if cfg.signal.layers != 1:
        raise ConfigError("gen-actions needs signal.layers = 1")
    _setup(args, cfg)
    corpus = load_conll(args.corpus)
    vocab = Vocab.build([corpus])
    model, _ = train_action_generator(corpus, vocab, corpus.labels, cfg)
    actions = generate_actions(model, corpus, vocab, corpus.labels)
    write_actions(args.out, actions, corpus.sha256)
    if args.model_out:
        save_encoder(args.model_out, model, vocab, corpus.labels, role="signal")
    shares = action_shares(actions)
    print(f"actions W={shares[WRITE]:.4f} R={shares['R']:.4f} sentences={len(actions)}")
    return EXIT_OK


def _cmd_train_encoder(args, trainer, role: str) -> int:
    cfg = _config(args.config)
    _setup(args, cfg)
    corpus = load_conll(args.corpus)
    vocab = Vocab.build([corpus])
    model, hist = trainer(corpus, vocab, corpus.labels, cfg)
    save_encoder(args.model_out, model, vocab, corpus.labels, role=role,
                 extra={"corpus_sha256": corpus.sha256, "best_epoch": hist.best_epoch})
    return EXIT_OK


def cmd_train_reviser(args) -> int:
    return _cmd_train_encoder(args, train_reviser, "reviser")


def cmd_train_reference(args) -> int:
    return _cmd_train_encoder(args, train_reference, "reference")


def cmd_train_tapir(args) -> int:
    cfg = _config(args.config)
    _setup(args, cfg)
    corpus = load_conll(args.corpus)
    actions = read_actions(args.actions, expect_sha256=corpus.sha256)
    reviser = _load(args.reviser, Encoder)
    _check_labels(reviser, corpus)
    model, hist = train_tapir(corpus, actions, reviser, reviser.vocab, reviser.labels, cfg)
    save_tapir(args.model_out, model, reviser.vocab, reviser.labels,
               extra={"corpus_sha256": corpus.sha256, "best_epoch": hist.best_epoch})
    return EXIT_OK


def run_timelines(model, ids_list: Sequence[Sequence[int]], tau: Optional[float] = None) -> List[PrefixTimeline]:
    if isinstance(model, TapirModel):
        return [run_sentence(model, ids, tau) for ids in ids_list]
    return [run_restart_incremental(model, ids, model.labels) for ids in ids_list]


def _with_delay(tl: PrefixTimeline, d: int) -> PrefixTimeline:
    return PrefixTimeline(delayed_rows(tl, d), list(tl.actions) + [WRITE] * d,
                          list(tl.scores) + [0.0] * d, d, tl.counters)


def evaluate_model(model, corpus: Corpus, delay: Optional[int] = None, tau: Optional[float] = None,
                   timing: bool = True):
    """Run every sentence incrementally and score the timelines."""
    _check_labels(model, corpus)
    ids_list = _encode_all(model, corpus)
    timelines, seconds = timed(run_timelines, model, ids_list, tau)
    trained = getattr(model, "delay", 0)
    if delay is not None and delay != trained:
        if trained:
            raise ConfigError(f"model was trained with delay {trained}; cannot evaluate at {delay}")
        timelines = [_with_delay(tl, delay) for tl in timelines]
    if tau is None and isinstance(model, TapirModel):
        tau = model.tau
    report = evaluate_timelines(timelines, [list(s.labels) for s in corpus], tau=tau,
                                sents_per_sec=len(corpus) / seconds if timing else None)
    return report, timelines


def cmd_eval(args) -> int:
    _setup(args)
    model = _load(args.model, (TapirModel, Encoder))
    corpus = load_conll(args.corpus)
    report, _ = evaluate_model(model, corpus, args.delay, args.tau, timing=not args.deterministic)
    _write_json(args.report, report.to_dict())
    print(f"eo={report.eo:.4f} ct={report.ct:.4f} rc={report.rc:.4f} f1={report.f1} "
          f"revise={report.revise_ratio:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    _setup(args)
    model = _load(args.model, TapirModel)
    ref = _load(args.reference, Encoder)
    corpus = load_conll(args.corpus)
    _check_labels(model, corpus)
    ids_list = _encode_all(model, corpus)
    ref_ids = _encode_all(ref, corpus)
    tapir = throughput_bench(lambda ids: run_sentence(model, ids), ids_list, args.warmup, args.iters)
    restart = throughput_bench(lambda ids: run_restart_incremental(ref, ids, ref.labels), ref_ids,
                               args.warmup, args.iters)
    expected = sum(len(x) * (len(x) + 1) // 2 for x in ref_ids)
    report = {
        "tapir": tapir, "restart": restart,
        "speedup": tapir["sents_per_sec"] / restart["sents_per_sec"],
        "restart_forwards_expected": expected,
        "restart_forwards_ok": restart["token_forwards"] == expected,
        "mean_length": sum(map(len, ids_list)) / len(ids_list),
        "n_sentences": len(ids_list),
    }
    _write_json(args.report, report)
    print(f"tapir={tapir['sents_per_sec']:.2f}/s restart={restart['sents_per_sec']:.2f}/s "
          f"speedup={report['speedup']:.2f} revise={tapir['revise_ratio']:.3f}")
    return EXIT_OK


def parse_taus(text: str) -> List[float]:
    try:
        taus = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --taus value {text!r}") from None
    if not taus or any(not 0.0 <= t <= 1.0 for t in taus):
        raise ConfigError("every tau must lie in [0, 1]")
    return taus


def sweep_rows(model: TapirModel, corpus: Corpus, taus: Sequence[float]) -> List[dict]:
    rows = []
    for tau in taus:
        rep, _ = evaluate_model(model, corpus, tau=tau, timing=False)
        score = rep.f1 if rep.f1 is not None else rep.accuracy
        rows.append({"tau": tau, "eo": rep.eo, "ct": rep.ct, "rc": rep.rc, "score": score,
                     "reviser_calls": rep.reviser_calls})
    return rows


def cmd_sweep_tau(args) -> int:
    _setup(args)
    model = _load(args.model, TapirModel)
    corpus = load_conll(args.corpus)
    rows = sweep_rows(model, corpus, parse_taus(args.taus))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["tau", "eo", "ct", "rc", "score", "reviser_calls"],
                                lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    for r in rows:
        print(f"tau={r['tau']:.2f} eo={r['eo']:.4f} ct={r['ct']:.4f} rc={r['rc']:.4f} calls={r['reviser_calls']}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tapir", description="Incremental sequence labelling with adaptive revision.")
    p.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels, fixed seed")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the seeded synthetic corpus in CoNLL format")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--min-len", type=int, default=0)
    s.add_argument("--long", action="store_true", help="longer sentences for throughput runs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gen-actions", help="train the LT generator and write WRITE/REVISE supervision")
    s.add_argument("--config")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model-out", help="also keep the generator checkpoint")
    s.set_defaults(func=cmd_gen_actions)

    for name, fn in (("train-reviser", cmd_train_reviser), ("train-reference", cmd_train_reference)):
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--corpus", required=True)
        s.add_argument("--model-out", required=True)
        s.set_defaults(func=fn)

    s = sub.add_parser("train-tapir")
    s.add_argument("--config")
    s.add_argument("--corpus", required=True)
    s.add_argument("--actions", required=True)
    s.add_argument("--reviser", required=True)
    s.add_argument("--model-out", required=True)
    s.set_defaults(func=cmd_train_tapir)

    s = sub.add_parser("eval")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--delay", type=int, choices=(0, 1, 2))
    s.add_argument("--tau", type=float)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench")
    s.add_argument("--model", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--iters", type=int, default=3)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep-tau")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--taus", default=",".join(f"{i / 10:.1f}" for i in range(11)))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_tau)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "tau", None) is not None and not 0.0 <= args.tau <= 1.0:
        print("error: --tau must lie in [0, 1]", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SignalError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
