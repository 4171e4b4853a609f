import csv
import json

import pytest

from helpers import TINY_CFG
from tapir.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main, parse_taus
from tapir.config import ConfigError


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY_CFG)
    f = lambda name: str(d / name)
    assert main(["synth", "--n", "120", "--seed", "3", "--out", f("train.conll")]) == EXIT_OK
    assert main(["synth", "--n", "20", "--seed", "4", "--out", f("test.conll")]) == EXIT_OK
    cfg = ["--config", f("tiny.cfg"), "--corpus", f("train.conll")]
    assert main(["--deterministic", "gen-actions", *cfg, "--out", f("actions.txt")]) == EXIT_OK
    assert main(["--deterministic", "train-reviser", *cfg, "--model-out", f("rev.ckpt")]) == EXIT_OK
    assert main(["--deterministic", "train-reference", *cfg, "--model-out", f("ref.ckpt")]) == EXIT_OK
    assert main(["--deterministic", "train-tapir", *cfg, "--actions", f("actions.txt"), "--reviser", f("rev.ckpt"),
                 "--model-out", f("tapir.ckpt")]) == EXIT_OK
    return f


def test_eval_report_keys(work):
    assert main(["--deterministic", "eval", "--model", work("tapir.ckpt"), "--corpus", work("test.conll"),
                 "--report", work("r.json")]) == EXIT_OK
    rep = json.loads(open(work("r.json")).read())
    for key in ("eo", "ct", "rc", "eo_d1", "rc_d1", "eo_d2", "rc_d2", "f1", "accuracy", "sents_per_sec",
                "revise_ratio", "table7"):
        assert key in rep
    assert 0 <= rep["eo"] <= 1 and 0 <= rep["rc"] <= 1


def test_eval_reference_and_delay(work):
    assert main(["eval", "--model", work("ref.ckpt"), "--corpus", work("test.conll"), "--delay", "1",
                 "--report", work("ref.json")]) == EXIT_OK
    rep = json.loads(open(work("ref.json")).read())
    assert rep["delay"] == 1 and rep["sents_per_sec"] > 0


def test_eval_tau_one_is_monotonic(work):
    assert main(["eval", "--model", work("tapir.ckpt"), "--corpus", work("test.conll"), "--tau", "1.0",
                 "--report", work("t1.json")]) == EXIT_OK
    rep = json.loads(open(work("t1.json")).read())
    assert (rep["eo"], rep["ct"], rep["rc"], rep["reviser_calls"]) == (0.0, 0.0, 1.0, 0)


def test_sweep_and_bench(work):
    assert main(["sweep-tau", "--model", work("tapir.ckpt"), "--corpus", work("test.conll"), "--taus", "0,0.5,1",
                 "--out", work("s.csv")]) == EXIT_OK
    rows = list(csv.DictReader(open(work("s.csv"))))
    assert [r["tau"] for r in rows] == ["0.000000", "0.500000", "1.000000"]
    assert list(rows[0]) == ["tau", "eo", "ct", "rc", "score", "reviser_calls"]
    calls = [int(r["reviser_calls"]) for r in rows]
    assert calls == sorted(calls, reverse=True) and calls[-1] == 0
    assert main(["bench", "--model", work("tapir.ckpt"), "--reference", work("ref.ckpt"), "--corpus",
                 work("test.conll"), "--warmup", "0", "--iters", "1", "--report", work("b.json")]) == EXIT_OK
    rep = json.loads(open(work("b.json")).read())
    assert rep["restart_forwards_ok"] and rep["speedup"] > 0


def test_deterministic_reports_identical(work):
    for name in ("d1.json", "d2.json"):
        assert main(["--deterministic", "eval", "--model", work("tapir.ckpt"), "--corpus", work("test.conll"),
                     "--report", work(name)]) == EXIT_OK
    assert open(work("d1.json"), "rb").read() == open(work("d2.json"), "rb").read()


def test_exit_codes(work, tmp_path):
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("[model]\ntau = 2\n")
    assert main(["train-reviser", "--config", str(bad_cfg), "--corpus", work("train.conll"),
                 "--model-out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["eval", "--model", work("tapir.ckpt"), "--corpus", work("test.conll"), "--tau", "3",
                 "--report", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["eval", "--model", str(tmp_path / "missing"), "--corpus", work("test.conll"),
                 "--report", str(tmp_path / "x")]) == EXIT_DATA
    # actions bound to a different corpus
    assert main(["train-tapir", "--config", work("tiny.cfg"), "--corpus", work("test.conll"),
                 "--actions", work("actions.txt"), "--reviser", work("rev.ckpt"),
                 "--model-out", str(tmp_path / "x")]) == EXIT_DATA
    # a TAPIR checkpoint where an encoder is required
    assert main(["train-tapir", "--config", work("tiny.cfg"), "--corpus", work("train.conll"),
                 "--actions", work("actions.txt"), "--reviser", work("tapir.ckpt"),
                 "--model-out", str(tmp_path / "x")]) == EXIT_DATA
    assert main(["sweep-tau", "--model", work("tapir.ckpt"), "--corpus", work("test.conll"), "--taus", "0,x",
                 "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    ragged = tmp_path / "ragged.conll"
    ragged.write_text("a\tb\tO\nc\tO\n")
    assert main(["eval", "--model", work("tapir.ckpt"), "--corpus", str(ragged),
                 "--report", str(tmp_path / "x")]) == EXIT_DATA


def test_parse_taus():
    assert parse_taus("0, 0.5,1") == [0.0, 0.5, 1.0]
    with pytest.raises(ConfigError):
        parse_taus("1.5")
