import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tapir.engine import (InferenceState, PrefixTimeline, TapirModel, finalize, lstm_timeline, read_timelines,
                          run_restart_incremental, run_sentence, step, write_timelines)
from tapir.evalkit import edit_overhead
from tapir.layers import REVISE, WRITE, Encoder

LABELS = ["O", "B-A", "I-A", "B-B", "I-B"]


def make_model(delay=0, memory_size=3, seed=0, ctrl_layers=1, lstm_layers=1):
    gen = torch.Generator().manual_seed(seed)
    reviser = Encoder("trf", 12, 6, 8, 16, 1, len(LABELS), gen, heads=2)
    model = TapirModel(12, len(LABELS), reviser, gen, embed_dim=6, lstm_hidden=8, lstm_layers=lstm_layers,
                       ctrl_hidden=8, ctrl_layers=ctrl_layers, memory_size=memory_size, delay=delay)
    with torch.no_grad():
        # spread the policy scores so that mid-range thresholds see both actions
        model.policy.theta.mul_(6.0)
    model.labels = list(LABELS)
    model.eval()
    return model


def sentence(seed, n):
    return [int(i) for i in np.random.default_rng(seed).integers(2, 12, size=n)]


@pytest.mark.parametrize("delay", [0, 2])
def test_tau_one_is_the_plain_processor(delay):
    model = make_model(delay)
    ids = sentence(1, 9)
    tl = run_sentence(model, ids, tau=1.0)
    ref = lstm_timeline(model, ids)
    assert tl.rows == ref.rows
    assert tl.counters.reviser_calls == 0
    assert set(tl.actions) == {WRITE}
    assert edit_overhead(tl) == 0.0


@pytest.mark.parametrize("delay", [0, 1, 3])
def test_tau_zero_is_restart_incremental(delay):
    model = make_model(delay)
    ids = sentence(2, 8)
    tl = run_sentence(model, ids, tau=0.0)
    ref = run_restart_incremental(model.reviser, ids, LABELS, delay)
    assert tl.rows == ref.rows
    assert tl.counters.reviser_calls == len(ids) + delay


@pytest.mark.parametrize("delay", [0, 1, 2])
def test_delayed_row_lengths(delay):
    model = make_model(delay)
    ids = sentence(3, 6)
    tl = run_sentence(model, ids, tau=0.5)
    assert len(tl) == len(ids) + delay
    assert [len(r) for r in tl.rows] == [max(0, t - delay) for t in range(1, len(ids) + delay + 1)]
    assert len(finalize(tl)) == len(ids)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 25))
def test_restart_forward_count_is_triangular(n):
    model = make_model()
    tl = run_restart_incremental(model.reviser, sentence(n, n), LABELS)
    assert tl.counters.reviser_tokens == n * (n + 1) // 2
    assert tl.counters.reviser_calls == n


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 14), st.integers(0, 1000), st.sampled_from([0.2, 0.5, 0.8]), st.integers(0, 2))
def test_reviser_calls_equal_revise_actions(n, seed, tau, delay):
    model = make_model(delay, seed=seed % 3)
    tl = run_sentence(model, sentence(seed, n), tau=tau, check_cache=True)
    assert tl.counters.reviser_calls == tl.actions.count(REVISE)
    assert tl.counters.lstm_tokens == n + delay


def test_mid_threshold_mixes_actions():
    model = make_model()
    acts = []
    for s in range(20):
        acts += run_sentence(model, sentence(s, 10), tau=0.5).actions
    assert WRITE in acts and REVISE in acts


def test_write_after_revise_extends_revised_prefix():
    model = make_model()
    ids = sentence(4, 12)
    tl = run_sentence(model, ids, tau=0.5)
    for t in range(1, len(tl)):
        if tl.actions[t] == WRITE:
            assert tl.rows[t][:-1] == tl.rows[t - 1]


def test_kernel_scores_match_training_forward():
    model = make_model(ctrl_layers=2, lstm_layers=2)
    ids = sentence(5, 11)
    with torch.no_grad():
        logits, scores = model.forward_train(torch.tensor([ids]))
    tl = run_sentence(model, ids, tau=1.0)
    assert np.allclose(tl.scores, scores[0].numpy(), atol=1e-5)
    want = [LABELS[i] for i in logits[0].argmax(-1).tolist()]
    assert tl.rows[-1] == want


def test_step_exposes_state_progress():
    model = make_model()
    state = InferenceState.initial(model)
    a, p, row = step(model, state, 3, tau=0.0)
    assert a == REVISE and 0.0 <= p <= 1.0 and len(row) == 1
    assert state.t == 1 and state.x_buf == [3]


def test_label_mismatch_rejected():
    gen = torch.Generator().manual_seed(0)
    reviser = Encoder("trf", 12, 6, 8, 16, 1, 4, gen, heads=2)
    with pytest.raises(ValueError):
        TapirModel(12, 5, reviser, gen, embed_dim=6, lstm_hidden=8, ctrl_hidden=8)


def test_empty_sentence_rejected():
    model = make_model()
    with pytest.raises(ValueError):
        run_sentence(model, [])
    with pytest.raises(ValueError):
        run_restart_incremental(model.reviser, [], LABELS)


def test_finalize_is_last_row():
    tl = PrefixTimeline([["O"], ["B-A", "I-A"]], [WRITE, REVISE], [0.1, 0.9])
    assert finalize(tl) == ["B-A", "I-A"]
    with pytest.raises(ValueError):
        finalize(PrefixTimeline([], [], []))


def test_timeline_dump_roundtrip(tmp_path):
    model = make_model(delay=1)
    tls = [run_sentence(model, sentence(s, 5 + s), tau=0.5) for s in range(3)]
    path = tmp_path / "tl.txt"
    write_timelines(tls, path)
    back = read_timelines(path)
    assert [b.rows for b in back] == [t.rows for t in tls]
    assert [b.actions for b in back] == [t.actions for t in tls]
    assert all(np.allclose(b.scores, t.scores, atol=1e-6) for b, t in zip(back, tls))


def test_timeline_dump_rejects_out_of_order(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("t=2 a=W p=0.1\tO\n")
    with pytest.raises(ValueError):
        read_timelines(path)
