import io

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpe.evaluation import (
    EvalReport, ExperimentConfig, accuracy_at_k, average_precision_at_k, format_table,
    run_experiment, write_report_tsv,
)
from mpe.model import Hyperparams
from oracles import brute_metrics


def test_hand_fixture():
    ranked = [["a", "b", "c"], ["b", "a", "c"], ["c", "b", "a"], ["x", "y", "z"]]
    truths = ["a", "a", "a", "a"]
    assert accuracy_at_k(ranked, truths, 1) == 0.25
    assert accuracy_at_k(ranked, truths, 3) == 0.75
    assert average_precision_at_k(ranked, truths, 3) == pytest.approx((1 + 1 / 2 + 1 / 3) / 4)
    assert average_precision_at_k(ranked, truths, 2) == pytest.approx(1.5 / 4)


def test_short_lists_and_empty():
    assert accuracy_at_k([["a"]], ["b"], 3) == 0.0
    assert accuracy_at_k([], [], 1) == 0.0


def test_length_mismatch():
    with pytest.raises(ValueError):
        accuracy_at_k([["a"]], [], 1)
    with pytest.raises(ValueError):
        average_precision_at_k([["a"]], ["a"], 0)


lists = st.lists(st.tuples(st.permutations("abcde"), st.sampled_from("abcdef")), min_size=1, max_size=20)


@given(lists, st.integers(1, 5))
def test_metric_properties(rows, k):
    ranked, truths = [r for r, _ in rows], [t for _, t in rows]
    acc, ap = accuracy_at_k(ranked, truths, k), average_precision_at_k(ranked, truths, k)
    want_acc, want_ap = brute_metrics(ranked, truths, k)
    assert acc == pytest.approx(float(want_acc)) and ap == pytest.approx(float(want_ap))
    assert 0 <= ap <= acc <= 1
    if k > 1:
        assert accuracy_at_k(ranked, truths, k - 1) <= acc


def test_report_stats():
    rep = EvalReport("m", (1,), runs=[{"acc@1": 0.2, "ap@1": 0.2}, {"acc@1": 0.4, "ap@1": 0.4}])
    assert rep.mean["acc@1"] == pytest.approx(0.3)
    assert rep.stderr["acc@1"] == pytest.approx(0.1)


def test_run_experiment_smoke(small_corpus):
    quads = sum(small_corpus, [])
    cfg = ExperimentConfig(models=("mpe", "mpe-plain", "mm", "bayes"), runs=2,
                           hyper=Hyperparams(dim=4, epochs=2, lr=0.01))
    reports = run_experiment(quads, cfg)
    assert set(reports) == {"mpe", "mpe-plain", "mm", "bayes"}
    assert len(reports["mpe"].runs) == 2 and len(reports["mm"].runs) == 1
    buf = io.StringIO()
    write_report_tsv(reports, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("model\trun\tacc@1")
    assert len(lines) == 1 + 3 + 3 + 2 + 2
    assert "mpe-plain" in format_table(reports)
    assert run_experiment(quads, cfg)["mpe"].runs == reports["mpe"].runs


def test_unknown_model():
    with pytest.raises(ValueError):
        ExperimentConfig(models=("rnn",))
