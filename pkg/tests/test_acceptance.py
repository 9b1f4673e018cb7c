"""One test per acceptance criterion; each prints a PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary.
"""
import math
import os
import random
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mpe import model as mpe_model
from mpe.baselines import bayes_rank, fit_counts, markov_rank
from mpe.cli import main
from mpe.data import TimeSlotting, build_quadruples, build_vocab_and_index, filter_by_transition_frequency, split
from mpe.data import GridSpec, gps_to_records, read_porto_trips
from mpe.evaluation import ExperimentConfig, accuracy_at_k, average_precision_at_k, run_experiment
from mpe.model import ComponentMask, Hyperparams, TrainingInstance, fit_mpe, train
from mpe.predict import Query
from mpe.synth import SynthConfig, phantom_rate, synth_quadruples
from oracles import brute_bayes, brute_markov, brute_metrics, fd_gradient_errors, random_store

# Desk-scale corpora see a few hundred times fewer updates per epoch than the
# original corpora, so the synthetic fixtures train with a larger step.
DESK_LR = 0.01


def verdict(number, title, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_c01_gradient_oracle():
    rng = np.random.default_rng(2024)
    sizes = (4, 4, 6, 7)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        store = random_store(rng, sizes, 5)
        inst = TrainingInstance(*(int(rng.integers(n)) for n in sizes), int(rng.integers(sizes[3])))
        mask = ComponentMask(bool(rng.integers(2)), bool(rng.integers(2)))
        worst = max(worst, *fd_gradient_errors(store, mask, inst, reg=float(rng.uniform(0, 0.1))))
    elapsed = time.perf_counter() - start
    verdict(1, "sgd_step matches central differences", worst <= 1e-4 and elapsed < 5,
            f"max rel err {worst:.2e} (<= 1e-4), {elapsed:.2f}s (< 5s)")


def test_c02_update_count_and_linear_time(monkeypatch, synth_fixture):
    _, _, quads = synth_fixture
    small = quads[:300]
    vocab, _, idx = build_vocab_and_index(small)
    calls = 0
    real_step = mpe_model.sgd_step

    def counting(*args, **kw):
        nonlocal calls
        calls += 1
        return real_step(*args, **kw)

    monkeypatch.setattr(mpe_model, "sgd_step", counting)
    epochs, negatives = 3, 4
    train(idx, vocab.sizes, Hyperparams(dim=4, negatives=negatives, epochs=epochs, lr=DESK_LR), backend="python")
    expected = epochs * negatives * len(small)
    monkeypatch.undo()

    vocab, _, idx = build_vocab_and_index(quads)
    train(idx, vocab.sizes, Hyperparams(dim=10, epochs=1))  # compile outside the timed region
    times = {}
    for dim in (10, 50, 100, 200, 300):
        runs = []
        for _ in range(3):
            t0 = time.perf_counter()
            train(idx, vocab.sizes, Hyperparams(dim=dim, epochs=2, lr=DESK_LR))
            runs.append(time.perf_counter() - t0)
        times[dim] = min(runs)
    ratios = {d: times[d] / times[10] for d in times}
    linear = all(ratios[d] <= 2 * d / 10 for d in ratios)
    verdict(2, "update count and linear-in-D time", calls == expected and linear,
            f"{calls} sgd_step calls (expected I*M*|C| = {expected}); "
            f"t(D)/t(10) = {', '.join(f'{d}:{r:.2f}' for d, r in ratios.items())} (<= 2*D/10)")


def test_c03_convergence_trend(synth_fixture):
    _, _, quads = synth_fixture
    train_q, _, _ = split(quads, seed=0)
    start = time.perf_counter()
    model = fit_mpe(train_q, Hyperparams(lr=DESK_LR, epochs=10, seed=1))
    elapsed = time.perf_counter() - start
    ell = [v for _, v in model.history]
    early, late = statistics.mean(ell[:3]), statistics.mean(ell[7:10])
    change = abs(ell[9] - ell[8]) / abs(ell[8])
    verdict(3, "objective rises then plateaus", late >= early and change < 0.05 and elapsed < 60,
            f"mean l(8-10) {late:.1f} >= mean l(1-3) {early:.1f}; |l10-l9|/|l9| = {change:.4f} (< 0.05); "
            f"{elapsed:.1f}s (< 60s)")


def _ablation(object_signal, time_signal, partial):
    config = SynthConfig(object_signal=object_signal, time_signal=time_signal)
    _, quads = synth_quadruples(config)
    reports = run_experiment(quads, ExperimentConfig(models=("mpe", partial, "mpe-plain"), runs=5, ks=(1,),
                                                     hyper=Hyperparams(lr=DESK_LR)))
    acc = {name: [row["acc@1"] for row in rep.runs] for name, rep in reports.items()}
    return acc


def _gap_ok(a, b):
    """Mean of a - b is >= -1 standard error of the paired per-seed differences."""
    diff = [x - y for x, y in zip(a, b)]
    se = statistics.stdev(diff) / math.sqrt(len(diff))
    return statistics.mean(diff) >= -se, statistics.mean(diff), se


def test_c04_ablation_ordering():
    start = time.perf_counter()
    lines, ok = [], True
    for sig_o, sig_t, partial in ((0.9, 0.3, "mpe-object"), (0.3, 0.9, "mpe-time")):
        acc = _ablation(sig_o, sig_t, partial)
        for hi, lo in (("mpe", partial), (partial, "mpe-plain")):
            good, mean, se = _gap_ok(acc[hi], acc[lo])
            ok &= good
            lines.append(f"{hi}-{lo} {mean:+.4f} (se {se:.4f})")
        lines.append(" / ".join(f"{n} {statistics.mean(v):.3f}" for n, v in acc.items()))
    elapsed = time.perf_counter() - start
    verdict(4, "ablation ordering", ok and elapsed < 300, "; ".join(lines) + f"; {elapsed:.0f}s (< 300s)")


def chain_fixture(n_chains=30, reps=20, n_objects=10, n_slots=5, seed=0):
    """Disjoint chains A_i -> B_i -> C_i; no A_i -> C_i is ever observed."""
    rng = np.random.default_rng(seed)
    quads = []
    for i in range(n_chains):
        for _ in range(reps):
            o, t = f"o{rng.integers(n_objects)}", int(rng.integers(n_slots - 1))
            quads.append((o, t, f"A{i:02d}", f"B{i:02d}"))
            quads.append((o, t + 1, f"B{i:02d}", f"C{i:02d}"))
    return quads


def test_c05_role_separation():
    reports = run_experiment(chain_fixture(), ExperimentConfig(models=("mpe", "mpe-tied"), runs=5, ks=(1,),
                                                               full_vocab=True, hyper=Hyperparams(lr=DESK_LR)))
    sep, tied = reports["mpe"].mean["acc@1"], reports["mpe-tied"].mean["acc@1"]
    verdict(5, "separate location roles beat tied embeddings", sep - tied >= 0.05,
            f"acc@1 {sep:.3f} vs tied {tied:.3f}, gap {sep - tied:+.3f} (>= 0.05)")


HAND_FIXTURES = [
    # (ranked lists, truths)
    ([["a", "b", "c"], ["b", "a", "c"], ["c", "b", "a"], ["x", "y", "z"]], ["a"] * 4),
    ([["p", "q"], ["q", "p"]], ["q", "q"]),
    ([["a"], ["b", "c", "d", "e"], ["e", "d", "c", "b", "a"]], ["a", "e", "a"]),
]


def test_c06_metric_oracle():
    ok = True
    for ranked, truths in HAND_FIXTURES:
        for k in (1, 2, 3, 4, 5):
            acc, ap = brute_metrics(ranked, truths, k)
            ok &= accuracy_at_k(ranked, truths, k) == float(acc)
            ok &= average_precision_at_k(ranked, truths, k) == float(ap)
        ok &= accuracy_at_k(ranked, truths, 1) == average_precision_at_k(ranked, truths, 1)
    rng = random.Random(6)
    violations = 0
    for _ in range(1000):
        n, k = rng.randint(1, 20), rng.randint(1, 6)
        pool = list("abcdefgh")
        ranked = [rng.sample(pool, rng.randint(0, 8)) for _ in range(n)]
        truths = [rng.choice(pool) for _ in range(n)]
        acc, ap = accuracy_at_k(ranked, truths, k), average_precision_at_k(ranked, truths, k)
        violations += ap > acc
        violations += accuracy_at_k(ranked, truths, 1) != average_precision_at_k(ranked, truths, 1)
        b_acc, b_ap = brute_metrics(ranked, truths, k)
        violations += not (math.isclose(acc, b_acc, rel_tol=1e-12) and math.isclose(ap, b_ap, rel_tol=1e-12))
    verdict(6, "metric oracle", ok and violations == 0,
            f"hand fixtures exact: {ok}; {violations} violations in 1000 random trials")


def test_c07_baseline_oracles():
    rng = random.Random(7)
    mismatches, checked = 0, 0
    for _ in range(150):
        train = [(rng.choice("abc"), rng.randint(0, 2), rng.choice("ABCD"), rng.choice("ABCDE"))
                 for _ in range(rng.randint(1, 50))]
        mm, nb = fit_counts(train, 0.0), fit_counts(train, rng.choice([0.0, 0.5, 1.0]))
        for o in "abcz":
            for t in (0, 1, 2):
                for li in sorted({q[2] for q in train}):
                    cands = mm.candidates(li)
                    exact = brute_markov(train, 0, o, li, cands)
                    want = sorted(cands, key=lambda c: (-exact[c], c))
                    got = markov_rank(mm, Query(o, t, li), len(cands))
                    mismatches += got.tokens != want
                    mismatches += any(s != float(exact[c]) for c, s in got.items)
                    post = brute_bayes(train, nb.alpha, o, t, li, cands)
                    want = sorted(cands, key=lambda c: (-post[c], c))
                    mismatches += bayes_rank(nb, Query(o, t, li), len(cands)).tokens != want
                    checked += 1
    scaled = 0
    for _ in range(100):
        train = [(rng.choice("ab"), rng.randint(0, 1), rng.choice("ABC"), rng.choice("ABCD"))
                 for _ in range(rng.randint(1, 40))]
        base, big = fit_counts(train, 0.0), fit_counts(train * 3, 0.0)
        for o, t, li, _ in set(train):
            q = Query(o, t, li)
            scaled += bayes_rank(base, q, 4).tokens != bayes_rank(big, q, 4).tokens
    verdict(7, "count baselines match brute force", mismatches == 0 and scaled == 0,
            f"{mismatches} mismatches over {checked} queries; {scaled} rankings changed under 3x count scaling")


def test_c08_phantom_rate(synth_fixture):
    rings = []
    for n in range(4, 9):
        walk = [f"L{i % n}" for i in range(5 * n)]
        rings.append(phantom_rate([("v", 0, a, b) for a, b in zip(walk, walk[1:])]))
    shortcut = phantom_rate([("v", 0, "A", "B"), ("v", 0, "B", "C"), ("w", 0, "A", "C")])
    _, _, quads = synth_fixture
    realistic = phantom_rate(quads)
    verdict(8, "phantom-rate diagnostics",
            all(r == 0.0 for r in rings) and shortcut == 1.0 and 0 < realistic < 0.3,
            f"rings {rings}; shortcut {shortcut}; synthetic graph {realistic:.4f} in (0, 0.3)")


PORTO_GRID = GridSpec(41.0, 41.3, -8.8, -8.4, 0.005)


def test_c09_porto_direction():
    if not os.environ.get("MPE_PORTO_CSV"):
        ACCEPTANCE_LINES.append("criterion  9 SKIP  Porto subsample ordering: MPE_PORTO_CSV not set (optional, needs the public data)")
        pytest.skip("set MPE_PORTO_CSV to the Porto train.csv path")
    path = Path(os.environ["MPE_PORTO_CSV"])
    start = time.perf_counter()
    with open(path, encoding="utf-8") as f:
        taxis = sorted({row.split(",")[4].strip('"') for row in f.readlines()[1:]})
    keep = set(random.Random(9).sample(taxis, max(1, len(taxis) // 100)))
    with open(path, encoding="utf-8") as f:
        pings = list(read_porto_trips(f, objects=keep))
    records = gps_to_records(pings, PORTO_GRID)
    quads = build_quadruples(records, TimeSlotting(15, 0, 1440), max_gap_seconds=300)
    quads = filter_by_transition_frequency(quads, 30)
    reports = run_experiment(quads, ExperimentConfig(models=("mpe", "mm"), runs=1, ks=(1,)))
    mpe, mm = reports["mpe"].mean["acc@1"], reports["mm"].mean["acc@1"]
    elapsed = time.perf_counter() - start
    verdict(9, "Porto subsample ordering", mpe >= mm and elapsed < 1800,
            f"{len(keep)} taxis, {len(quads)} quadruples; mpe {mpe:.4f} >= mm {mm:.4f}; {elapsed:.0f}s")


def _pipeline(workdir: Path, monkeypatch):
    monkeypatch.chdir(workdir)
    steps = [
        ["synth", "--n-locations", "20", "--objects", "4", "--slots", "6", "--records-per-object", "150",
         "--out", "raw.csv"],
        ["ingest", "--input", "raw.csv", "--threshold", "2", "--out", "quads.csv"],
        ["train", "--input", "quads.csv", "--dim", "8", "--epochs", "3", "--lr", "0.01", "--out", "model.bin"],
        ["evaluate", "--input", "quads.csv", "--dim", "8", "--epochs", "2", "--lr", "0.01", "--runs", "2",
         "--models", "mpe,mpe-plain,mm,bayes", "--out", "eval"],
        ["predict", "--model", "model.bin", "--input", "raw.csv", "--k", "3", "--out", "pred.tsv"],
        ["export-embeddings", "--model", "model.bin", "--out", "emb.tsv"],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    artifacts = {}
    for p in sorted(workdir.rglob("*")):
        if p.is_file():
            blob = p.read_bytes()
            if p.name.endswith(".log.tsv"):
                # the wall-clock column is a measurement, not an artifact of the computation
                blob = b"\n".join(b"\t".join(line.split(b"\t")[:2]) for line in blob.splitlines())
            artifacts[str(p.relative_to(workdir))] = blob
    return artifacts


def test_c10_determinism(tmp_path, monkeypatch, capsys):
    runs = []
    for name in ("first", "second"):
        (tmp_path / name).mkdir()
        runs.append(_pipeline(tmp_path / name, monkeypatch))
    differing = sorted(k for k in runs[0] if runs[0][k] != runs[1].get(k))
    same_set = runs[0].keys() == runs[1].keys()
    with capsys.disabled():
        verdict(10, "byte-identical pipeline re-run", same_set and not differing,
                f"{len(runs[0])} artifacts compared; differing: {differing or 'none'}")
