"""Metrics and analysis: WER vs DP oracle, bucket arithmetic (including the
published-table fixtures), prefix curves, heatmaps and report determinism."""

import csv
import json
import random

import pytest

from twopass_slu.corpus import build_grammar, make_splits
from twopass_slu.evaluation import (BucketRow, BucketTable, EvaluationError,
                                    bucket_by_confidence, bucket_by_wer,
                                    export_heatmaps, intent_accuracy,
                                    prefix_sweep, read_prefix_curve,
                                    routed_accuracy, tune_threshold, wer,
                                    write_bucket_table, write_heatmap,
                                    write_predictions_jsonl, write_prefix_curve,
                                    PrefixCurve, PrefixPoint)
from twopass_slu.inference import EvalRecord
from twopass_slu.model import ModelConfig, TwoPassModel, Vocabulary


def record(uid="u0", true="a", first="a", second="a", conf=0.9,
           hyp=("x",), ref=("x",)):
    return EvalRecord(utt_id=uid, intent_true=true, first_intent=first,
                      second_intent=second, confidence=conf,
                      first_transcript=list(hyp), ref_transcript=list(ref),
                      duration_seconds=1.0, t_first=0.01, t_second=0.02)


# ------------------------------------------------------------------- accuracy

def test_intent_accuracy_trivial_cases():
    assert intent_accuracy([("a", "a"), ("b", "b")]) == 100.0
    assert intent_accuracy([("a", "a"), ("b", "c"), ("d", "c"), ("e", "c")]) == 25.0
    with pytest.raises(EvaluationError):
        intent_accuracy([])
    with pytest.raises(EvaluationError, match="gold"):
        intent_accuracy([("a", None)])


def test_intent_accuracy_matches_recount_oracle():
    rng = random.Random(0)
    pairs = [(rng.choice("abc"), rng.choice("abc")) for _ in range(1000)]
    got = intent_accuracy(pairs)
    want = 100.0 * sum(p == t for p, t in pairs) / 1000
    assert got == want


# ------------------------------------------------------------------------ wer

def test_wer_trivial_cases():
    assert wer(["a", "b", "c"], ["a", "b", "c"]) == 0.0
    assert wer(["a", "b", "c"], ["a", "x", "c"]) == pytest.approx(1 / 3)
    assert wer([], ["a", "b"]) == 1.0  # all deletions
    assert wer(["a", "b", "c", "d"], ["a", "b"]) == 1.0  # insertions can exceed ref
    with pytest.raises(EvaluationError, match="reference"):
        wer(["a"], [])


def _wer_oracle(hyp, ref):
    """Full-matrix DP recomputation, independent of the kernel path."""
    lh, lr = len(hyp), len(ref)
    d = [[0] * (lr + 1) for _ in range(lh + 1)]
    for i in range(lh + 1):
        d[i][0] = i
    for j in range(lr + 1):
        d[0][j] = j
    for i in range(1, lh + 1):
        for j in range(1, lr + 1):
            d[i][j] = min(d[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1]),
                          d[i][j - 1] + 1, d[i - 1][j] + 1)
    return d[lh][lr] / lr


def test_wer_matches_dp_oracle_on_random_pairs(any_backend):
    rng = random.Random(1)
    alphabet = ["red", "green", "blue"]
    for _ in range(300):
        hyp = [rng.choice(alphabet) for _ in range(rng.randrange(0, 7))]
        ref = [rng.choice(alphabet) for _ in range(rng.randrange(1, 7))]
        assert wer(hyp, ref) == pytest.approx(_wer_oracle(hyp, ref), abs=1e-12)


# -------------------------------------------------------------------- buckets

def test_bucket_by_confidence_partitions_and_scores():
    records = [
        record("u1", "a", "a", "a", 0.95),
        record("u2", "b", "b", "b", 0.9),
        record("u3", "c", "x", "c", 0.4),
        record("u4", "d", "x", "y", 0.2),
        record("u5", "e", "e", "e", 0.8),
    ]
    table = bucket_by_confidence(records, 0.8)
    assert [r.support for r in table.rows] == [3, 2]
    assert table.total_support == 5
    assert table.rows[0].first_accuracy == 100.0
    assert table.rows[1].first_accuracy == 0.0
    assert table.rows[1].second_accuracy == 50.0


def test_bucket_threshold_zero_single_populated():
    records = [record(conf=0.3), record(conf=0.9)]
    table = bucket_by_confidence(records, 0.0)
    assert table.rows[0].support == 2
    assert table.rows[1].support == 0
    assert routed_accuracy(table) == table.rows[0].first_accuracy


def test_routed_accuracy_published_utt_numbers():
    """Support-weighted routing arithmetic on the published bucket fixture."""
    table = BucketTable(rows=[
        BucketRow(">=80%", 1604, 84.9, 89.5),
        BucketRow("<80%", 2600, 61.8, 77.9),
    ])
    got = routed_accuracy(table)
    assert got == pytest.approx(80.6, abs=0.05)
    assert got == pytest.approx((1604 * 84.9 + 2600 * 77.9) / 4204, abs=1e-12)


def test_routed_accuracy_second_fixture_weighted_average():
    table = BucketTable(rows=[
        BucketRow(">=65%", 2556, 96.6, 97.4),
        BucketRow("<65%", 10522, 70.9, 84.0),
    ])
    want = (2556 * 96.6 + 10522 * 84.0) / (2556 + 10522)
    assert routed_accuracy(table) == pytest.approx(want, abs=1e-12)
    assert routed_accuracy(table) == pytest.approx(86.46, abs=0.005)


def test_routed_accuracy_degenerate_and_empty():
    single = BucketTable(rows=[BucketRow("all", 7, 88.0, 99.0)])
    assert routed_accuracy(single) == 88.0
    with pytest.raises(EvaluationError, match="zero total support"):
        routed_accuracy(BucketTable(rows=[BucketRow("x", 0, 0.0, 0.0)]))


def test_bucket_by_wer_membership_and_meta():
    records = [
        record("u1", hyp=("a", "b", "c"), ref=("a", "b", "c")),   # 0%
        record("u2", hyp=("a", "x", "c"), ref=("a", "b", "c")),   # 33.3%
        record("u3", hyp=("a", "b", "d"), ref=("a", "b", "c", "d")),  # 25%
        record("u4", hyp=("x", "y"), ref=("a", "b")),             # 100%
        record("u5", hyp=("a",), ref=("a", "b")) ,                # 50%
    ]
    table = bucket_by_wer(records, edges=(0.0, 5.0, 15.0, 30.0, 100.0))
    assert [r.support for r in table.rows] == [1, 0, 1, 3]
    # independent filter oracle
    wers = [100 * wer(r.first_transcript, r.ref_transcript) for r in records]
    assert sum(1 for w in wers if w < 5) == table.rows[0].support
    assert sum(1 for w in wers if 15 <= w < 30) == table.rows[2].support
    assert sum(1 for w in wers if w >= 30) == table.rows[3].support
    assert table.meta["frac_wer_below_5pct"] == pytest.approx(1 / 5)
    assert table.total_support == 5


def test_bucket_by_wer_all_zero_and_bad_edges():
    records = [record(hyp=("a",), ref=("a",)) for _ in range(4)]
    table = bucket_by_wer(records)
    assert table.rows[0].support == 4
    assert all(r.support == 0 for r in table.rows[1:])
    with pytest.raises(EvaluationError, match="increasing"):
        bucket_by_wer(records, edges=(0.0, 50.0, 20.0))


def test_tune_threshold_prefers_accuracy_then_speed():
    records = [
        record("u1", "a", "a", "a", 0.9),
        record("u2", "b", "x", "b", 0.6),
        record("u3", "c", "x", "c", 0.5),
    ]
    thr, acc = tune_threshold(records, thresholds=[0.4, 0.7, 0.95])
    assert thr == 0.7  # routes u2/u3 to the second pass; u1 stays first
    assert acc == 100.0
    # at 0.95 accuracy ties 100%; the lower threshold must win
    thr2, _ = tune_threshold(records, thresholds=[0.7, 0.95])
    assert thr2 == 0.7


# ------------------------------------------------------------- prefix & plots

def test_prefix_curve_fixture_round_trips_through_report_path(tmp_path):
    fixture = {1.0: 35.6, 2.0: 75.9, 3.0: 83.6, 4.0: 85.5, 5.0: 86.0}
    curve = PrefixCurve([PrefixPoint(p, acc, 0.1 * p, 1.0 / p)
                         for p, acc in sorted(fixture.items())])
    path = tmp_path / "curve.csv"
    write_prefix_curve(curve, path)
    back = read_prefix_curve(path)
    assert [p.prefix_seconds for p in back.points] == sorted(fixture)
    assert [p.accuracy for p in back.points] == [fixture[p] for p in sorted(fixture)]


@pytest.fixture(scope="module")
def tiny_setup():
    grammar = build_grammar(seed=41, n_intents=5)
    splits, utts, _ = make_splits(grammar, n_train=10, n_test_each=8,
                                  n_speakers=3, n_heldout_speakers=1, seed=5,
                                  noise_level=0.1, feat_dim=6,
                                  frames_per_char=2.0)
    cfg = ModelConfig(feat_dim=6, model_dim=8, n_heads=2, enc_layers=1,
                      dec_layers=1, ff_dim=16, subsample_factor=2, sem_dim=8,
                      sem_heads=2, sem_layers=1, sem_ff_dim=16, delib_layers=1,
                      dropout=0.0)
    model = TwoPassModel(cfg, Vocabulary.from_grammar(grammar), seed=7)
    return model, splits, utts


def test_prefix_sweep_cap_equals_full(tiny_setup):
    model, splits, utts = tiny_setup
    ids = splits.test_seen[:5]
    longest = max(utts[u].duration_seconds for u in ids)
    curve = prefix_sweep(model, utts, ids, [longest + 1.0, None], beam_width=2)
    assert curve.points[0].accuracy == curve.points[1].accuracy
    with pytest.raises(EvaluationError, match="increasing"):
        prefix_sweep(model, utts, ids, [2.0, 1.0], beam_width=2)


def test_heatmap_rows_normalized_and_mass_partition(tiny_setup):
    model, splits, utts = tiny_setup
    utt = utts[splits.test_seen[0]]
    words = list(utt.transcript[:3])
    maps = model.cfg.n_heads
    mats = export_heatmaps(model, utt, words)
    assert len(mats) == maps  # layer-1 heads only
    for m in mats:
        n = len(m.weights)
        assert n == m.boundary + len(words)
        assert m.query_labels[m.boundary] == words[0]
        for r in range(n):
            assert sum(m.weights[r]) == pytest.approx(1.0, abs=1e-9)
            assert m.acoustic_mass[r] + m.semantic_mass[r] == pytest.approx(1.0, abs=1e-9)


def test_heatmap_csv_and_sidecar(tiny_setup, tmp_path):
    model, splits, utts = tiny_setup
    utt = utts[splits.test_seen[1]]
    mat = export_heatmaps(model, utt, list(utt.transcript[:2]))[0]
    csv_path = tmp_path / "heat.csv"
    json_path = tmp_path / "heat.json"
    write_heatmap(mat, csv_path, json_path)
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "query"
    for row in rows[1:]:
        assert sum(float(v) for v in row[1:]) == pytest.approx(1.0, abs=1e-6)
    side = json.loads(json_path.read_text())
    assert side["boundary"] == mat.boundary


def test_reports_deterministic_and_sorted(tmp_path):
    records = [record(f"u{9 - i}", "a", "a", "a", 0.5) for i in range(6)]
    p1 = tmp_path / "a.jsonl"
    p2 = tmp_path / "b.jsonl"
    write_predictions_jsonl(records, p1)
    write_predictions_jsonl(list(reversed(records)), p2)
    assert p1.read_bytes() == p2.read_bytes()
    ids = [json.loads(line)["utt_id"] for line in p1.read_text().splitlines()]
    assert ids == sorted(ids)
    table = bucket_by_confidence(records, 0.4)
    write_bucket_table(table, tmp_path / "t.csv", tmp_path / "t.json")
    reread = BucketTable.from_dict(json.loads((tmp_path / "t.json").read_text()))
    assert [r.support for r in reread.rows] == [r.support for r in table.rows]
