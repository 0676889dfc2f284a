"""Metrics and analysis: intent accuracy, word error rate, confidence and WER
bucket tables, routed-accuracy arithmetic, accuracy-vs-prefix curves and
attention-heatmap export. Report files are deterministically ordered (sorted
by utterance id) so reruns diff byte-stable; columns are documented in
docs/report_schema.md."""

import csv
import json
from array import array
from dataclasses import dataclass, field

from twopass_slu import backend
from twopass_slu.inference import infer_first_pass, run_in_order


class EvaluationError(ValueError):
    pass


def intent_accuracy(pred_true_pairs):
    """100 * correct / total over (predicted, gold) intent pairs."""
    pairs = list(pred_true_pairs)
    if not pairs:
        raise EvaluationError("cannot score an empty prediction list")
    for pred, true in pairs:
        if true is None:
            raise EvaluationError("missing gold intent label")
    correct = sum(1 for pred, true in pairs if pred == true)
    return 100.0 * correct / len(pairs)


def wer(hyp_words, ref_words):
    """(substitutions + insertions + deletions) / |ref| via edit distance."""
    if not ref_words:
        raise EvaluationError("WER needs a nonempty reference")
    inventory = {}
    def ids(words):
        return array("q", [inventory.setdefault(w, len(inventory)) for w in words])
    hyp = ids(hyp_words)
    ref = ids(ref_words)
    return backend.K.edit_distance(hyp, ref) / len(ref_words)


@dataclass
class BucketRow:
    label: str
    support: int
    first_accuracy: float      # percent; 0.0 for an empty bucket
    second_accuracy: float

    def to_dict(self):
        return {"label": self.label, "support": self.support,
                "first_accuracy": self.first_accuracy,
                "second_accuracy": self.second_accuracy}


@dataclass
class BucketTable:
    rows: list
    meta: dict = field(default_factory=dict)

    @property
    def total_support(self):
        return sum(r.support for r in self.rows)

    def to_dict(self):
        return {"rows": [r.to_dict() for r in self.rows], "meta": self.meta}

    @classmethod
    def from_dict(cls, doc):
        rows = [BucketRow(r["label"], r["support"], r["first_accuracy"],
                          r["second_accuracy"]) for r in doc["rows"]]
        return cls(rows=rows, meta=doc.get("meta", {}))


def _bucket_accuracy(records, attr):
    if not records:
        return 0.0
    return intent_accuracy([(getattr(r, attr), r.intent_true) for r in records])


def bucket_by_confidence(records, threshold):
    """Two-row table: first/second-pass accuracy above and below the threshold."""
    hi = [r for r in records if r.confidence >= threshold]
    lo = [r for r in records if r.confidence < threshold]
    rows = [
        BucketRow(f">={threshold:g}", len(hi), _bucket_accuracy(hi, "first_intent"),
                  _bucket_accuracy(hi, "second_intent")),
        BucketRow(f"<{threshold:g}", len(lo), _bucket_accuracy(lo, "first_intent"),
                  _bucket_accuracy(lo, "second_intent")),
    ]
    return BucketTable(rows=rows, meta={"kind": "confidence", "threshold": threshold})


def routed_accuracy(table):
    """Support-weighted accuracy of the routing policy.

    The first row is the accepted (high-confidence) bucket scored with the
    first pass; every other row is scored with the second pass.
    """
    if table.total_support == 0:
        raise EvaluationError("bucket table has zero total support")
    total = 0.0
    for i, row in enumerate(table.rows):
        acc = row.first_accuracy if i == 0 else row.second_accuracy
        total += row.support * acc
    return total / table.total_support


def bucket_by_wer(records, edges=(0.0, 5.0, 15.0, 30.0, 100.0)):
    """Bucket both-pass records by first-pass transcript WER (edges in percent).

    Values beyond the last edge fall into the last bucket. The table's meta
    reports the fraction of utterances below 5% WER (reported, not asserted).
    """
    edges = list(edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise EvaluationError(f"bucket edges must be strictly increasing, got {edges}")
    recs = list(records)
    wers = [100.0 * wer(r.first_transcript, r.ref_transcript) for r in recs]
    buckets = [[] for _ in range(len(edges) - 1)]
    for r, w in zip(recs, wers):
        idx = 0
        for i in range(len(edges) - 1):
            if w >= edges[i]:
                idx = i
        buckets[idx].append(r)
    rows = []
    for i, bucket in enumerate(buckets):
        last = i == len(buckets) - 1
        label = f"[{edges[i]:g}%,{edges[i + 1]:g}%{']' if last else ')'}"
        rows.append(BucketRow(label, len(bucket),
                              _bucket_accuracy(bucket, "first_intent"),
                              _bucket_accuracy(bucket, "second_intent")))
    frac_low = sum(1 for w in wers if w < 5.0) / len(recs) if recs else 0.0
    return BucketTable(rows=rows, meta={"kind": "wer", "edges": edges,
                                        "frac_wer_below_5pct": frac_low})


def tune_threshold(records, thresholds=None, tolerance=0.5):
    """Pick the routing threshold on dev records: accuracy first, speed second.

    Among thresholds whose routed accuracy is within `tolerance` points of the
    best, the lowest wins (more first-pass routing, lower latency).
    """
    if thresholds is None:
        thresholds = [t / 100 for t in range(50, 96, 5)]
    scored = []
    for thr in thresholds:
        correct = sum(
            1 for r in records
            if (r.first_intent if r.confidence >= thr else r.second_intent) == r.intent_true)
        scored.append((thr, 100.0 * correct / len(records)))
    best_acc = max(acc for _, acc in scored)
    for thr, acc in scored:  # thresholds ascend; first within tolerance wins
        if acc >= best_acc - tolerance:
            return thr, acc
    return scored[-1]


@dataclass
class PrefixPoint:
    prefix_seconds: float | None      # None = full audio
    accuracy: float
    mean_wall_seconds: float
    real_time_factor: float           # audio seconds consumed per wall second

    def to_dict(self):
        return {"prefix_seconds": self.prefix_seconds, "accuracy": self.accuracy,
                "mean_wall_seconds": self.mean_wall_seconds,
                "real_time_factor": self.real_time_factor}


@dataclass
class PrefixCurve:
    points: list

    def to_dict(self):
        return {"points": [p.to_dict() for p in self.points]}

    @classmethod
    def from_dict(cls, doc):
        return cls([PrefixPoint(p["prefix_seconds"], p["accuracy"],
                                p["mean_wall_seconds"], p["real_time_factor"])
                    for p in doc["points"]])


def prefix_sweep(model, utterances, ids, prefixes, beam_width=4, workers=1):
    """First-pass accuracy and wall time for each audio prefix length.

    prefixes must be increasing; None (full audio) is allowed as the last
    entry only.
    """
    vals = [p for p in prefixes if p is not None]
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise EvaluationError(f"prefixes must be increasing, got {prefixes}")
    if None in prefixes and prefixes.index(None) != len(prefixes) - 1:
        raise EvaluationError("full-audio point (None) must come last")
    points = []
    for prefix in prefixes:
        results = run_in_order(
            lambda uid, p=prefix: infer_first_pass(model, utterances[uid], p,
                                                   beam_width),
            list(ids), workers)
        acc = intent_accuracy([(r.intent, utterances[uid].intent)
                               for r, uid in zip(results, ids)])
        walls = [r.elapsed for r in results]
        audio = [utterances[uid].duration_seconds if prefix is None
                 else min(prefix, utterances[uid].duration_seconds) for uid in ids]
        mean_wall = sum(walls) / len(walls)
        rtf = sum(audio) / sum(walls)
        points.append(PrefixPoint(prefix, acc, mean_wall, rtf))
    return PrefixCurve(points)


@dataclass
class HeatmapMatrix:
    layer: int
    head: int
    query_labels: list
    key_labels: list
    boundary: int                 # first semantic column index (= acoustic len)
    weights: list                 # nested rows
    acoustic_mass: list           # per-row mass over acoustic columns
    semantic_mass: list

    def to_dict(self):
        return {"layer": self.layer, "head": self.head,
                "query_labels": self.query_labels, "key_labels": self.key_labels,
                "boundary": self.boundary, "acoustic_mass": self.acoustic_mass,
                "semantic_mass": self.semantic_mass}


def export_heatmaps(model, utt, transcript_words):
    """First deliberation-encoder layer attention over [acoustic || semantic].

    Returns one matrix per head, with an acoustic/semantic boundary marker and
    the per-row attention-mass split between the two blocks.
    """
    vocab = model.vocab
    ids = [vocab.word_id(w) if isinstance(w, str) else w for w in transcript_words]
    if not ids:
        ids = [vocab.PAD]
    c_aco = model.encode_acoustic(utt)
    c_sem = model.encode_semantic(ids)
    _, maps = model.deliberate(c_aco, c_sem)
    t_aco = c_aco.matrix.shape[0]
    labels = [f"aco{i}" for i in range(t_aco)] + \
        [vocab.token(t) for t in ids]
    out = []
    for m in maps:
        if m.layer != 0:
            continue
        rows = m.weights.tolist()
        aco_mass = [sum(row[:t_aco]) for row in rows]
        sem_mass = [sum(row[t_aco:]) for row in rows]
        out.append(HeatmapMatrix(m.layer, m.head, list(labels), list(labels),
                                 t_aco, rows, aco_mass, sem_mass))
    return out


# ------------------------------------------------------------------ report io

def write_predictions_jsonl(records, path):
    """EvalRecord or RoutedPrediction rows as JSONL, sorted by utterance id."""
    rows = []
    for r in records:
        if hasattr(r, "to_dict"):
            rows.append(r.to_dict())
        else:  # EvalRecord
            rows.append({
                "utt_id": r.utt_id, "intent_true": r.intent_true,
                "intent_first": r.first_intent, "intent_second": r.second_intent,
                "confidence": r.confidence,
                "transcript_pred": r.first_transcript,
                "transcript_ref": r.ref_transcript,
                "duration_seconds": r.duration_seconds,
                "t_first": r.t_first, "t_second": r.t_second,
            })
    rows.sort(key=lambda d: d["utt_id"])
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_predictions_jsonl(path):
    """Load eval-mode predictions back into EvalRecord rows."""
    from twopass_slu.inference import EvalRecord

    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                records.append(EvalRecord(
                    utt_id=d["utt_id"], intent_true=d["intent_true"],
                    first_intent=d["intent_first"],
                    second_intent=d["intent_second"],
                    confidence=d["confidence"],
                    first_transcript=list(d["transcript_pred"]),
                    ref_transcript=list(d["transcript_ref"]),
                    duration_seconds=d["duration_seconds"],
                    t_first=d["t_first"], t_second=d["t_second"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise EvaluationError(f"{path}:{lineno}: bad prediction row: "
                                      f"{exc}") from exc
    return records


def write_bucket_table(table, csv_path, json_path=None):
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "support", "first_accuracy", "second_accuracy"])
        for r in table.rows:
            writer.writerow([r.label, r.support,
                             f"{r.first_accuracy:.6f}", f"{r.second_accuracy:.6f}"])
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(table.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")


def write_prefix_curve(curve, csv_path):
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prefix_seconds", "accuracy", "mean_wall_seconds",
                         "real_time_factor"])
        for p in curve.points:
            writer.writerow(["full" if p.prefix_seconds is None else f"{p.prefix_seconds:g}",
                             f"{p.accuracy:.6f}", f"{p.mean_wall_seconds:.9f}",
                             f"{p.real_time_factor:.6f}"])


def read_prefix_curve(csv_path):
    points = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            prefix = None if row["prefix_seconds"] == "full" else float(row["prefix_seconds"])
            points.append(PrefixPoint(prefix, float(row["accuracy"]),
                                      float(row["mean_wall_seconds"]),
                                      float(row["real_time_factor"])))
    return PrefixCurve(points)


def write_heatmap(matrix, csv_path, json_path):
    """CSV of weights plus a JSON sidecar with labels and mass splits."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query"] + matrix.key_labels)
        for label, row in zip(matrix.query_labels, matrix.weights):
            writer.writerow([label] + [f"{w:.9f}" for w in row])
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(matrix.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_latency_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
