"""Two-phase decoding: layout-constrained beam search, first-pass confidence,
prefix-truncated first-pass inference, deliberation second pass, confidence-
thresholded routing and wall-clock latency measurement.

Decoded sequences follow the joint layout [BOS, intent, words..., EOS]: the
first generated token must be an intent token, later tokens are words, and
EOS is only allowed once at least one word has been emitted. Per-step
log-probabilities are renormalized over the layout-allowed token set, so the
intent-token probability is a proper posterior over intents.
"""

import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

CONFIDENCE_MODES = ("intent_posterior", "sequence")


@dataclass(frozen=True)
class Hypothesis:
    """A decoded token sequence with per-token (renormalized) log-probs."""
    tokens: tuple
    logps: tuple          # one entry per generated token (BOS excluded)
    total: float
    finished: bool

    @property
    def intent_id(self):
        return self.tokens[1]

    @property
    def transcript_ids(self):
        end = len(self.tokens) - 1 if self.finished else len(self.tokens)
        return self.tokens[2:end]


@dataclass
class FirstPassResult:
    intent: str
    transcript: list
    confidence: float
    elapsed: float
    hypothesis: Hypothesis


@dataclass
class SecondPassResult:
    intent: str
    transcript: list
    elapsed: float
    hypothesis: Hypothesis


@dataclass
class RoutedPrediction:
    utt_id: str
    intent_true: str
    intent_pred: str
    source: str                  # "first_pass" | "second_pass"
    confidence: float
    transcript_pred: list        # first-pass transcript words
    t_pass1: float
    t_pass2: float               # 0.0 when the second pass was skipped
    t_total: float
    prefix_seconds: float | None
    audio_seconds: float

    def to_dict(self):
        return {"utt_id": self.utt_id, "intent_pred": self.intent_pred,
                "intent_true": self.intent_true, "source": self.source,
                "confidence": self.confidence,
                "transcript_pred": self.transcript_pred,
                "t_pass1": self.t_pass1, "t_pass2": self.t_pass2,
                "t_total": self.t_total, "prefix_seconds": self.prefix_seconds}


@dataclass
class EvalRecord:
    """Both passes run on one utterance (evaluation mode)."""
    utt_id: str
    intent_true: str
    first_intent: str
    second_intent: str
    confidence: float
    first_transcript: list
    ref_transcript: list
    duration_seconds: float
    t_first: float
    t_second: float


def _log_softmax_subset(row, allowed):
    mx = max(row[t] for t in allowed)
    z = 0.0
    for t in allowed:
        z += math.exp(row[t] - mx)
    logz = math.log(z)
    return {t: row[t] - mx - logz for t in allowed}


def beam_search(step_logits, vocab, beam_width, max_len):
    """N-best layout-constrained beam search.

    step_logits(prefix_tokens) must return the logits row for the next token.
    Hypotheses are sorted by total log-probability, ties broken by token ids;
    if nothing finishes within max_len the best unfinished hypotheses are
    returned flagged finished=False.
    """
    if beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    intent_ids = list(vocab.intent_id_range())
    word_ids = list(vocab.word_id_range())
    live = [Hypothesis((vocab.BOS,), (), 0.0, False)]
    finished = []
    while live and len(live[0].tokens) < max_len:
        candidates = []
        for hyp in live:
            pos = len(hyp.tokens)
            if pos == 1:
                allowed = intent_ids
            elif pos == 2:
                allowed = word_ids
            else:
                allowed = word_ids + [vocab.EOS]
            logps = _log_softmax_subset(step_logits(hyp.tokens), allowed)
            for tid in allowed:
                lp = logps[tid]
                candidates.append(Hypothesis(hyp.tokens + (tid,),
                                             hyp.logps + (lp,),
                                             hyp.total + lp,
                                             tid == vocab.EOS))
        candidates.sort(key=lambda h: (-h.total, h.tokens))
        kept = candidates[:beam_width]
        live = [h for h in kept if not h.finished]
        finished.extend(h for h in kept if h.finished)
    if finished:
        finished.sort(key=lambda h: (-h.total, h.tokens))
        return finished[:beam_width]
    live.sort(key=lambda h: (-h.total, h.tokens))
    return live[:beam_width]


def first_pass_confidence(hyp, mode="intent_posterior"):
    """Confidence of a first-pass hypothesis, in [0, 1].

    intent_posterior: posterior probability of the chosen intent token under
    the layout-masked first step. sequence: probability of the entire decoded
    sequence (the product of all step posteriors).
    """
    if mode not in CONFIDENCE_MODES:
        raise ValueError(f"unknown confidence mode {mode!r}; expected one of "
                         f"{CONFIDENCE_MODES}")
    if not hyp.logps:
        raise ValueError("empty hypothesis has no confidence")
    if mode == "intent_posterior":
        return math.exp(hyp.logps[0])
    return math.exp(hyp.total)


def _decode_max_len(vocab, utt):
    return max(12, 4 + len(utt.transcript) + 6)


def infer_first_pass(model, utt, prefix_seconds=None, beam_width=4,
                     confidence_mode="intent_posterior"):
    """Encode (a prefix of) the audio and beam-decode intent + transcript."""
    vocab = model.vocab
    t0 = time.perf_counter()
    c_aco = model.encode_acoustic(utt, prefix_seconds=prefix_seconds)
    hyps = beam_search(lambda prefix: model.first_pass_logits(
        c_aco, list(prefix)).row(len(prefix) - 1), vocab, beam_width,
        _decode_max_len(vocab, utt))
    elapsed = time.perf_counter() - t0
    best = hyps[0]
    return FirstPassResult(
        intent=vocab.token(best.intent_id),
        transcript=[vocab.token(t) for t in best.transcript_ids],
        confidence=first_pass_confidence(best, confidence_mode),
        elapsed=elapsed,
        hypothesis=best)


def infer_second_pass(model, utt, pass1_transcript, beam_width=4, c_aco=None):
    """Deliberation decode over full audio plus the first-pass transcript.

    pass1_transcript is a list of words (or word ids); an empty transcript
    falls back to a single PAD token. A cached full-audio acoustic embedding
    can be supplied; encoding is pure, so reuse is bit-identical.
    """
    vocab = model.vocab
    ids = [vocab.word_id(w) if isinstance(w, str) else w for w in pass1_transcript]
    if not ids:
        ids = [vocab.PAD]
    t0 = time.perf_counter()
    if c_aco is None:
        c_aco = model.encode_acoustic(utt)
    c_sem = model.encode_semantic(ids)
    c_del, _ = model.deliberate(c_aco, c_sem)
    hyps = beam_search(lambda prefix: model.second_pass_logits(
        c_del, list(prefix)).row(len(prefix) - 1), vocab, beam_width,
        _decode_max_len(vocab, utt))
    elapsed = time.perf_counter() - t0
    best = hyps[0]
    return SecondPassResult(
        intent=vocab.token(best.intent_id),
        transcript=[vocab.token(t) for t in best.transcript_ids],
        elapsed=elapsed,
        hypothesis=best)


def route(model, utt, threshold, prefix_seconds=2.0, beam_width=4,
          confidence_mode="intent_posterior"):
    """First pass on the audio prefix; second pass only when unconfident."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    fp = infer_first_pass(model, utt, prefix_seconds, beam_width, confidence_mode)
    if fp.confidence >= threshold:
        return RoutedPrediction(
            utt_id=utt.id, intent_true=utt.intent, intent_pred=fp.intent,
            source="first_pass", confidence=fp.confidence,
            transcript_pred=fp.transcript, t_pass1=fp.elapsed, t_pass2=0.0,
            t_total=fp.elapsed, prefix_seconds=prefix_seconds,
            audio_seconds=_audio_seconds(utt, prefix_seconds, False))
    sp = infer_second_pass(model, utt, fp.transcript, beam_width)
    return RoutedPrediction(
        utt_id=utt.id, intent_true=utt.intent, intent_pred=sp.intent,
        source="second_pass", confidence=fp.confidence,
        transcript_pred=fp.transcript, t_pass1=fp.elapsed, t_pass2=sp.elapsed,
        t_total=fp.elapsed + sp.elapsed, prefix_seconds=prefix_seconds,
        audio_seconds=_audio_seconds(utt, prefix_seconds, True))


def _audio_seconds(utt, prefix_seconds, second_pass_ran):
    dur = utt.duration_seconds
    first = dur if prefix_seconds is None else min(prefix_seconds, dur)
    return first + (dur if second_pass_ran else 0.0)


def evaluate_both_passes(model, utterances, ids, beam_width=4,
                         prefix_seconds=None, workers=1,
                         confidence_mode="intent_posterior"):
    """Run both passes on every utterance (the evaluation-mode protocol)."""

    def one(uid):
        utt = utterances[uid]
        fp = infer_first_pass(model, utt, prefix_seconds, beam_width,
                              confidence_mode)
        c_aco = None
        if prefix_seconds is None or prefix_seconds >= utt.duration_seconds:
            # the first pass already consumed the full audio; reuse is exact
            c_aco = model.encode_acoustic(utt)
        sp = infer_second_pass(model, utt, fp.transcript, beam_width, c_aco)
        return EvalRecord(
            utt_id=uid, intent_true=utt.intent, first_intent=fp.intent,
            second_intent=sp.intent, confidence=fp.confidence,
            first_transcript=fp.transcript, ref_transcript=list(utt.transcript),
            duration_seconds=utt.duration_seconds,
            t_first=fp.elapsed, t_second=sp.elapsed)

    return run_in_order(one, list(ids), workers)


def run_in_order(fn, items, workers=1):
    """Worker-pool contract: results in input order, regardless of workers."""
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class LatencyReport:
    rows: list                  # per-utterance dicts
    mean: float
    median: float
    p95: float
    mean_rtf: float
    speedup_vs_always_second: float | None = None
    baseline_mean: float | None = None

    def to_dict(self):
        return {"rows": self.rows, "mean": self.mean, "median": self.median,
                "p95": self.p95, "mean_rtf": self.mean_rtf,
                "speedup_vs_always_second": self.speedup_vs_always_second,
                "baseline_mean": self.baseline_mean}


def _p95(values):
    ordered = sorted(values)
    rank = max(0, math.ceil(0.95 * len(ordered)) - 1)
    return ordered[rank]


def measure_latency(predictions, baseline_predictions=None):
    """Aggregate wall-clock timings of routed predictions.

    The real-time factor of a prediction is audio seconds processed per wall
    second (prefix audio plus, when the second pass ran, the full audio again).
    The speedup ratio compares against an always-second-pass baseline run.
    """
    if not predictions:
        raise ValueError("measure_latency needs at least one prediction")
    rows = []
    for p in predictions:
        rows.append({"utt_id": p.utt_id, "source": p.source,
                     "t_pass1": p.t_pass1, "t_pass2": p.t_pass2,
                     "t_total": p.t_total,
                     "rtf": p.audio_seconds / p.t_total if p.t_total > 0 else 0.0})
    rows.sort(key=lambda r: r["utt_id"])
    totals = [r["t_total"] for r in rows]
    speedup = None
    baseline_mean = None
    if baseline_predictions:
        baseline_mean = statistics.fmean(p.t_total for p in baseline_predictions)
        speedup = baseline_mean / statistics.fmean(totals)
    return LatencyReport(rows=rows, mean=statistics.fmean(totals),
                         median=statistics.median(totals), p95=_p95(totals),
                         mean_rtf=statistics.fmean(r["rtf"] for r in rows),
                         speedup_vs_always_second=speedup,
                         baseline_mean=baseline_mean)


def always_second_pass(model, utterances, ids, beam_width=4, prefix_seconds=2.0,
                       workers=1, confidence_mode="intent_posterior"):
    """Baseline: run the full pipeline (first pass then second pass) everywhere."""

    def one(uid):
        utt = utterances[uid]
        fp = infer_first_pass(model, utt, prefix_seconds, beam_width,
                              confidence_mode)
        sp = infer_second_pass(model, utt, fp.transcript, beam_width)
        return RoutedPrediction(
            utt_id=uid, intent_true=utt.intent, intent_pred=sp.intent,
            source="second_pass", confidence=fp.confidence,
            transcript_pred=fp.transcript, t_pass1=fp.elapsed,
            t_pass2=sp.elapsed, t_total=fp.elapsed + sp.elapsed,
            prefix_seconds=prefix_seconds,
            audio_seconds=_audio_seconds(utt, prefix_seconds, True))

    return run_in_order(one, list(ids), workers)


def route_split(model, utterances, ids, threshold, prefix_seconds=2.0,
                beam_width=4, workers=1, confidence_mode="intent_posterior"):
    """Route every utterance of a split; results in input order."""
    return run_in_order(
        lambda uid: route(model, utterances[uid], threshold, prefix_seconds,
                          beam_width, confidence_mode),
        list(ids), workers)
