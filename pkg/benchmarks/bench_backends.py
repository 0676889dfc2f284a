#!/usr/bin/env python3
"""Benchmark the compiled kernel extension against the pure-Python fallback.

Times the hot kernels at shapes representative of the default model
(subsampled acoustic sequences around 40-80 rows, model dim 32) plus a full
training step of the acoustic encoder + first-pass decoder, and reports the
per-kernel speedup. Run after `pip install -e .`:

    python benchmarks/bench_backends.py [--repeats 200] [--json out.json]
"""

import argparse
import json
import random
import time
from array import array

from twopass_slu import available_backends, backend, ops, use_backend
from twopass_slu.corpus import build_grammar, make_splits
from twopass_slu.model import ModelConfig, TwoPassModel, Vocabulary
from twopass_slu.optim import Adam
from twopass_slu.tensor import Tape, backward
from twopass_slu.utils import stream_rng


def _buf(rng, n):
    return array("d", [rng.uniform(-1, 1) for _ in range(n)])


def kernel_cases(rng):
    m, k, n = 60, 96, 32
    a = _buf(rng, m * k)
    b = _buf(rng, k * n)
    out = array("d", bytes(8 * m * n))
    rows, cols = 60, 60
    x = _buf(rng, rows * cols)
    soft = array("d", bytes(8 * rows * cols))
    gain = _buf(rng, cols)
    bias = _buf(rng, cols)
    ln = array("d", bytes(8 * rows * cols))
    mean = array("d", bytes(8 * rows))
    rstd = array("d", bytes(8 * rows))
    ge = array("d", bytes(8 * rows * cols))
    return {
        "matmul 60x96x32": lambda K: K.matmul_nn(a, b, out, m, n, k),
        "softmax 60x60": lambda K: K.softmax_rows(x, soft, rows, cols),
        "layer_norm 60x60": lambda K: K.layernorm_rows(x, gain, bias, 1e-5, ln,
                                                       mean, rstd, rows, cols),
        "gelu 3600": lambda K: K.gelu_fwd(x, ge, rows * cols),
    }


def time_call(fn, repeats):
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def training_step_case():
    grammar = build_grammar(seed=0, n_intents=6)
    splits, utts, _ = make_splits(grammar, n_train=8, n_test_each=2,
                                  n_speakers=3, n_heldout_speakers=1, seed=0,
                                  noise_level=0.2, feat_dim=16,
                                  frames_per_char=6.0)
    model = TwoPassModel(ModelConfig(subsample_factor=6),
                         Vocabulary.from_grammar(grammar), seed=0)
    model.set_trainable("stage1")
    opt = Adam(model.stage_params("stage1"), peak_lr=1e-3, warmup_steps=10)
    vocab = model.vocab
    rng = stream_rng(0, "bench")
    ids = splits.train

    def step():
        with Tape():
            losses = []
            for uid in ids:
                utt = utts[uid]
                c = model.encode_acoustic(utt, train=True, rng=rng)
                seq = vocab.target_sequence(utt.intent, utt.transcript)
                logits = model.first_pass_logits(c, seq[:-1], train=True, rng=rng)
                losses.append(ops.cross_entropy_label_smoothed(logits, seq[1:], 0.1))
            total = ops.scale(losses[0], 1.0 / len(losses))
            for l in losses[1:]:
                total = ops.add(total, ops.scale(l, 1.0 / len(losses)))
            backward(total)
        opt.step()
        opt.zero_grad()

    return step


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200,
                        help="repeats per kernel case")
    parser.add_argument("--step-repeats", type=int, default=3,
                        help="repeats of the full 8-utterance training step")
    parser.add_argument("--json", type=str, default=None)
    args = parser.parse_args()

    backends = available_backends()
    if backends == ["python"]:
        print("compiled kernels unavailable; benchmarking the fallback alone")
    rng = random.Random(0)
    results = {}
    for name in backends:
        use_backend(name)
        per = {}
        for case, fn in kernel_cases(rng).items():
            per[case] = time_call(lambda f=fn: f(backend.K), args.repeats)
        step = training_step_case()
        per["train step (8 utts)"] = time_call(step, args.step_repeats)
        results[name] = per

    cases = list(next(iter(results.values())))
    width = max(len(c) for c in cases)
    header = f"{'case'.ljust(width)}  " + "  ".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    for case in cases:
        row = f"{case.ljust(width)}  "
        row += "  ".join(f"{results[b][case] * 1e3:>10.3f}ms" for b in backends)
        if len(backends) == 2:
            ratio = results["python"][case] / results["compiled"][case]
            row += f"  {ratio:>7.1f}x"
        print(row)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
            fh.write("\n")


if __name__ == "__main__":
    main()
