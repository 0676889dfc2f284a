"""Command-line entry point for the full pipeline.

Subcommands: gen-corpus, pretrain-lm, train-stage1, train-stage2, eval,
analyze. Exit codes: 0 success, 1 runtime/I-O failure, 2 usage or config
error. Every command takes --config (flat JSON), flag overrides, and writes
all artifacts plus a resolved-config echo under its --out directory.
"""

import argparse
import hashlib
import json
import sys
from pathlib import Path

from twopass_slu import config as cfgmod
from twopass_slu import corpus as corpusmod
from twopass_slu import evaluation as evalmod
from twopass_slu import inference as infmod
from twopass_slu.config import UsageError
from twopass_slu.model import (CheckpointError, ModelConfig, TwoPassModel,
                               Vocabulary, load_checkpoint, save_checkpoint)
from twopass_slu.training import (TrainConfig, TrainingError,
                                  pretrain_semantic_encoder, train_stage1,
                                  train_stage2)
from twopass_slu.utils import stream_rng

SPLITS = ("train", "test_seen", "test_unseen_phrasing", "test_unseen_speaker")


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir, command, values, files):
    manifest = {
        "command": command,
        "config": dict(sorted(values.items())),
        "files": {name: _sha256(out_dir / name) for name in sorted(files)},
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_corpus_dir(path):
    directory = Path(path)
    grammar_path = directory / corpusmod.GRAMMAR_FILE
    if not grammar_path.exists():
        raise UsageError(f"corpus directory {directory} has no grammar.json; "
                         f"run gen-corpus first")
    with open(grammar_path, encoding="utf-8") as fh:
        grammar = corpusmod.grammar_from_json(json.load(fh))
    splits, utterances = corpusmod.read_corpus(directory)
    return grammar, splits, utterances


def _model_config(values, feat_dim):
    return ModelConfig(
        feat_dim=feat_dim, model_dim=values["model_dim"],
        n_heads=values["n_heads"], enc_layers=values["enc_layers"],
        dec_layers=values["dec_layers"], ff_dim=values["ff_dim"],
        subsample_factor=values["subsample_factor"], sem_dim=values["sem_dim"],
        sem_heads=values["sem_heads"], sem_layers=values["sem_layers"],
        sem_ff_dim=values["sem_ff_dim"], delib_layers=values["delib_layers"],
        dropout=values["dropout"])


def _corpus_feat_dim(utterances):
    return next(iter(utterances.values())).feat_dim


def _require_checkpoint(path, needed_stage, for_command):
    if path is None:
        raise UsageError(f"{for_command} requires --init with a checkpoint that "
                         f"completed {needed_stage}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{for_command}: checkpoint {p} not found; train "
                         f"{needed_stage} first")
    model, opt_state = load_checkpoint(p)
    if needed_stage not in model.trained_stages:
        raise UsageError(f"{for_command}: checkpoint {p} has not completed "
                         f"{needed_stage} (stages: {sorted(model.trained_stages) or 'none'})")
    return model, opt_state


def _write_trainlog(log, out_dir, name):
    with open(out_dir / name, "w", encoding="utf-8") as fh:
        json.dump(log.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- subcommands

def cmd_gen_corpus(args):
    values = cfgmod.resolve("gen-corpus", args.config, {
        "seed": args.seed, "intents": args.intents,
        "train_utterances": args.train, "test_utterances": args.test_each,
        "noise_level": args.noise,
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grammar = corpusmod.build_grammar(
        seed=values["seed"], n_intents=values["intents"],
        n_templates_per_intent=values["templates_per_intent"],
        n_heldout_templates=values["heldout_templates"],
        late_fraction=values["late_fraction"])
    splits, utterances, _ = corpusmod.make_splits(
        grammar, n_train=values["train_utterances"],
        n_test_each=values["test_utterances"], n_speakers=values["speakers"],
        n_heldout_speakers=values["heldout_speakers"], seed=values["seed"],
        noise_level=values["noise_level"], feat_dim=values["feat_dim"],
        frames_per_char=values["frames_per_char"],
        text_copies=values["text_copies"])
    corpusmod.write_corpus(splits, utterances, out)
    with open(out / corpusmod.GRAMMAR_FILE, "w", encoding="utf-8") as fh:
        json.dump(corpusmod.grammar_to_json(grammar), fh, indent=2, sort_keys=True)
        fh.write("\n")
    cfgmod.echo("gen-corpus", values, out)
    _write_manifest(out, "gen-corpus", values,
                    [corpusmod.CORPUS_FILE, corpusmod.TEXT_FILE,
                     corpusmod.GRAMMAR_FILE])
    print(f"corpus written to {out} ({len(utterances)} utterances, "
          f"{len(grammar.intents)} intents)")
    return 0


def cmd_pretrain_lm(args):
    values = cfgmod.resolve("pretrain-lm", args.config, {"seed": args.seed})
    grammar, splits, utterances = _load_corpus_dir(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = TwoPassModel(_model_config(values, _corpus_feat_dim(utterances)),
                         Vocabulary.from_grammar(grammar), seed=values["seed"])
    tc = TrainConfig(stage="pretrain_lm", epochs=values["pretrain_epochs"],
                     batch_size=values["pretrain_batch"],
                     peak_lr=values["pretrain_lr"],
                     warmup_steps=values["pretrain_warmup"],
                     label_smoothing=0.0,  # MLM loss runs on word-restricted support
                     dropout=values["dropout"], n_time_masks=0, n_feat_masks=0,
                     seed=values["seed"], grad_clip=values["grad_clip"],
                     dev_fraction=values["dev_fraction"])
    log = pretrain_semantic_encoder(model, splits.unlabeled_text, tc)
    save_checkpoint(model, None, out / "pretrain.ckpt")
    _write_trainlog(log, out, "trainlog_pretrain.json")
    cfgmod.echo("pretrain-lm", values, out)
    print(f"pretrained semantic encoder: final loss {log.final_loss:.4f} "
          f"-> {out / 'pretrain.ckpt'}")
    return 0


def cmd_train_stage1(args):
    values = cfgmod.resolve("train-stage1", args.config, {"seed": args.seed})
    grammar, splits, utterances = _load_corpus_dir(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.init is not None:
        model, _ = load_checkpoint(Path(args.init))
    else:
        model = TwoPassModel(_model_config(values, _corpus_feat_dim(utterances)),
                             Vocabulary.from_grammar(grammar), seed=values["seed"])
    tc = TrainConfig(stage="stage1", epochs=values["stage1_epochs"],
                     batch_size=values["stage1_batch"],
                     peak_lr=values["stage1_lr"],
                     warmup_steps=values["stage1_warmup"],
                     label_smoothing=values["label_smoothing"],
                     dropout=values["dropout"],
                     n_time_masks=values["time_masks"],
                     max_time_width=values["time_mask_width"],
                     n_feat_masks=values["feat_masks"],
                     max_feat_width=values["feat_mask_width"],
                     seed=values["seed"], grad_clip=values["grad_clip"],
                     dev_fraction=values["dev_fraction"])
    log = train_stage1(model, splits, utterances, tc)
    save_checkpoint(model, None, out / "stage1.ckpt")
    _write_trainlog(log, out, "trainlog_stage1.json")
    cfgmod.echo("train-stage1", values, out)
    print(f"stage 1 done: loss {log.first_loss:.4f} -> {log.final_loss:.4f}, "
          f"dev intent accuracy {log.epochs[-1].dev_intent_accuracy:.1f}%")
    return 0


def cmd_train_stage2(args):
    values = cfgmod.resolve("train-stage2", args.config, {"seed": args.seed})
    _, splits, utterances = _load_corpus_dir(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = _require_checkpoint(args.init, "stage1", "train-stage2")
    tc = TrainConfig(stage="stage2", epochs=values["stage2_epochs"],
                     batch_size=values["stage2_batch"],
                     peak_lr=values["stage2_lr"],
                     warmup_steps=values["stage2_warmup"],
                     label_smoothing=values["label_smoothing"],
                     dropout=values["dropout"],
                     n_time_masks=values["stage2_time_masks"],
                     max_time_width=values["time_mask_width"],
                     n_feat_masks=values["stage2_feat_masks"],
                     max_feat_width=values["feat_mask_width"],
                     seed=values["seed"], grad_clip=values["grad_clip"],
                     dev_fraction=values["dev_fraction"],
                     beam_width=values["beam_width"],
                     joint_update=values["stage2_joint_update"],
                     hyp_spec_augment=values["stage2_hyp_augment"])
    log = train_stage2(model, splits, utterances, tc)
    save_checkpoint(model, None, out / "stage2.ckpt")
    _write_trainlog(log, out, "trainlog_stage2.json")
    cfgmod.echo("train-stage2", values, out)
    print(f"stage 2 done: loss {log.first_loss:.4f} -> {log.final_loss:.4f}, "
          f"dev intent accuracy {log.epochs[-1].dev_intent_accuracy:.1f}%")
    return 0


def _parse_prefix(text):
    if text in (None, "full"):
        return None
    try:
        value = float(text)
    except ValueError as exc:
        raise UsageError(f"--prefix expects a number of seconds or 'full', "
                         f"got {text!r}") from exc
    if value <= 0:
        raise UsageError(f"--prefix must be positive, got {value}")
    return value


def cmd_eval(args):
    values = cfgmod.resolve("eval", args.config, {
        "seed": args.seed, "workers": args.workers, "beam_width": args.beam,
        "threshold": args.threshold})
    if args.split not in SPLITS:
        raise UsageError(f"unknown split {args.split!r}; expected one of {SPLITS}")
    _, splits, utterances = _load_corpus_dir(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = _require_checkpoint(args.ckpt, "stage2", "eval")
    ids = getattr(splits, args.split)
    if args.limit:
        ids = ids[:args.limit]
    prefix = _parse_prefix(args.prefix)
    summary = {"split": args.split, "n": len(ids), "prefix_seconds": prefix}
    files = []

    threshold = values["threshold"]
    if args.tune_threshold:
        rng = stream_rng(values["seed"], "dev")
        dev_ids = rng.sample(list(splits.train),
                             min(len(splits.train),
                                 max(20, int(values["dev_fraction"] * len(splits.train)))))
        dev_records = infmod.evaluate_both_passes(
            model, utterances, dev_ids, values["beam_width"],
            prefix_seconds=values["prefix_seconds"], workers=values["workers"],
            confidence_mode=values["confidence_mode"])
        threshold, dev_acc = evalmod.tune_threshold(dev_records)
        summary["tuned_threshold"] = threshold
        summary["dev_routed_accuracy"] = dev_acc

    if args.both_passes:
        records = infmod.evaluate_both_passes(
            model, utterances, ids, values["beam_width"], prefix_seconds=prefix,
            workers=values["workers"], confidence_mode=values["confidence_mode"])
        evalmod.write_predictions_jsonl(records, out / "predictions.jsonl")
        table = evalmod.bucket_by_confidence(records, threshold)
        evalmod.write_bucket_table(table, out / "confidence_buckets.csv",
                                   out / "confidence_buckets.json")
        summary["first_pass_accuracy"] = evalmod.intent_accuracy(
            [(r.first_intent, r.intent_true) for r in records])
        summary["second_pass_accuracy"] = evalmod.intent_accuracy(
            [(r.second_intent, r.intent_true) for r in records])
        summary["confidence_threshold"] = threshold
        summary["routed_accuracy_if_thresholded"] = evalmod.routed_accuracy(table)
        files += ["predictions.jsonl", "confidence_buckets.csv",
                  "confidence_buckets.json"]

    if args.route:
        routed = infmod.route_split(
            model, utterances, ids, threshold,
            prefix_seconds=values["prefix_seconds"],
            beam_width=values["beam_width"], workers=values["workers"],
            confidence_mode=values["confidence_mode"])
        baseline = infmod.always_second_pass(
            model, utterances, ids, values["beam_width"],
            prefix_seconds=values["prefix_seconds"], workers=values["workers"],
            confidence_mode=values["confidence_mode"])
        evalmod.write_predictions_jsonl(routed, out / "routed.jsonl")
        report = infmod.measure_latency(routed, baseline)
        evalmod.write_latency_report(report, out / "latency.json")
        summary["routing_threshold"] = threshold
        summary["routed_accuracy"] = evalmod.intent_accuracy(
            [(p.intent_pred, p.intent_true) for p in routed])
        summary["baseline_accuracy"] = evalmod.intent_accuracy(
            [(p.intent_pred, p.intent_true) for p in baseline])
        summary["first_pass_share"] = sum(
            1 for p in routed if p.source == "first_pass") / len(routed)
        summary["speedup_vs_always_second"] = report.speedup_vs_always_second
        files += ["routed.jsonl", "latency.json"]

    if args.sweep:
        prefixes = [_parse_prefix(tok) for tok in args.sweep.split(",")]
        curve = evalmod.prefix_sweep(model, utterances, ids, prefixes,
                                     values["beam_width"], values["workers"])
        evalmod.write_prefix_curve(curve, out / "prefix_curve.csv")
        summary["prefix_curve"] = [p.to_dict() for p in curve.points]
        files.append("prefix_curve.csv")

    with open(out / "eval_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    cfgmod.echo("eval", values, out, extra={"split": args.split})
    print(json.dumps({k: v for k, v in summary.items() if k != "prefix_curve"},
                     sort_keys=True))
    return 0


def cmd_analyze(args):
    values = cfgmod.resolve("analyze", args.config,
                            {"seed": args.seed, "threshold": args.threshold})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}

    if args.bucket_table:
        try:
            with open(args.bucket_table, encoding="utf-8") as fh:
                table = evalmod.BucketTable.from_dict(json.load(fh))
        except FileNotFoundError as exc:
            raise UsageError(f"bucket table {args.bucket_table} not found") from exc
        summary["routed_accuracy"] = round(evalmod.routed_accuracy(table), 2)
        summary["bucket_table"] = table.to_dict()

    if args.predictions:
        records = evalmod.read_predictions_jsonl(Path(args.predictions))
        edges = tuple(float(v) for v in args.wer_edges.split(","))
        wer_table = evalmod.bucket_by_wer(records, edges)
        evalmod.write_bucket_table(wer_table, out / "wer_buckets.csv",
                                   out / "wer_buckets.json")
        conf_table = evalmod.bucket_by_confidence(records, values["threshold"])
        evalmod.write_bucket_table(conf_table, out / "confidence_buckets.csv",
                                   out / "confidence_buckets.json")
        summary["routed_accuracy"] = round(evalmod.routed_accuracy(conf_table), 2)
        summary["frac_wer_below_5pct"] = wer_table.meta["frac_wer_below_5pct"]
        summary["wer_buckets"] = wer_table.to_dict()

    if args.heatmap_utt:
        if not (args.ckpt and args.corpus):
            raise UsageError("--heatmap-utt requires --ckpt and --corpus")
        model, _ = _require_checkpoint(args.ckpt, "stage2", "analyze")
        _, _, utterances = _load_corpus_dir(args.corpus)
        if args.heatmap_utt not in utterances:
            raise UsageError(f"utterance {args.heatmap_utt!r} not in corpus")
        utt = utterances[args.heatmap_utt]
        fp = infmod.infer_first_pass(model, utt, beam_width=values.get("beam_width", 4))
        mats = evalmod.export_heatmaps(model, utt, fp.transcript)
        for m in mats:
            stem = f"heatmap_{args.heatmap_utt}_h{m.head}"
            evalmod.write_heatmap(m, out / f"{stem}.csv", out / f"{stem}.json")
        summary["heatmaps"] = [f"heatmap_{args.heatmap_utt}_h{m.head}" for m in mats]
        summary["transcript_pred"] = fp.transcript

    if not summary:
        raise UsageError("analyze needs --predictions, --bucket-table or "
                         "--heatmap-utt")
    with open(out / "analysis_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    cfgmod.echo("analyze", values, out)
    print(json.dumps({k: v for k, v in summary.items()
                      if k in ("routed_accuracy", "frac_wer_below_5pct",
                               "heatmaps", "transcript_pred")}, sort_keys=True))
    return 0


# --------------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="twopass-slu",
        description="Two-pass spoken-language-understanding pipeline: corpus "
                    "synthesis, staged training, evaluation and analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None,
                       help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None, help="root seed")
        p.add_argument("--out", type=str, required=True, help="output directory")

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    common(p)
    p.add_argument("--intents", type=int, default=None)
    p.add_argument("--train", type=int, default=None, help="training utterances")
    p.add_argument("--test-each", type=int, default=None, dest="test_each",
                   help="utterances per test split")
    p.add_argument("--noise", type=float, default=None, help="feature noise level")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain-lm", help="pretrain the semantic encoder")
    common(p)
    p.add_argument("--corpus", type=str, required=True)
    p.set_defaults(func=cmd_pretrain_lm)

    p = sub.add_parser("train-stage1", help="train acoustic encoder + first pass")
    common(p)
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--init", type=str, default=None,
                   help="checkpoint to start from (pretrain.ckpt)")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train deliberation + second pass")
    common(p)
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--init", type=str, default=None,
                   help="stage-1 checkpoint (required)")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("eval", help="run evaluation protocols on a split")
    common(p)
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--ckpt", type=str, required=True, help="stage-2 checkpoint")
    p.add_argument("--split", type=str, default="test_seen")
    p.add_argument("--both-passes", action="store_true", dest="both_passes",
                   help="run both passes on every utterance, write predictions")
    p.add_argument("--route", action="store_true",
                   help="confidence-routed inference + latency benchmark")
    p.add_argument("--tune-threshold", action="store_true", dest="tune_threshold",
                   help="tune the routing threshold on a dev slice of train")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--prefix", type=str, default="full",
                   help="first-pass audio prefix seconds, or 'full'")
    p.add_argument("--sweep", type=str, default=None,
                   help="comma list of prefixes for an accuracy/latency curve")
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--limit", type=int, default=None,
                   help="evaluate only the first N utterances")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="offline analyses over prediction files")
    common(p)
    p.add_argument("--predictions", type=str, default=None,
                   help="predictions.jsonl from eval --both-passes")
    p.add_argument("--bucket-table", type=str, default=None, dest="bucket_table",
                   help="bucket-table JSON to compute routed accuracy for")
    p.add_argument("--wer-edges", type=str, default="0,5,15,30,100",
                   dest="wer_edges")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--heatmap-utt", type=str, default=None, dest="heatmap_utt",
                   help="utterance id to export deliberation heatmaps for")
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--corpus", type=str, default=None)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, corpusmod.CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
