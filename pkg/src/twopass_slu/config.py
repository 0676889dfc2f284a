"""Flat typed run configuration.

Precedence: built-in defaults < config file (flat JSON object) < CLI flags.
Every key lives in one global registry; a file may carry keys for any
subcommand, but a key outside the registry is a usage error. The resolved
per-command view is echoed into the output directory so any run can be
reproduced from its artifacts alone.
"""

import json


class UsageError(ValueError):
    """Bad flags or config; the CLI maps this to exit code 2."""


# key -> (type, default)
REGISTRY = {
    "seed": (int, 0),
    "workers": (int, 1),
    # corpus generation
    "intents": (int, 31),
    "templates_per_intent": (int, 8),
    "heldout_templates": (int, 2),
    "late_fraction": (float, 0.5),
    "train_utterances": (int, 2000),
    "test_utterances": (int, 300),
    "speakers": (int, 20),
    "heldout_speakers": (int, 4),
    "noise_level": (float, 0.42),
    "feat_dim": (int, 16),
    "frames_per_char": (float, 5.0),
    "text_copies": (int, 6),
    # model
    "model_dim": (int, 32),
    "n_heads": (int, 4),
    "enc_layers": (int, 2),
    "dec_layers": (int, 2),
    "ff_dim": (int, 64),
    "subsample_factor": (int, 6),
    "sem_dim": (int, 32),
    "sem_heads": (int, 4),
    "sem_layers": (int, 2),
    "sem_ff_dim": (int, 64),
    "delib_layers": (int, 2),
    "dropout": (float, 0.1),
    # training
    "pretrain_epochs": (int, 8),
    "pretrain_lr": (float, 3e-3),
    "pretrain_warmup": (int, 100),
    "pretrain_batch": (int, 8),
    "stage1_epochs": (int, 20),
    "stage1_lr": (float, 3e-3),
    "stage1_warmup": (int, 300),
    "stage1_batch": (int, 4),
    "stage2_epochs": (int, 12),
    "stage2_lr": (float, 2e-3),
    "stage2_warmup": (int, 150),
    "stage2_batch": (int, 4),
    "stage2_joint_update": (bool, False),
    "stage2_time_masks": (int, 2),
    "stage2_feat_masks": (int, 1),
    "stage2_hyp_augment": (bool, True),
    "label_smoothing": (float, 0.1),
    "grad_clip": (float, 5.0),
    "time_masks": (int, 2),
    "time_mask_width": (int, 20),
    "feat_masks": (int, 1),
    "feat_mask_width": (int, 4),
    "dev_fraction": (float, 0.08),
    # inference / evaluation
    "beam_width": (int, 4),
    "prefix_seconds": (float, 2.0),
    "threshold": (float, 0.8),
    "confidence_mode": (str, "intent_posterior"),
}

COMMAND_KEYS = {
    "gen-corpus": ["seed", "intents", "templates_per_intent", "heldout_templates",
                   "late_fraction", "train_utterances", "test_utterances",
                   "speakers", "heldout_speakers", "noise_level", "feat_dim",
                   "frames_per_char", "text_copies"],
    "pretrain-lm": ["seed", "model_dim", "n_heads", "enc_layers", "dec_layers",
                    "ff_dim", "subsample_factor", "sem_dim", "sem_heads",
                    "sem_layers", "sem_ff_dim", "delib_layers", "dropout",
                    "pretrain_epochs", "pretrain_lr", "pretrain_warmup",
                    "pretrain_batch", "grad_clip", "dev_fraction"],
    "train-stage1": ["seed", "model_dim", "n_heads", "enc_layers", "dec_layers",
                     "ff_dim", "subsample_factor", "sem_dim", "sem_heads",
                     "sem_layers", "sem_ff_dim", "delib_layers", "dropout",
                     "stage1_epochs", "stage1_lr", "stage1_warmup", "stage1_batch",
                     "label_smoothing", "grad_clip", "time_masks",
                     "time_mask_width", "feat_masks", "feat_mask_width",
                     "dev_fraction"],
    "train-stage2": ["seed", "dropout", "stage2_epochs", "stage2_lr",
                     "stage2_warmup", "stage2_batch", "stage2_joint_update",
                     "stage2_time_masks", "stage2_feat_masks",
                     "stage2_hyp_augment", "time_mask_width", "feat_mask_width",
                     "label_smoothing", "grad_clip", "dev_fraction",
                     "beam_width"],
    "eval": ["seed", "workers", "beam_width", "prefix_seconds", "threshold",
             "confidence_mode", "dev_fraction"],
    "analyze": ["seed", "threshold"],
}


def _coerce(key, value, source):
    want, _ = REGISTRY[key]
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is bool:
        if isinstance(value, bool):
            return value
        raise UsageError(f"{source}: key {key!r} expects a boolean, got {value!r}")
    if not isinstance(value, want) or isinstance(value, bool) and want is not bool:
        raise UsageError(f"{source}: key {key!r} expects {want.__name__}, got {value!r}")
    return value


def load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a flat JSON object")
    for key in doc:
        if key not in REGISTRY:
            raise UsageError(f"config file {path}: unknown key {key!r}")
    return doc


def resolve(command, file_path=None, overrides=None):
    """Merged config view for one subcommand (defaults < file < overrides)."""
    keys = COMMAND_KEYS[command]
    values = {k: REGISTRY[k][1] for k in keys}
    if file_path is not None:
        doc = load_config_file(file_path)
        for k, v in doc.items():
            if k in values:
                values[k] = _coerce(k, v, str(file_path))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in REGISTRY:
            raise UsageError(f"unknown config key {k!r}")
        if k in values:
            values[k] = _coerce(k, v, "flag")
    return values


def echo(command, values, out_dir, extra=None):
    """Persist the resolved config next to the artifacts it produced."""
    doc = {"command": command, "config": dict(sorted(values.items()))}
    if extra:
        doc.update(extra)
    path = out_dir / "resolved_config.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
