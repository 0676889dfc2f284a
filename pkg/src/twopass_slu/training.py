"""Staged training: semantic-encoder pretraining on unlabeled text, acoustic
first-pass training, then deliberation second-pass training on the model's own
first-pass transcripts.

Stage 2 keeps the acoustic encoder, first-pass decoder and semantic encoder
frozen (a config flag re-enables joint updates) and feeds the deliberation
encoder the semantic embedding of the first-pass hypothesis, not the ground
truth transcript; the token-level loss stays teacher-forced on the ground
truth target sequence. Because the first pass is frozen its hypotheses are
constant across epochs, so they are generated once and cached; a test asserts
cache == regeneration.
"""

import hashlib
import time
import warnings
from array import array
from dataclasses import asdict, dataclass, field

from twopass_slu import ops
from twopass_slu.corpus import CorpusError
from twopass_slu.optim import Adam
from twopass_slu.tensor import Tape, Tensor, backward
from twopass_slu.utils import stream_rng

STAGES = ("pretrain_lm", "stage1", "stage2")
MASK_RATE = 0.15


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: str
    epochs: int = 10
    batch_size: int = 16
    peak_lr: float = 2e-3
    warmup_steps: int = 200
    label_smoothing: float = 0.1
    dropout: float = 0.1
    n_time_masks: int = 2
    max_time_width: int = 20
    n_feat_masks: int = 1
    max_feat_width: int = 4
    seed: int = 0
    dev_fraction: float = 0.08
    beam_width: int = 4
    grad_clip: float = 5.0
    joint_update: bool = False
    # stage 2: decode the training transcripts from spec-masked audio so the
    # deliberation pass sees realistic first-pass errors
    hyp_spec_augment: bool = True
    hyp_time_masks: int = 2
    hyp_max_time_width: int = 20
    hyp_feat_masks: int = 1
    hyp_max_feat_width: int = 4

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainingError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise TrainingError(f"label_smoothing must be in [0, 1), got "
                                f"{self.label_smoothing}")
        if not 0.0 <= self.dropout < 1.0:
            raise TrainingError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    dev_intent_accuracy: float | None
    wall_seconds: float


@dataclass
class TrainLog:
    stage: str
    epochs: list = field(default_factory=list)
    final_param_checksum: str = ""

    @property
    def first_loss(self):
        return self.epochs[0].mean_loss

    @property
    def final_loss(self):
        return self.epochs[-1].mean_loss

    def to_dict(self):
        return {"stage": self.stage,
                "epochs": [asdict(e) for e in self.epochs],
                "final_param_checksum": self.final_param_checksum}


def param_checksum(model):
    digest = hashlib.sha256()
    params = model.named_params()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(params[name].data.tobytes())
    return digest.hexdigest()


def set_dropout(model, rate):
    """Point every layer's (shared) attention config at the given rate."""
    model.embed_dropout = rate
    seen = set()
    for layers in (model.enc_layers, model.dec1_layers, model.sem_layers,
                   model.delib_layers, model.dec2_layers):
        for layer in layers:
            if id(layer.cfg) not in seen:
                layer.cfg.dropout = rate
                seen.add(id(layer.cfg))


def apply_spec_mask(frames, n_frames, feat_dim, cfg, rng):
    """Zero up to n_time_masks time bands and n_feat_masks feature bands.

    Returns a masked copy; widths are clamped to the matrix, positions come
    from the given rng stream.
    """
    out = array("d", frames)
    for _ in range(cfg.n_time_masks):
        width = rng.randint(0, min(cfg.max_time_width, n_frames))
        if width == 0:
            continue
        start = rng.randint(0, n_frames - width)
        for t in range(start, start + width):
            base = t * feat_dim
            for c in range(feat_dim):
                out[base + c] = 0.0
    for _ in range(cfg.n_feat_masks):
        width = rng.randint(0, min(cfg.max_feat_width, feat_dim))
        if width == 0:
            continue
        start = rng.randint(0, feat_dim - width)
        for t in range(n_frames):
            base = t * feat_dim
            for c in range(start, start + width):
                out[base + c] = 0.0
    return out


def mask_tokens(token_ids, rng, mask_id, rate=MASK_RATE, ignore_id=-1):
    """Replace ~rate of the tokens by MASK; targets are set at masked spots only."""
    inputs = list(token_ids)
    targets = [ignore_id] * len(token_ids)
    for i, tid in enumerate(token_ids):
        if rng.random() < rate:
            inputs[i] = mask_id
            targets[i] = tid
    return inputs, targets


def _chunks(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _utterance_tensor(utt):
    return Tensor((utt.n_frames, utt.feat_dim), utt.frames)


def _masked_utterance_tensor(utt, cfg, rng):
    if cfg.n_time_masks == 0 and cfg.n_feat_masks == 0:
        return _utterance_tensor(utt)
    return Tensor((utt.n_frames, utt.feat_dim),
                  apply_spec_mask(utt.frames, utt.n_frames, utt.feat_dim, cfg, rng))


def _check_corpus_vocab(model, utterances, ids):
    vocab = model.vocab
    for uid in ids:
        utt = utterances[uid]
        if utt.intent not in vocab.intents:
            raise CorpusError(f"utterance {uid}: intent {utt.intent!r} not in vocabulary")
        for w in utt.transcript:
            if w not in vocab.words:
                raise CorpusError(f"utterance {uid}: word {w!r} not in vocabulary")


def _dev_slice(ids, cfg):
    rng = stream_rng(cfg.seed, "dev")
    k = max(1, int(len(ids) * cfg.dev_fraction))
    return rng.sample(list(ids), min(k, len(ids)))


def greedy_intent(model, utt, second_pass=False, transcripts=None):
    """Width-1 decode for per-epoch dev accuracy monitoring."""
    from twopass_slu.inference import beam_search

    c_aco = model.encode_acoustic(utt)
    if not second_pass:
        hyps = beam_search(lambda prefix: model.first_pass_logits(
            c_aco, list(prefix)).row(len(prefix) - 1), model.vocab, 1, max_len=24)
    else:
        hyp_ids = transcripts[utt.id] or [model.vocab.PAD]
        c_sem = model.encode_semantic(hyp_ids)
        c_del, _ = model.deliberate(c_aco, c_sem)
        hyps = beam_search(lambda prefix: model.second_pass_logits(
            c_del, list(prefix)).row(len(prefix) - 1), model.vocab, 1, max_len=24)
    return model.vocab.token(hyps[0].tokens[1])


def _dev_accuracy(model, utterances, dev_ids, second_pass=False, transcripts=None):
    correct = 0
    for uid in dev_ids:
        utt = utterances[uid]
        correct += greedy_intent(model, utt, second_pass, transcripts) == utt.intent
    return 100.0 * correct / len(dev_ids)


def pretrain_semantic_encoder(model, unlabeled_text, cfg):
    """Masked-token pretraining of the semantic encoder on the text pool."""
    if cfg.stage != "pretrain_lm":
        raise TrainingError(f"expected stage pretrain_lm, got {cfg.stage!r}")
    if not unlabeled_text:
        raise TrainingError("unlabeled text pool is empty")
    vocab = model.vocab
    sentences = [vocab.encode_words(words) for words in unlabeled_text]
    model.set_trainable("pretrain_lm")
    set_dropout(model, cfg.dropout)
    opt = Adam(model.stage_params("pretrain_lm"), cfg.peak_lr, cfg.warmup_steps,
               clip_norm=cfg.grad_clip)
    rng_order = stream_rng(cfg.seed, "pretrain:order")
    rng_mask = stream_rng(cfg.seed, "pretrain:mask")
    rng_drop = stream_rng(cfg.seed, "pretrain:dropout")
    log = TrainLog(stage=cfg.stage)
    order = list(range(len(sentences)))
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        rng_order.shuffle(order)
        total_loss = 0.0
        n_loss = 0
        for batch in _chunks(order, cfg.batch_size):
            losses = []
            with Tape():
                for si in batch:
                    inputs, targets = mask_tokens(sentences[si], rng_mask, vocab.MASK)
                    if all(t == -1 for t in targets):
                        continue
                    sem = model.encode_semantic(inputs, train=True, rng=rng_drop)
                    logits = model.mlm_logits(sem.raw)
                    loss = ops.cross_entropy_label_smoothed(
                        logits, targets, cfg.label_smoothing, ignore_id=-1)
                    losses.append(loss)
                if not losses:
                    continue
                total_loss += sum(l.item() for l in losses)
                n_loss += len(losses)
                scaled = ops.scale(losses[0], 1.0 / len(losses))
                for l in losses[1:]:
                    scaled = ops.add(scaled, ops.scale(l, 1.0 / len(losses)))
                backward(scaled)
            opt.step()
            opt.zero_grad()
        log.epochs.append(EpochStats(epoch, total_loss / max(1, n_loss), None,
                                     time.perf_counter() - t0))
    log.final_param_checksum = param_checksum(model)
    model.trained_stages.add("pretrain_lm")
    return log


def masked_text_loss(model, word_sequences, seed=0):
    """Mean masked-token loss over a text list; the pretraining quality probe."""
    vocab = model.vocab
    rng = stream_rng(seed, "mlm-eval")
    total = 0.0
    count = 0
    for words in word_sequences:
        ids = vocab.encode_words(words)
        inputs, targets = mask_tokens(ids, rng, vocab.MASK)
        if all(t == -1 for t in targets):
            inputs = list(ids)
            inputs[0] = vocab.MASK
            targets = [-1] * len(ids)
            targets[0] = ids[0]
        sem = model.encode_semantic(inputs)
        logits = model.mlm_logits(sem.raw)
        loss = ops.cross_entropy_label_smoothed(logits, targets, 0.0, ignore_id=-1)
        n = sum(1 for t in targets if t != -1)
        total += loss.item() * n
        count += n
    return total / max(1, count)


def train_stage1(model, splits, utterances, cfg):
    """Teacher-forced training of the acoustic encoder + first-pass decoder."""
    if cfg.stage != "stage1":
        raise TrainingError(f"expected stage stage1, got {cfg.stage!r}")
    train_ids = list(splits.train)
    _check_corpus_vocab(model, utterances, train_ids)
    vocab = model.vocab
    model.set_trainable("stage1")
    set_dropout(model, cfg.dropout)
    opt = Adam(model.stage_params("stage1"), cfg.peak_lr, cfg.warmup_steps,
               clip_norm=cfg.grad_clip)
    rng_order = stream_rng(cfg.seed, "stage1:order")
    rng_drop = stream_rng(cfg.seed, "stage1:dropout")
    rng_spec = stream_rng(cfg.seed, "stage1:specmask")
    dev_ids = _dev_slice(train_ids, cfg)
    log = TrainLog(stage=cfg.stage)
    order = list(train_ids)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        rng_order.shuffle(order)
        total_loss = 0.0
        for batch in _chunks(order, cfg.batch_size):
            with Tape():
                losses = []
                for uid in batch:
                    utt = utterances[uid]
                    frames = _masked_utterance_tensor(utt, cfg, rng_spec)
                    c_aco = model.encode_acoustic(frames, train=True, rng=rng_drop)
                    seq = vocab.target_sequence(utt.intent, utt.transcript)
                    logits = model.first_pass_logits(c_aco, seq[:-1], train=True,
                                                     rng=rng_drop)
                    losses.append(ops.cross_entropy_label_smoothed(
                        logits, seq[1:], cfg.label_smoothing))
                total_loss += sum(l.item() for l in losses)
                scaled = ops.scale(losses[0], 1.0 / len(losses))
                for l in losses[1:]:
                    scaled = ops.add(scaled, ops.scale(l, 1.0 / len(losses)))
                backward(scaled)
            opt.step()
            opt.zero_grad()
        dev_acc = _dev_accuracy(model, utterances, dev_ids)
        log.epochs.append(EpochStats(epoch, total_loss / len(order), dev_acc,
                                     time.perf_counter() - t0))
    log.final_param_checksum = param_checksum(model)
    model.trained_stages.add("stage1")
    return log


def generate_pass1_transcripts(model, utterances, ids, beam_width=4,
                               mask_cfg=None, seed=0):
    """Frozen first-pass beam decode of each utterance -> word-id transcripts.

    Runs in eval mode; with mask_cfg the frames are spec-masked first (one
    per-utterance stream derived from seed), injecting realistic recognition
    errors. Either way the result is a pure function of (model, corpus,
    config, seed), so stage 2 caches it.
    """
    from twopass_slu.inference import beam_search

    out = {}
    for uid in ids:
        utt = utterances[uid]
        if mask_cfg is not None:
            rng = stream_rng(seed, f"hyp-mask:{uid}")
            frames = Tensor((utt.n_frames, utt.feat_dim),
                            apply_spec_mask(utt.frames, utt.n_frames,
                                            utt.feat_dim, mask_cfg, rng))
        else:
            frames = _utterance_tensor(utt)
        c_aco = model.encode_acoustic(frames)
        hyps = beam_search(lambda prefix: model.first_pass_logits(
            c_aco, list(prefix)).row(len(prefix) - 1), model.vocab, beam_width,
            max_len=4 + len(utt.transcript) + 6)
        out[uid] = list(hyps[0].transcript_ids)
    return out


def train_stage2(model, splits, utterances, cfg, transcripts=None):
    """Train deliberation encoder + second-pass decoder + projection on the
    model's own first-pass transcripts (generated once; first pass is frozen)."""
    if cfg.stage != "stage2":
        raise TrainingError(f"expected stage stage2, got {cfg.stage!r}")
    if "stage1" not in model.trained_stages:
        warnings.warn("stage 2 invoked on a model without completed stage-1 "
                      "training; proceeding on the untrained first pass",
                      stacklevel=2)
    train_ids = list(splits.train)
    _check_corpus_vocab(model, utterances, train_ids)
    vocab = model.vocab
    model.set_trainable("stage2", joint_update=cfg.joint_update)
    set_dropout(model, cfg.dropout)
    opt = Adam(model.stage_params("stage2", joint_update=cfg.joint_update),
               cfg.peak_lr, cfg.warmup_steps, clip_norm=cfg.grad_clip)
    rng_order = stream_rng(cfg.seed, "stage2:order")
    rng_drop = stream_rng(cfg.seed, "stage2:dropout")
    rng_spec = stream_rng(cfg.seed, "stage2:specmask")
    dev_ids = _dev_slice(train_ids, cfg)

    if transcripts is None:
        mask_cfg = None
        if cfg.hyp_spec_augment:
            mask_cfg = TrainConfig(
                stage="stage2", n_time_masks=cfg.hyp_time_masks,
                max_time_width=cfg.hyp_max_time_width,
                n_feat_masks=cfg.hyp_feat_masks,
                max_feat_width=cfg.hyp_max_feat_width)
        transcripts = generate_pass1_transcripts(model, utterances, train_ids,
                                                 cfg.beam_width, mask_cfg,
                                                 cfg.seed)
    # The semantic encoder is always frozen in stage 2 and the acoustic
    # encoder is frozen unless joint_update, so their outputs are computed
    # once, outside any tape.
    sem_cache = {uid: model.encode_semantic(transcripts[uid] or [vocab.PAD]).raw
                 for uid in train_ids}
    aco_cacheable = (not cfg.joint_update and cfg.n_time_masks == 0
                     and cfg.n_feat_masks == 0)
    aco_cache = {}
    if aco_cacheable:
        aco_cache = {uid: model.encode_acoustic(utterances[uid])
                     for uid in train_ids}

    def acoustic(uid):
        if aco_cacheable:
            return aco_cache[uid]
        utt = utterances[uid]
        frames = _masked_utterance_tensor(utt, cfg, rng_spec)
        return model.encode_acoustic(frames, train=cfg.joint_update, rng=rng_drop)

    log = TrainLog(stage=cfg.stage)
    order = list(train_ids)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        rng_order.shuffle(order)
        total_loss = 0.0
        for batch in _chunks(order, cfg.batch_size):
            with Tape():
                losses = []
                for uid in batch:
                    utt = utterances[uid]
                    c_aco = acoustic(uid)
                    projected = ops.matmul(sem_cache[uid], model.projection)
                    c_del, _ = model.deliberate(c_aco, projected, train=True,
                                                rng=rng_drop)
                    seq = vocab.target_sequence(utt.intent, utt.transcript)
                    logits = model.second_pass_logits(c_del, seq[:-1], train=True,
                                                      rng=rng_drop)
                    losses.append(ops.cross_entropy_label_smoothed(
                        logits, seq[1:], cfg.label_smoothing))
                total_loss += sum(l.item() for l in losses)
                scaled = ops.scale(losses[0], 1.0 / len(losses))
                for l in losses[1:]:
                    scaled = ops.add(scaled, ops.scale(l, 1.0 / len(losses)))
                backward(scaled)
            opt.step()
            opt.zero_grad()
        dev_acc = _dev_accuracy(model, utterances, dev_ids, second_pass=True,
                                transcripts=transcripts)
        log.epochs.append(EpochStats(epoch, total_loss / len(order), dev_acc,
                                     time.perf_counter() - t0))
    log.final_param_checksum = param_checksum(model)
    model.trained_stages.add("stage2")
    return log
