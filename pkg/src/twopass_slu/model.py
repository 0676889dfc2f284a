"""Two-pass model assembly and checkpoint persistence.

One shared acoustic encoder feeds both passes. The first-pass decoder emits a
joint output sequence [BOS, intent, transcript words..., EOS]; the semantic
encoder (a small trainable masked-token transformer pretrained on the
unlabeled text pool) embeds a transcript, a linear projection matches its
width to the model dim, and the deliberation encoder attends over the
concatenated acoustic+semantic sequence before the second-pass decoder
re-predicts the same output layout.
"""

import hashlib
import json
import struct
from array import array
from dataclasses import asdict, dataclass

from twopass_slu import ops
from twopass_slu.corpus import FRAME_PERIOD
from twopass_slu.nn import (AttentionConfig, DecoderLayer, EncoderLayer,
                            LayerNormParams, Subsampler, add_positions,
                            causal_mask, decoder_forward, encoder_forward)
from twopass_slu.tensor import ShapeError, Tensor, randn

CKPT_MAGIC = b"TPSLU\x00"
CKPT_VERSION = 1


class VocabularyError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint is truncated or its checksum does not match."""


class Vocabulary:
    """Closed token inventory: specials, word tokens, then intent tokens.

    Word ids and intent ids occupy disjoint contiguous ranges.
    """

    PAD = 0
    BOS = 1
    EOS = 2
    MASK = 3
    N_SPECIAL = 4
    SPECIAL_NAMES = ("<pad>", "<bos>", "<eos>", "<mask>")

    def __init__(self, words, intents):
        if len(set(words)) != len(words) or len(set(intents)) != len(intents):
            raise VocabularyError("duplicate words or intents")
        self.words = list(words)
        self.intents = list(intents)
        self._word_id = {w: self.N_SPECIAL + i for i, w in enumerate(self.words)}
        base = self.N_SPECIAL + len(self.words)
        self._intent_id = {lb: base + i for i, lb in enumerate(self.intents)}
        self.intent_base = base

    @classmethod
    def from_grammar(cls, grammar):
        return cls(list(grammar.lexicon), sorted(grammar.intent_labels()))

    @property
    def size(self):
        return self.N_SPECIAL + len(self.words) + len(self.intents)

    @property
    def n_intents(self):
        return len(self.intents)

    def word_id(self, word):
        wid = self._word_id.get(word)
        if wid is None:
            raise VocabularyError(f"word {word!r} not in vocabulary")
        return wid

    def intent_id(self, label):
        iid = self._intent_id.get(label)
        if iid is None:
            raise VocabularyError(f"intent {label!r} not in vocabulary")
        return iid

    def is_word_id(self, tid):
        return self.N_SPECIAL <= tid < self.intent_base

    def is_intent_id(self, tid):
        return self.intent_base <= tid < self.size

    def word_id_range(self):
        return range(self.N_SPECIAL, self.intent_base)

    def intent_id_range(self):
        return range(self.intent_base, self.size)

    def token(self, tid):
        if 0 <= tid < self.N_SPECIAL:
            return self.SPECIAL_NAMES[tid]
        if self.is_word_id(tid):
            return self.words[tid - self.N_SPECIAL]
        if self.is_intent_id(tid):
            return self.intents[tid - self.intent_base]
        raise VocabularyError(f"token id {tid} out of range (size {self.size})")

    def encode_words(self, words):
        return [self.word_id(w) for w in words]

    def target_sequence(self, intent_label, transcript_words):
        """[BOS, intent, words..., EOS] — the joint output layout."""
        return ([self.BOS, self.intent_id(intent_label)]
                + self.encode_words(transcript_words) + [self.EOS])

    def to_dict(self):
        return {"words": self.words, "intents": self.intents}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["words"], doc["intents"])


@dataclass
class ModelConfig:
    feat_dim: int = 16
    model_dim: int = 32
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ff_dim: int = 64
    subsample_factor: int = 6
    sem_dim: int = 32
    sem_heads: int = 4
    sem_layers: int = 2
    sem_ff_dim: int = 64
    delib_layers: int = 2
    dropout: float = 0.1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


@dataclass
class AcousticEmbedding:
    matrix: Tensor            # [T' x d]
    source_duration_seconds: float
    frames_used: int


@dataclass
class SemanticEmbedding:
    raw: Tensor               # [T^ x o]
    projected: Tensor         # [T^ x d]


@dataclass
class JointEmbedding:
    matrix: Tensor            # [(T' + T^) x d]
    acoustic_len: int
    semantic_len: int


STAGE_GROUPS = {
    "pretrain_lm": ("semantic",),
    "stage1": ("acoustic", "dec1"),
    "stage2": ("projection", "delib", "dec2"),
}


class TwoPassModel:
    """All trainable components of the two-pass engine plus the vocabulary."""

    def __init__(self, cfg, vocab, seed=0):
        self.cfg = cfg
        self.vocab = vocab
        self.trained_stages = set()
        d = cfg.model_dim
        o = cfg.sem_dim
        v = vocab.size

        def rng(name):
            from twopass_slu.utils import stream_rng
            return stream_rng(seed, f"init:{name}")

        acfg = AttentionConfig(d, cfg.n_heads, cfg.dropout)
        scfg = AttentionConfig(o, cfg.sem_heads, cfg.dropout)

        self.subsampler = Subsampler(cfg.feat_dim, cfg.subsample_factor, d, rng("sub"))
        self.enc_layers = [EncoderLayer(acfg, cfg.ff_dim, rng(f"enc{i}"))
                           for i in range(cfg.enc_layers)]
        self.enc_ln = LayerNormParams(d)

        self.tok_emb1 = randn((v, d), rng("emb1"), 1.0, requires_grad=True)
        self.dec1_layers = [DecoderLayer(acfg, cfg.ff_dim, rng(f"dec1_{i}"))
                            for i in range(cfg.dec_layers)]
        self.dec1_ln = LayerNormParams(d)
        self.head1_w = randn((d, v), rng("head1"), 1.0 / d ** 0.5, requires_grad=True)
        self.head1_b = Tensor((v,), array("d", bytes(8 * v)), requires_grad=True)

        self.sem_emb = randn((v, o), rng("sem_emb"), 1.0, requires_grad=True)
        self.sem_layers = [EncoderLayer(scfg, cfg.sem_ff_dim, rng(f"sem{i}"))
                           for i in range(cfg.sem_layers)]
        self.sem_ln = LayerNormParams(o)
        self.mlm_w = randn((o, v), rng("mlm"), 1.0 / o ** 0.5, requires_grad=True)
        self.mlm_b = Tensor((v,), array("d", bytes(8 * v)), requires_grad=True)

        self.projection = randn((o, d), rng("proj"), 1.0 / o ** 0.5, requires_grad=True)

        self.delib_layers = [EncoderLayer(acfg, cfg.ff_dim, rng(f"delib{i}"))
                             for i in range(cfg.delib_layers)]
        self.delib_ln = LayerNormParams(d)

        self.tok_emb2 = randn((v, d), rng("emb2"), 1.0, requires_grad=True)
        self.dec2_layers = [DecoderLayer(acfg, cfg.ff_dim, rng(f"dec2_{i}"))
                            for i in range(cfg.dec_layers)]
        self.dec2_ln = LayerNormParams(d)
        self.head2_w = randn((d, v), rng("head2"), 1.0 / d ** 0.5, requires_grad=True)
        self.head2_b = Tensor((v,), array("d", bytes(8 * v)), requires_grad=True)

        # dropout on embedding+position sums; tracks the layer rate
        self.embed_dropout = cfg.dropout
        self._word_support_mask = None

    # ------------------------------------------------------------- parameters

    def param_groups(self):
        groups = {"acoustic": {}, "dec1": {}, "semantic": {}, "projection": {},
                  "delib": {}, "dec2": {}}
        g = groups["acoustic"]
        g.update(self.subsampler.named_params("acoustic.subsample"))
        for i, layer in enumerate(self.enc_layers):
            g.update(layer.named_params(f"acoustic.layers.{i}"))
        g.update(self.enc_ln.named_params("acoustic.ln"))

        g = groups["dec1"]
        g["dec1.tok_emb"] = self.tok_emb1
        for i, layer in enumerate(self.dec1_layers):
            g.update(layer.named_params(f"dec1.layers.{i}"))
        g.update(self.dec1_ln.named_params("dec1.ln"))
        g["dec1.head_w"] = self.head1_w
        g["dec1.head_b"] = self.head1_b

        g = groups["semantic"]
        g["semantic.tok_emb"] = self.sem_emb
        for i, layer in enumerate(self.sem_layers):
            g.update(layer.named_params(f"semantic.layers.{i}"))
        g.update(self.sem_ln.named_params("semantic.ln"))
        g["semantic.mlm_w"] = self.mlm_w
        g["semantic.mlm_b"] = self.mlm_b

        groups["projection"]["projection.matrix"] = self.projection

        g = groups["delib"]
        for i, layer in enumerate(self.delib_layers):
            g.update(layer.named_params(f"delib.layers.{i}"))
        g.update(self.delib_ln.named_params("delib.ln"))

        g = groups["dec2"]
        g["dec2.tok_emb"] = self.tok_emb2
        for i, layer in enumerate(self.dec2_layers):
            g.update(layer.named_params(f"dec2.layers.{i}"))
        g.update(self.dec2_ln.named_params("dec2.ln"))
        g["dec2.head_w"] = self.head2_w
        g["dec2.head_b"] = self.head2_b
        return groups

    def named_params(self):
        out = {}
        for group in self.param_groups().values():
            out.update(group)
        return out

    def stage_params(self, stage, joint_update=False):
        if stage not in STAGE_GROUPS:
            raise ValueError(f"unknown stage {stage!r}; expected one of {sorted(STAGE_GROUPS)}")
        groups = self.param_groups()
        names = list(STAGE_GROUPS[stage])
        if stage == "stage2" and joint_update:
            names += ["acoustic", "dec1"]
        params = {}
        for name in names:
            params.update(groups[name])
        return params

    def set_trainable(self, stage=None, joint_update=False):
        """Enable grads only for the given stage's parameter set (all if None)."""
        trainable = (set(self.named_params())
                     if stage is None else set(self.stage_params(stage, joint_update)))
        for name, p in self.named_params().items():
            p.set_requires_grad(name in trainable)

    # ---------------------------------------------------------------- forward

    def encode_acoustic(self, frames, prefix_seconds=None, train=False, rng=None):
        """Encode a frame matrix, optionally only its first prefix_seconds.

        With the default non-causal self-attention each prefix must be
        re-encoded from scratch; the prefix embedding is not a slice of the
        full-audio embedding.
        """
        if isinstance(frames, Tensor):
            mat = frames
        else:  # corpus Utterance
            mat = Tensor((frames.n_frames, frames.feat_dim), frames.frames)
        t, feat = mat.shape
        if t < 1:
            raise ShapeError("cannot encode an empty frame matrix")
        used = t
        if prefix_seconds is not None:
            if prefix_seconds <= 0:
                raise ValueError(f"prefix_seconds must be positive, got {prefix_seconds}")
            # floor(prefix / period) with a tiny epsilon against FP wobble
            used = min(t, int(prefix_seconds / FRAME_PERIOD + 1e-9))
            if used < 1:
                raise ValueError(f"prefix of {prefix_seconds}s is shorter than one frame")
            if used < t:
                mat = Tensor((used, feat), array("d", mat.data[:used * feat]))
        x = ops.dropout(add_positions(self.subsampler(mat)), self.embed_dropout,
                        rng, train)
        y, _ = encoder_forward(self.enc_layers, x, None, train, rng)
        y = self.enc_ln(y)
        return AcousticEmbedding(y, t * FRAME_PERIOD, used)

    def _decode(self, layers, ln, tok_emb, head_w, head_b, context, prefix_ids,
                train, rng):
        if not prefix_ids or prefix_ids[0] != self.vocab.BOS:
            raise ValueError("target prefix must begin with BOS")
        for tid in prefix_ids:
            if not 0 <= tid < self.vocab.size:
                raise VocabularyError(f"token id {tid} out of vocabulary "
                                      f"(size {self.vocab.size})")
        emb = ops.dropout(add_positions(ops.embedding(tok_emb, prefix_ids)),
                          self.embed_dropout, rng, train)
        h, _ = decoder_forward(layers, emb, context, causal_mask(len(prefix_ids)),
                               train, rng)
        h = ln(h)
        return ops.add(ops.matmul(h, head_w), head_b)

    def first_pass_logits(self, c_aco, prefix_ids, train=False, rng=None):
        """Next-token logits [L x |V|]; row l scores the token after prefix l."""
        ctx = c_aco.matrix if isinstance(c_aco, AcousticEmbedding) else c_aco
        return self._decode(self.dec1_layers, self.dec1_ln, self.tok_emb1,
                            self.head1_w, self.head1_b, ctx, prefix_ids, train, rng)

    def encode_semantic(self, token_ids, train=False, rng=None):
        """Embed transcript tokens; returns raw [T^ x o] and projected [T^ x d]."""
        if not token_ids:
            raise ValueError("cannot encode an empty transcript; substitute PAD "
                             "at the pipeline level")
        for tid in token_ids:
            if not (self.vocab.is_word_id(tid) or tid in (self.vocab.PAD, self.vocab.MASK)):
                raise VocabularyError(
                    f"semantic input accepts word/PAD/MASK tokens only, got id {tid} "
                    f"({self.vocab.token(tid) if 0 <= tid < self.vocab.size else 'invalid'})")
        emb = ops.dropout(add_positions(ops.embedding(self.sem_emb, token_ids)),
                          self.embed_dropout, rng, train)
        y, _ = encoder_forward(self.sem_layers, emb, None, train, rng)
        raw = self.sem_ln(y)
        return SemanticEmbedding(raw, ops.matmul(raw, self.projection))

    def mlm_logits(self, raw):
        """Masked-token prediction logits over word tokens (others masked out)."""
        logits = ops.add(ops.matmul(raw, self.mlm_w), self.mlm_b)
        return ops.add(logits, self._word_mask())

    def _word_mask(self):
        if self._word_support_mask is None:
            v = self.vocab.size
            data = array("d", [-1e30] * v)
            for wid in self.vocab.word_id_range():
                data[wid] = 0.0
            self._word_support_mask = Tensor((v,), data)
        return self._word_support_mask

    def deliberate(self, c_aco, c_sem, train=False, rng=None):
        """Joint embedding over the concatenated acoustic+semantic sequence."""
        aco = c_aco.matrix if isinstance(c_aco, AcousticEmbedding) else c_aco
        sem = c_sem.projected if isinstance(c_sem, SemanticEmbedding) else c_sem
        d = self.cfg.model_dim
        if aco.shape[1] != d or sem.shape[1] != d:
            raise ShapeError(f"deliberation inputs must have width {d}, got "
                             f"{aco.shape} / {sem.shape}")
        joint = ops.concat([aco, sem], axis=0)
        y, maps = encoder_forward(self.delib_layers, joint, None, train, rng)
        y = self.delib_ln(y)
        return JointEmbedding(y, aco.shape[0], sem.shape[0]), maps

    def second_pass_logits(self, c_del, prefix_ids, train=False, rng=None):
        ctx = c_del.matrix if isinstance(c_del, JointEmbedding) else c_del
        return self._decode(self.dec2_layers, self.dec2_ln, self.tok_emb2,
                            self.head2_w, self.head2_b, ctx, prefix_ids, train, rng)


# ------------------------------------------------------------------ checkpoint

def _pack_tensor(name, shape, data):
    name_b = name.encode("utf-8")
    parts = [struct.pack("<H", len(name_b)), name_b,
             struct.pack("<B", len(shape))]
    parts.extend(struct.pack("<I", dim) for dim in shape)
    payload = data.tobytes() if isinstance(data, array) else array("d", data).tobytes()
    parts.append(struct.pack("<Q", len(payload)))
    parts.append(payload)
    return b"".join(parts)


def save_checkpoint(model, optimizer_state, path):
    """Binary checkpoint: magic, version, JSON metadata, tensor records, sha256."""
    meta = {
        "config": model.cfg.to_dict(),
        "vocab": model.vocab.to_dict(),
        "trained_stages": sorted(model.trained_stages),
        "optimizer": None,
    }
    records = []
    params = model.named_params()
    for name, p in params.items():
        records.append(_pack_tensor(name, p.shape, p.data))
    if optimizer_state is not None:
        opt_names = sorted(optimizer_state["m"])
        meta["optimizer"] = {k: optimizer_state[k] for k in
                             ("step", "peak_lr", "warmup_steps", "beta1", "beta2",
                              "eps", "clip_norm")}
        meta["optimizer"]["param_names"] = opt_names
        for name in opt_names:
            records.append(_pack_tensor(f"opt.m.{name}", (params[name].size,),
                                        optimizer_state["m"][name]))
            records.append(_pack_tensor(f"opt.v.{name}", (params[name].size,),
                                        optimizer_state["v"][name]))
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
            struct.pack("<Q", len(meta_b)), meta_b,
            struct.pack("<I", len(records))]
    body.extend(records)
    blob = b"".join(body)
    digest = hashlib.sha256(blob).digest()
    with open(path, "wb") as fh:
        fh.write(blob + digest)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.blob):
            raise CheckpointIntegrityError(f"{self.path}: truncated checkpoint "
                                           f"(needed {n} bytes at offset {self.off})")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))[0]


def load_checkpoint(path):
    """Returns (model, optimizer_state_dict | None); bit-exact round trip."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CKPT_MAGIC) + 36:
        raise CheckpointIntegrityError(f"{path}: file too short to be a checkpoint")
    blob, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch")
    r = _Reader(blob, path)
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u("<I")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version "
                                     f"{version} (supported: {CKPT_VERSION})")
    meta = json.loads(r.take(r.u("<Q")).decode("utf-8"))
    n_records = r.u("<I")
    tensors = {}
    for _ in range(n_records):
        name = r.take(r.u("<H")).decode("utf-8")
        ndim = r.u("<B")
        shape = tuple(r.u("<I") for _ in range(ndim))
        payload = r.take(r.u("<Q"))
        buf = array("d")
        buf.frombytes(payload)
        tensors[name] = (shape, buf)

    cfg = ModelConfig.from_dict(meta["config"])
    vocab = Vocabulary.from_dict(meta["vocab"])
    model = TwoPassModel(cfg, vocab, seed=0)
    model.trained_stages = set(meta["trained_stages"])
    params = model.named_params()
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointIntegrityError(f"{path}: missing tensor {name!r}")
        shape, buf = tensors[name]
        if shape != p.shape:
            raise CheckpointIntegrityError(
                f"{path}: tensor {name!r} has shape {shape}, expected {p.shape}")
        p.data[:] = buf
    opt_state = None
    if meta["optimizer"] is not None:
        opt_state = dict(meta["optimizer"])
        opt_names = opt_state.pop("param_names")
        opt_state["m"] = {}
        opt_state["v"] = {}
        for name in opt_names:
            if name not in params:
                raise CheckpointIntegrityError(
                    f"{path}: optimizer covers unknown parameter {name!r}")
            for kind in ("m", "v"):
                key = f"opt.{kind}.{name}"
                if key not in tensors:
                    raise CheckpointIntegrityError(f"{path}: missing tensor {key!r}")
                shape, buf = tensors[key]
                if shape != (params[name].size,):
                    raise CheckpointIntegrityError(
                        f"{path}: tensor {key!r} has shape {shape}, expected "
                        f"({params[name].size},)")
                opt_state[kind][name] = buf
    return model, opt_state
