"""Deterministic synthetic SLU corpus.

Intents are (action, object, location) triples; each intent gets several
phrasing templates realized from disjoint training/held-out pattern pools, so
the unseen-phrasing split is structurally different from anything heard in
training while reusing the same closed lexicon. Acoustic features are
frame-level word prototypes passed through a per-speaker affine transform
plus Gaussian noise; the frame period is fixed at 10 ms so "first x seconds"
means the first 100*x frames. A configurable fraction of training templates
places the disambiguating object/location words in the final third of the
utterance, which is what makes prefix truncation lose real information.
"""

import base64
import json
import math
import random
from array import array
from dataclasses import dataclass, field

from twopass_slu.utils import stream_seed

FRAME_PERIOD = 0.01

ACTION_SYNONYMS = {
    "activate": ["activate", "start", "enable"],
    "deactivate": ["deactivate", "stop", "disable"],
    "increase": ["increase", "raise", "boost"],
    "decrease": ["decrease", "lower", "reduce"],
    "bring": ["bring", "fetch", "carry"],
    "play": ["play", "launch", "stream"],
}

OBJECT_SYNONYMS = {
    "lights": ["lights", "lamps"],
    "heating": ["heating", "heat"],
    "music": ["music", "audio"],
    "volume": ["volume", "sound"],
    "television": ["television", "tv"],
    "shoes": ["shoes"],
    "socks": ["socks"],
    "juice": ["juice"],
    "newspaper": ["newspaper", "paper"],
}

LOCATIONS = ["kitchen", "bedroom", "washroom", "hallway", "balcony"]

ACTION_OBJECTS = {
    "activate": ["lights", "heating", "music", "television"],
    "deactivate": ["lights", "heating", "music", "television"],
    "increase": ["heating", "volume"],
    "decrease": ["heating", "volume"],
    "bring": ["shoes", "socks", "juice", "newspaper"],
    "play": ["music", "television"],
}

LOCATED_ACTIONS = ("activate", "deactivate", "increase", "decrease", "play")

# Acoustically confusable word pairs: members share a group base vector and
# differ by a scaled offset, so hearing one reliably takes context (mirrors
# antonym pairs and similar-sounding place names in real commands). Words
# outside any pair sit alone in their own group.
CONFUSION_GROUPS = [
    ["activate", "deactivate"],
    ["start", "stop"],
    ["enable", "disable"],
    ["increase", "decrease"],
    ["raise", "lower"],
    ["boost", "reduce"],
    ["kitchen", "washroom"],
    ["bedroom", "hallway"],
]
_CONFUSION_BASE = {w: f"group{i}" for i, grp in enumerate(CONFUSION_GROUPS)
                   for w in grp}

# Training patterns; OBJ position past 2/3 of the pattern marks it late-info.
# The held-out pool reuses the training lexicon and fragments in word orders
# that never occur in training audio; "must" and "soon" appear only in
# held-out phrasings (and the text pool), so first-pass transcripts of those
# spots carry genuine recognition errors.
TRAIN_PATTERNS_LOC = [
    ["ACT", "the", "OBJ", "in", "the", "LOC"],
    ["please", "ACT", "the", "OBJ", "in", "the", "LOC"],
    ["ACT", "the", "LOC", "OBJ", "now"],
    ["could", "you", "ACT", "the", "OBJ", "in", "the", "LOC"],
    ["ACT", "the", "OBJ", "in", "the", "LOC", "right", "away"],
    ["could", "you", "please", "go", "ahead", "and", "ACT", "the", "OBJ", "in", "the", "LOC"],
    ["i", "would", "like", "you", "to", "ACT", "the", "OBJ", "in", "the", "LOC"],
    ["go", "ahead", "and", "please", "ACT", "the", "LOC", "OBJ", "for", "me"],
    ["in", "the", "LOC", "ACT", "the", "OBJ"],
    ["please", "ACT", "the", "LOC", "OBJ", "today"],
    ["you", "should", "ACT", "the", "OBJ", "in", "the", "LOC"],
    ["i", "need", "the", "OBJ", "in", "the", "LOC", "to", "ACT", "now"],
]
TRAIN_PATTERNS_NOLOC = [
    ["ACT", "me", "the", "OBJ"],
    ["please", "ACT", "the", "OBJ"],
    ["could", "you", "ACT", "the", "OBJ", "for", "me"],
    ["ACT", "the", "OBJ", "right", "away"],
    ["i", "would", "like", "you", "to", "ACT", "the", "OBJ", "now"],
    ["could", "you", "please", "go", "ahead", "and", "ACT", "the", "OBJ"],
    ["you", "should", "ACT", "the", "OBJ", "today"],
    ["go", "ahead", "and", "ACT", "the", "OBJ", "for", "me"],
]
# Held-out phrasings are novel recombinations of trained fragments: every
# n-gram is locally familiar, the full sequences never occur in training.
HELDOUT_PATTERNS_LOC = [
    ["please", "ACT", "the", "LOC", "OBJ"],
    ["could", "you", "please", "ACT", "the", "OBJ", "in", "the", "LOC", "now"],
    ["go", "ahead", "and", "ACT", "the", "OBJ", "in", "the", "LOC", "today"],
    ["i", "would", "like", "you", "to", "ACT", "the", "LOC", "OBJ"],
    ["in", "the", "LOC", "please", "ACT", "the", "OBJ", "now"],
]
HELDOUT_PATTERNS_NOLOC = [
    ["please", "ACT", "the", "OBJ", "for", "me"],
    ["could", "you", "ACT", "the", "OBJ", "now"],
    ["i", "would", "like", "you", "to", "ACT", "the", "OBJ", "right", "away"],
]


class CorpusError(ValueError):
    pass


class CorpusFormatError(CorpusError):
    """Malformed corpus file; message carries the offending line."""


@dataclass(frozen=True)
class Intent:
    action: str
    object: str
    location: str  # "none" for unlocated intents

    @property
    def label(self):
        return f"{self.action}_{self.object}_{self.location}"


@dataclass(frozen=True)
class Template:
    template_id: str
    intent_label: str
    words: tuple
    held_out: bool
    late_info: bool


@dataclass
class IntentGrammar:
    seed: int
    intents: list
    templates: dict          # template_id -> Template
    by_intent: dict          # intent label -> [template_id] (training first)
    lexicon: list            # sorted unique words across all templates
    action_synonyms: dict = field(default_factory=lambda: dict(ACTION_SYNONYMS))
    object_synonyms: dict = field(default_factory=lambda: dict(OBJECT_SYNONYMS))

    def intent_labels(self):
        return [it.label for it in self.intents]

    def training_template_ids(self, label):
        return [t for t in self.by_intent[label] if not self.templates[t].held_out]

    def held_out_template_ids(self, label):
        return [t for t in self.by_intent[label] if self.templates[t].held_out]


def _is_late(pattern):
    key_pos = min(i for i, w in enumerate(pattern) if w in ("OBJ", "LOC"))
    return key_pos >= (2 * len(pattern)) / 3


def _realize(pattern, intent, rng, action_syns, object_syns):
    words = []
    for slot in pattern:
        if slot == "ACT":
            words.append(rng.choice(action_syns[intent.action]))
        elif slot == "OBJ":
            words.append(rng.choice(object_syns[intent.object]))
        elif slot == "LOC":
            words.append(intent.location)
        else:
            words.append(slot)
    return tuple(words)


def all_intent_triples():
    triples = []
    for action in sorted(ACTION_OBJECTS):
        for obj in ACTION_OBJECTS[action]:
            if action in LOCATED_ACTIONS:
                for loc in LOCATIONS:
                    triples.append(Intent(action, obj, loc))
            else:
                triples.append(Intent(action, obj, "none"))
    return triples


def build_grammar(seed, n_intents=31, n_templates_per_intent=8,
                  n_heldout_templates=2, late_fraction=0.5):
    """Deterministically build the intent grammar for a seed."""
    if n_intents < 2:
        raise CorpusError(f"need at least 2 intents, got {n_intents}")
    if n_templates_per_intent < 4:
        raise CorpusError(f"need at least 4 templates per intent, got {n_templates_per_intent}")
    n_train_templates = n_templates_per_intent - n_heldout_templates
    if n_heldout_templates < 1 or n_train_templates < 3:
        raise CorpusError(f"need >= 1 held-out and >= 3 training templates per intent, "
                          f"got {n_heldout_templates} / {n_train_templates}")
    pool = all_intent_triples()
    if n_intents > len(pool):
        raise CorpusError(f"at most {len(pool)} intents available, requested {n_intents}")
    rng = random.Random(stream_seed(seed, "grammar"))
    intents = sorted(rng.sample(pool, n_intents), key=lambda it: it.label)

    templates = {}
    by_intent = {}
    for intent in intents:
        located = intent.location != "none"
        train_pool = TRAIN_PATTERNS_LOC if located else TRAIN_PATTERNS_NOLOC
        held_pool = HELDOUT_PATTERNS_LOC if located else HELDOUT_PATTERNS_NOLOC
        late = [p for p in train_pool if _is_late(p)]
        early = [p for p in train_pool if not _is_late(p)]
        n_late = min(len(late), round(late_fraction * n_train_templates))
        ids = []
        seen_words = set()
        realized = []
        guard = 0
        while len(realized) < n_train_templates:
            guard += 1
            if guard > 1000:
                raise CorpusError(f"cannot realize {n_train_templates} distinct training "
                                  f"templates for intent {intent.label}")
            want_late = len([r for r in realized if r[1]]) < n_late
            pat_pool = late if (want_late and late) else early
            pattern = rng.choice(pat_pool)
            words = _realize(pattern, intent, rng, ACTION_SYNONYMS, OBJECT_SYNONYMS)
            if words in seen_words:
                continue
            seen_words.add(words)
            realized.append((words, _is_late(pattern)))
        held_realized = []
        guard = 0
        while len(held_realized) < n_heldout_templates:
            guard += 1
            if guard > 1000:
                raise CorpusError(f"cannot realize {n_heldout_templates} distinct held-out "
                                  f"templates for intent {intent.label}")
            pattern = rng.choice(held_pool)
            words = _realize(pattern, intent, rng, ACTION_SYNONYMS, OBJECT_SYNONYMS)
            if words in seen_words:
                continue
            seen_words.add(words)
            held_realized.append((words, _is_late(pattern)))
        for k, (words, is_late) in enumerate(realized + held_realized):
            tid = f"{intent.label}::t{k:02d}"
            templates[tid] = Template(tid, intent.label, words,
                                      held_out=(k >= n_train_templates),
                                      late_info=is_late)
            ids.append(tid)
        by_intent[intent.label] = ids

    lexicon = sorted({w for t in templates.values() for w in t.words})
    return IntentGrammar(seed=seed, intents=intents, templates=templates,
                         by_intent=by_intent, lexicon=lexicon)


# ------------------------------------------------------------------ speakers

@dataclass
class SpeakerProfile:
    speaker_id: str
    gain: list          # feat_dim x feat_dim nested lists
    offset: list        # feat_dim
    rate: float         # speaking-rate multiplier
    singular_values: list

    @property
    def condition_number(self):
        return max(self.singular_values) / min(self.singular_values)


def _givens_product(rng, dim, n_rotations, angle_scale):
    m = [[1.0 if i == j else 0.0 for j in range(dim)] for i in range(dim)]
    for _ in range(n_rotations):
        i, j = rng.sample(range(dim), 2)
        theta = rng.gauss(0.0, angle_scale)
        c, s = math.cos(theta), math.sin(theta)
        for col in range(dim):
            a, b = m[i][col], m[j][col]
            m[i][col] = c * a - s * b
            m[j][col] = s * a + c * b
    return m


def make_speaker(seed, speaker_id, feat_dim, angle_scale=0.18):
    """Well-conditioned affine voice transform plus a speaking-rate multiplier.

    The gain is U diag(s) V with small-angle rotations U, V and singular
    values s near 1, so every speaker is a mild, invertible distortion of the
    shared prototype space (word identity survives across speakers, like real
    speech) while held-out speakers still present genuinely novel transforms.
    """
    rng = random.Random(stream_seed(seed, f"speaker:{speaker_id}"))
    u = _givens_product(rng, feat_dim, feat_dim, angle_scale)
    v = _givens_product(rng, feat_dim, feat_dim, angle_scale)
    sigma = [rng.uniform(0.9, 1.12) for _ in range(feat_dim)]
    # gain = U diag(sigma) V: singular values are exactly sigma
    gain = [[sum(u[i][p] * sigma[p] * v[p][j] for p in range(feat_dim))
             for j in range(feat_dim)] for i in range(feat_dim)]
    offset = [rng.gauss(0.0, 0.15) for _ in range(feat_dim)]
    rate = rng.uniform(0.7, 1.4)
    return SpeakerProfile(speaker_id, gain, offset, rate, sigma)


def prototype_vector(grammar_seed, word, feat_dim, confusable_delta=0.3):
    """Per-word acoustic prototype, a pure function of (grammar seed, word).

    Confusion-group members share a base vector plus confusable_delta times a
    word-specific offset; other words get a full-strength prototype of their
    own.
    """
    group = _CONFUSION_BASE.get(word)
    rng = random.Random(stream_seed(grammar_seed, f"proto:{word}:{feat_dim}"))
    offset = [rng.gauss(0.0, 1.0) for _ in range(feat_dim)]
    if group is None:
        return offset
    base_rng = random.Random(stream_seed(grammar_seed, f"protobase:{group}:{feat_dim}"))
    return [base_rng.gauss(0.0, 1.0) + confusable_delta * v for v in offset]


# ---------------------------------------------------------------- utterances

@dataclass
class Utterance:
    id: str
    split: str
    speaker_id: str
    template_id: str
    intent: str
    transcript: list
    frames: array            # flat row-major T x feat_dim float64
    n_frames: int
    feat_dim: int

    @property
    def duration_seconds(self):
        return self.n_frames * FRAME_PERIOD

    def frame(self, t):
        return list(self.frames[t * self.feat_dim:(t + 1) * self.feat_dim])


def word_frame_count(word, rate, frames_per_char):
    return max(2, round(frames_per_char * len(word) * rate))


def synthesize_utterance(grammar, template_id, speaker, noise_level, seed,
                         feat_dim=16, frames_per_char=6.0, utt_id=None,
                         split="", rendition_jitter_ratio=1.2):
    """Render one template as a frame matrix for one speaker.

    Each word becomes a run of frames: speaker-transformed word prototype,
    plus a per-occurrence rendition jitter shared by the whole run (this is
    what keeps confusable words genuinely confusable — it does not average
    out over frames), plus i.i.d. per-frame noise scaled by noise_level. The
    jitter scales with noise_level (std = ratio * noise_level), so noise 0
    still yields exact prototypes and low noise stays cleanly decodable.
    """
    if noise_level < 0:
        raise CorpusError(f"noise_level must be >= 0, got {noise_level}")
    template = grammar.templates.get(template_id)
    if template is None:
        raise CorpusError(f"unknown template id {template_id!r}")
    rng = random.Random(stream_seed(seed, f"synth:{template_id}"))
    frames = array("d")
    for word in template.words:
        proto = prototype_vector(grammar.seed, word, feat_dim)
        transformed = [
            sum(speaker.gain[i][j] * proto[j] for j in range(feat_dim)) + speaker.offset[i]
            for i in range(feat_dim)
        ]
        jitter = rendition_jitter_ratio * noise_level
        if jitter > 0.0:
            transformed = [v + jitter * rng.gauss(0.0, 1.0)
                           for v in transformed]
        for _ in range(word_frame_count(word, speaker.rate, frames_per_char)):
            if noise_level == 0.0:
                frames.extend(transformed)
            else:
                frames.extend(v + noise_level * rng.gauss(0.0, 1.0) for v in transformed)
    n_frames = len(frames) // feat_dim
    return Utterance(
        id=utt_id or f"{template_id}:{speaker.speaker_id}:{seed}",
        split=split,
        speaker_id=speaker.speaker_id,
        template_id=template_id,
        intent=template.intent_label,
        transcript=list(template.words),
        frames=frames,
        n_frames=n_frames,
        feat_dim=feat_dim,
    )


# -------------------------------------------------------------------- splits

@dataclass
class CorpusSplits:
    train: list
    test_seen: list
    test_unseen_phrasing: list
    test_unseen_speaker: list
    unlabeled_text: list     # list of word tuples (no audio)

    def all_ids(self):
        return self.train + self.test_seen + self.test_unseen_phrasing + \
            self.test_unseen_speaker


def make_splits(grammar, n_train=2000, n_test_each=300, n_speakers=20,
                n_heldout_speakers=4, seed=0, noise_level=0.3, feat_dim=16,
                frames_per_char=6.0, text_copies=6, rendition_jitter_ratio=1.2):
    """Sample the four splits plus the unlabeled text pool.

    Returns (CorpusSplits, {utterance_id: Utterance}, {speaker_id: profile}).
    """
    if min(n_train, n_test_each, n_speakers) < 1:
        raise CorpusError("n_train, n_test_each and n_speakers must be positive")
    if n_heldout_speakers >= n_speakers:
        raise CorpusError(f"held-out speakers ({n_heldout_speakers}) must be fewer "
                          f"than speakers ({n_speakers})")
    if n_heldout_speakers < 1:
        raise CorpusError("need at least one held-out speaker")
    speakers = {}
    for i in range(n_speakers):
        sid = f"spk{i:03d}"
        speakers[sid] = make_speaker(seed, sid, feat_dim)
    speaker_ids = sorted(speakers)
    train_speakers = speaker_ids[:n_speakers - n_heldout_speakers]
    heldout_speakers = speaker_ids[n_speakers - n_heldout_speakers:]

    labels = grammar.intent_labels()
    train_tids = [t for lb in labels for t in grammar.training_template_ids(lb)]
    held_tids = [t for lb in labels for t in grammar.held_out_template_ids(lb)]
    if not train_tids or not held_tids:
        raise CorpusError("grammar must provide training and held-out templates")

    rng = random.Random(stream_seed(seed, "splits"))
    utterances = {}

    def synth(split, tag, idx, tid, sid):
        uid = f"{split}-{idx:05d}"
        utt = synthesize_utterance(
            grammar, tid, speakers[sid], noise_level,
            seed=stream_seed(seed, f"{tag}:{idx}"), feat_dim=feat_dim,
            frames_per_char=frames_per_char, utt_id=uid, split=split,
            rendition_jitter_ratio=rendition_jitter_ratio)
        utterances[uid] = utt
        return uid

    train_ids = [synth("train", "train", i, rng.choice(train_tids),
                       rng.choice(train_speakers)) for i in range(n_train)]
    seen_ids = [synth("test_seen", "seen", i, rng.choice(train_tids),
                      rng.choice(train_speakers)) for i in range(n_test_each)]
    phr_ids = [synth("test_unseen_phrasing", "phr", i, rng.choice(held_tids),
                     rng.choice(train_speakers)) for i in range(n_test_each)]
    spk_ids = [synth("test_unseen_speaker", "spk", i, rng.choice(train_tids),
                     rng.choice(heldout_speakers)) for i in range(n_test_each)]

    text = [grammar.templates[t].words for t in sorted(grammar.templates)]
    pool = list(text) * max(1, text_copies)
    rng.shuffle(pool)
    splits = CorpusSplits(train=train_ids, test_seen=seen_ids,
                          test_unseen_phrasing=phr_ids,
                          test_unseen_speaker=spk_ids, unlabeled_text=pool)
    return splits, utterances, speakers


# ------------------------------------------------------------------- file io

CORPUS_FILE = "corpus.jsonl"
TEXT_FILE = "unlabeled.txt"
GRAMMAR_FILE = "grammar.json"


def write_corpus(splits, utterances, directory):
    """Write corpus.jsonl (one utterance per line) and the unlabeled text pool."""
    directory.mkdir(parents=True, exist_ok=True)
    order = splits.all_ids()
    with open(directory / CORPUS_FILE, "w", encoding="utf-8") as fh:
        for uid in order:
            u = utterances[uid]
            rec = {
                "id": u.id,
                "split": u.split,
                "speaker_id": u.speaker_id,
                "template_id": u.template_id,
                "intent": u.intent,
                "transcript": u.transcript,
                "n_frames": u.n_frames,
                "feat_dim": u.feat_dim,
                "frames_b64": base64.b64encode(u.frames.tobytes()).decode("ascii"),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    with open(directory / TEXT_FILE, "w", encoding="utf-8") as fh:
        for words in splits.unlabeled_text:
            fh.write(" ".join(words) + "\n")


def read_corpus(directory):
    """Inverse of write_corpus; bit-exact frames via the base64 payload."""
    utterances = {}
    split_lists = {"train": [], "test_seen": [], "test_unseen_phrasing": [],
                   "test_unseen_speaker": []}
    path = directory / CORPUS_FILE
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                uid = rec["id"]
                frames = array("d")
                frames.frombytes(base64.b64decode(rec["frames_b64"]))
                n_frames = rec["n_frames"]
                feat_dim = rec["feat_dim"]
                if n_frames * feat_dim != len(frames):
                    raise CorpusFormatError(
                        f"{path}:{lineno}: record {uid!r}: header says "
                        f"{n_frames}x{feat_dim} frames but payload has {len(frames)} values")
                if any(not math.isfinite(v) for v in frames):
                    raise CorpusFormatError(
                        f"{path}:{lineno}: record {uid!r}: non-finite frame values")
                utt = Utterance(
                    id=uid, split=rec["split"], speaker_id=rec["speaker_id"],
                    template_id=rec["template_id"], intent=rec["intent"],
                    transcript=list(rec["transcript"]), frames=frames,
                    n_frames=n_frames, feat_dim=feat_dim)
            except KeyError as exc:
                raise CorpusFormatError(
                    f"{path}:{lineno}: missing field {exc}") from exc
            if utt.split not in split_lists:
                raise CorpusFormatError(
                    f"{path}:{lineno}: record {uid!r}: unknown split {utt.split!r}")
            utterances[uid] = utt
            split_lists[utt.split].append(uid)
    text = []
    with open(directory / TEXT_FILE, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                text.append(tuple(line.split()))
    splits = CorpusSplits(unlabeled_text=text, **split_lists)
    return splits, utterances


def grammar_to_json(grammar):
    return {
        "seed": grammar.seed,
        "intents": [[it.action, it.object, it.location] for it in grammar.intents],
        "templates": [
            {
                "template_id": t.template_id,
                "intent": t.intent_label,
                "words": list(t.words),
                "held_out": t.held_out,
                "late_info": t.late_info,
            }
            for t in (grammar.templates[tid] for tid in sorted(grammar.templates))
        ],
        "lexicon": grammar.lexicon,
        "action_synonyms": grammar.action_synonyms,
        "object_synonyms": grammar.object_synonyms,
    }


def grammar_from_json(doc):
    intents = [Intent(a, o, l) for a, o, l in doc["intents"]]
    templates = {}
    by_intent = {it.label: [] for it in intents}
    for t in doc["templates"]:
        tpl = Template(t["template_id"], t["intent"], tuple(t["words"]),
                       t["held_out"], t["late_info"])
        templates[tpl.template_id] = tpl
    for label in by_intent:
        ids = [tid for tid in templates if templates[tid].intent_label == label]
        ids.sort(key=lambda tid: (templates[tid].held_out, tid))
        by_intent[label] = ids
    return IntentGrammar(seed=doc["seed"], intents=intents, templates=templates,
                         by_intent=by_intent, lexicon=list(doc["lexicon"]),
                         action_synonyms={k: list(v) for k, v in doc["action_synonyms"].items()},
                         object_synonyms={k: list(v) for k, v in doc["object_synonyms"].items()})
