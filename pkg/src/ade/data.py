"""Corpus ingestion, vocabulary building, and the synthetic polysemy task.

The synthetic task is built so that the label is a function of which cue
token sits immediately after the trigger token, while the *bag* of
tokens is identically distributed for every label: each sample contains
exactly one cue from every cue group, and only adjacency marks the true
one. Any predictor that ignores token co-occurrence therefore tops out
at chance, which makes the with/without-attention contrast decidable
and its Bayes rates exactly computable.
"""

from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError
from .rng import SplitMix64

PAD_ID = 0
UNK_ID = 1

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass
class Corpus:
    texts: list
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.texts) != self.labels.size:
            raise DataError("texts and labels length mismatch")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.n_classes):
            raise DataError("label outside [0, n_classes)")


@dataclass
class Vocab:
    token_to_id: dict
    id_to_token: list

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


def tokenize(text: str) -> list:
    return _TOKEN_RE.findall(text.lower())


def load_csv(path, text_columns, label_column, has_header: bool = False) -> Corpus:
    """Read a delimited file into a corpus.

    Text columns are concatenated with a space; labels are remapped to
    0-based ids in sorted order (numeric when every label parses as an
    integer). Rows with missing fields or empty text are rejected with
    their line number.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if has_header and lineno == 1:
                continue
            if not row:
                continue
            needed = max(list(text_columns) + [label_column]) + 1
            if len(row) < needed:
                raise DataError(f"line {lineno}: expected {needed} fields, got {len(row)}")
            text = " ".join(row[c].strip() for c in text_columns).strip()
            if not text:
                raise DataError(f"line {lineno}: empty text after cleaning")
            rows.append((text, row[label_column].strip()))
    if not rows:
        raise DataError("no data rows found")
    raw_labels = [r[1] for r in rows]
    uniq = sorted(set(raw_labels), key=_label_sort_key)
    mapping = {lab: i for i, lab in enumerate(uniq)}
    labels = np.array([mapping[l] for l in raw_labels], dtype=np.int64)
    return Corpus(texts=[r[0] for r in rows], labels=labels, n_classes=len(uniq))


def _label_sort_key(label: str):
    try:
        return (0, int(label), "")
    except ValueError:
        return (1, 0, label)


def save_csv(path, corpus: Corpus) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for text, label in zip(corpus.texts, corpus.labels):
            writer.writerow([int(label), text])


# Column presets for the two benchmark CSV layouts.
CSV_PRESETS = {
    "plain": {"text_columns": [1], "label_column": 0},
    "agnews": {"text_columns": [1, 2], "label_column": 0},
    "dbpedia": {"text_columns": [1, 2], "label_column": 0},
}


def build_vocab(corpus: Corpus, max_size: int) -> Vocab:
    """Most frequent tokens up to max_size - 2; ids 0/1 are pad/unk.

    Ties break lexicographically so rebuilding is reproducible.
    """
    if not corpus.texts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for text in corpus.texts:
        counts.update(tokenize(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max(0, max_size - 2)]]
    id_to_token = ["<pad>", "<unk>"] + keep
    return Vocab(token_to_id={t: i for i, t in enumerate(id_to_token)},
                 id_to_token=id_to_token)


def encode(text: str, vocab: Vocab, l_max: int):
    """Token ids padded/truncated to l_max plus the real-token mask.

    An empty or all-unknown-whitespace text yields an all-false mask;
    callers must reject such rows before the forward pass.
    """
    toks = tokenize(text)[:l_max]
    ids = np.full(l_max, PAD_ID, dtype=np.int64)
    mask = np.zeros(l_max, dtype=bool)
    for i, tok in enumerate(toks):
        ids[i] = vocab.lookup(tok)
        mask[i] = True
    return ids, mask


def encode_corpus(corpus: Corpus, vocab: Vocab, l_max: int):
    ids = np.zeros((len(corpus.texts), l_max), dtype=np.int64)
    mask = np.zeros((len(corpus.texts), l_max), dtype=bool)
    for i, text in enumerate(corpus.texts):
        ids[i], mask[i] = encode(text, vocab, l_max)
        if not mask[i].any():
            raise DataError(f"sample {i} encodes to an empty sequence")
    return ids, mask, corpus.labels.copy()


# ---------------------------------------------------------------------------
# synthetic polysemy task
# ---------------------------------------------------------------------------

@dataclass
class SynthTaskSpec:
    n_classes: int = 4
    vocab_size: int = 64
    n_triggers: int = 8
    cues_per_sense: int = 2
    min_len: int = 8
    max_len: int = 12
    noise_rate: float = 0.0
    n_train: int = 768
    n_test: int = 1024
    seed: int = 0
    # Word position of the trigger (cue sits right after it). None draws
    # the position uniformly per sample; that variant needs the model to
    # discover relative attention and is far harder at desk scale.
    trigger_position: int | None = 0

    def validate(self):
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.cues_per_sense < 1:
            raise ConfigurationError("need at least one cue token per sense")
        if self.n_triggers < 1:
            raise ConfigurationError("need at least one trigger token")
        if self.min_len < self.n_classes + 1 or self.max_len < self.min_len:
            raise ConfigurationError(
                "sequences must fit one trigger plus one cue per class")
        if (self.trigger_position is not None
                and not 0 <= self.trigger_position < self.min_len - 1):
            raise ConfigurationError("trigger position must leave room for the cue")
        reserved = self.n_triggers + self.n_classes * self.cues_per_sense
        if self.vocab_size < reserved + 1:
            raise ConfigurationError(
                f"vocab of {self.vocab_size} cannot hold {reserved} marked tokens")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigurationError("noise rate must be in [0, 1]")


@dataclass
class BayesReport:
    """Exact accuracy ceilings derived from the generator distribution."""

    context_aware: float
    context_free: float
    noise_rate: float
    n_classes: int


def _token_names(spec: SynthTaskSpec):
    triggers = [f"trig{i}" for i in range(spec.n_triggers)]
    cues = [[f"cue{c}x{g}" for g in range(spec.cues_per_sense)]
            for c in range(spec.n_classes)]
    n_fillers = spec.vocab_size - spec.n_triggers - spec.n_classes * spec.cues_per_sense
    fillers = [f"w{i}" for i in range(n_fillers)]
    return triggers, cues, fillers


def synth_polysemy(spec: SynthTaskSpec):
    """Generate (train, test, bayes-report) for the adjacency-cue task.

    Construction per sample: a trigger token, the true cue (group =
    content class) immediately after it, one decoy cue from every other
    group at random non-adjacent positions, fillers elsewhere. The label
    equals the content class except for noisy samples, whose content
    class is drawn independently of the label.
    """
    spec.validate()
    triggers, cues, fillers = _token_names(spec)
    rng = SplitMix64(spec.seed)

    def build_split(n, split_rng, tag):
        labels = np.array([i % spec.n_classes for i in range(n)], dtype=np.int64)
        labels = labels[split_rng.shuffle(n)]
        n_noisy = int(round(spec.noise_rate * n))
        noisy = np.zeros(n, dtype=bool)
        noisy[split_rng.shuffle(n)[:n_noisy]] = True
        texts = []
        for i in range(n):
            content_class = (int(split_rng.integers(0, spec.n_classes, ()))
                             if noisy[i] else int(labels[i]))
            texts.append(_build_sample(spec, content_class, triggers, cues,
                                       fillers, split_rng))
        return Corpus(texts=texts, labels=labels, n_classes=spec.n_classes,
                      split=tag)

    train = build_split(spec.n_train, rng.spawn(1), "train")
    test = build_split(spec.n_test, rng.spawn(2), "test")
    p, c = spec.noise_rate, spec.n_classes
    report = BayesReport(
        context_aware=(1.0 - p) + p / c,
        context_free=1.0 / c,
        noise_rate=p,
        n_classes=c,
    )
    return train, test, report


def _build_sample(spec, content_class, triggers, cues, fillers, rng):
    length = int(rng.integers(spec.min_len, spec.max_len + 1, ()))
    trigger = triggers[int(rng.integers(0, len(triggers), ()))]
    chosen = [group[int(rng.integers(0, len(group), ()))] for group in cues]
    true_cue = chosen[content_class]
    decoys = [chosen[c] for c in range(spec.n_classes) if c != content_class]

    # trigger at position p, true cue at p + 1, decoys anywhere else
    if spec.trigger_position is None:
        trig_pos = int(rng.integers(0, length - 1, ()))
    else:
        trig_pos = spec.trigger_position
    words = [None] * length
    words[trig_pos] = trigger
    words[trig_pos + 1] = true_cue
    open_slots = [i for i in range(length) if words[i] is None]
    perm = rng.shuffle(len(open_slots))
    for j, decoy in enumerate(decoys):
        words[open_slots[int(perm[j])]] = decoy
    for i in range(length):
        if words[i] is None:
            words[i] = fillers[int(rng.integers(0, len(fillers), ()))]
    return " ".join(words)


def enumerate_bayes(spec: SynthTaskSpec) -> BayesReport:
    """Independent oracle: exhaustive enumeration over the label/content
    joint distribution.

    Fillers, cue-within-group choices, lengths, and positions are drawn
    independently of the label by construction, so the label-relevant
    outcome space is (label, noisy?, content class). The bag of tokens
    always holds one cue per group, hence carries no label information;
    an order-aware predictor reads the content class exactly.
    """
    spec.validate()
    c, p = spec.n_classes, spec.noise_rate
    aware = 0.0
    free_posterior = np.zeros(c)
    for label in range(c):
        p_label = 1.0 / c
        # clean branch: content == label
        aware += p_label * (1.0 - p) * 1.0
        free_posterior[label] += p_label * (1.0 - p)
        # noisy branch: content uniform, independent of label
        for content in range(c):
            joint = p_label * p / c
            aware += joint * (1.0 if content == label else 0.0)
            free_posterior[label] += joint
    context_free = float(free_posterior.max())
    return BayesReport(context_aware=float(aware), context_free=context_free,
                       noise_rate=p, n_classes=c)
