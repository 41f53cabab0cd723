"""Corpus ingestion, vocabulary, pretrained word vectors, and a deterministic
synthetic dialog generator with plantable dual-task correlation rules.

Corpus directory layout: ``manifest.json`` naming the label sets, plus
``train.jsonl`` / ``dev.jsonl`` / ``test.jsonl`` with one dialog per line:

    {"id": "...", "utterances": [{"speaker": 1, "text": "...",
                                  "sentiment": "...", "act": "..."}, ...]}
"""
from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PAD_INDEX = 0
UNK_INDEX = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_SPLIT_NAMES = ("train", "dev", "test")
_PUNCT_RE = re.compile(r"([^\w\s'])")


@dataclass
class Dialog:
    dialog_id: str
    speakers: list[int]
    texts: list[str]
    sentiments: list[str]
    acts: list[str]

    def __len__(self) -> int:
        return len(self.texts)


@dataclass
class Corpus:
    train: list[Dialog]
    dev: list[Dialog]
    test: list[Dialog]
    sentiment_labels: list[str]
    act_labels: list[str]
    num_speakers: int

    def split(self, name: str) -> list[Dialog]:
        if name not in _SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}; expected one of {_SPLIT_NAMES}")
        return getattr(self, name)


def tokenize(text: str) -> list[str]:
    """Lowercase, detach punctuation, split on whitespace."""
    return _PUNCT_RE.sub(r" \1 ", text.lower()).split()


@dataclass
class Vocabulary:
    """Token-to-index map with reserved PAD=0 and UNK=1 entries."""

    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def from_dialogs(cls, dialogs: list[Dialog]) -> "Vocabulary":
        seen = set()
        for dialog in dialogs:
            for text in dialog.texts:
                seen.update(tokenize(text))
        return cls([PAD_TOKEN, UNK_TOKEN] + sorted(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> np.ndarray:
        """Token ids for one utterance; never empty (falls back to a lone UNK)."""
        ids = [self.index.get(tok, UNK_INDEX) for tok in tokenize(text)]
        if not ids:
            ids = [UNK_INDEX]
        return np.asarray(ids, dtype=np.int64)


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def _parse_dialog_line(line: str, source: str, lineno: int) -> Dialog:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{source}:{lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(record, dict) or "id" not in record or "utterances" not in record:
        raise ValueError(f"{source}:{lineno}: record needs 'id' and 'utterances'")
    utterances = record["utterances"]
    if not isinstance(utterances, list) or not utterances:
        raise ValueError(f"{source}:{lineno}: dialog has no utterances")
    speakers, texts, sentiments, acts = [], [], [], []
    for k, utt in enumerate(utterances):
        for want in ("speaker", "text", "sentiment", "act"):
            if want not in utt:
                raise ValueError(f"{source}:{lineno}: utterance {k} lacks {want!r}")
        if not isinstance(utt["speaker"], int) or utt["speaker"] < 1:
            raise ValueError(f"{source}:{lineno}: utterance {k} has invalid speaker "
                             f"{utt['speaker']!r} (1-based int expected)")
        if not str(utt["text"]).strip():
            raise ValueError(f"{source}:{lineno}: utterance {k} has empty text")
        speakers.append(utt["speaker"])
        texts.append(str(utt["text"]))
        sentiments.append(str(utt["sentiment"]))
        acts.append(str(utt["act"]))
    return Dialog(str(record["id"]), speakers, texts, sentiments, acts)


def _check_labels(dialogs: list[Dialog], sentiment_labels: list[str],
                  act_labels: list[str], split_name: str) -> None:
    sent_ok = set(sentiment_labels)
    act_ok = set(act_labels)
    for dialog in dialogs:
        for label in dialog.sentiments:
            if label not in sent_ok:
                raise ValueError(f"unknown sentiment label {label!r} in {split_name} "
                                 f"split (dialog {dialog.dialog_id})")
        for label in dialog.acts:
            if label not in act_ok:
                raise ValueError(f"unknown act label {label!r} in {split_name} "
                                 f"split (dialog {dialog.dialog_id})")


def load_corpus(path) -> Corpus:
    """Read and validate a corpus directory (manifest plus three jsonl splits)."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ValueError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    for want in ("sentiment_labels", "act_labels"):
        if want not in manifest or not manifest[want]:
            raise ValueError(f"manifest.json lacks a non-empty {want!r}")
    splits = {}
    for name in _SPLIT_NAMES:
        split_path = root / f"{name}.jsonl"
        dialogs = []
        if split_path.exists():
            with open(split_path) as fh:
                for lineno, line in enumerate(fh, start=1):
                    if line.strip():
                        dialogs.append(_parse_dialog_line(line, str(split_path), lineno))
        splits[name] = dialogs

    seen_ids: dict[str, str] = {}
    for name in _SPLIT_NAMES:
        for dialog in splits[name]:
            if dialog.dialog_id in seen_ids:
                raise ValueError(f"dialog id {dialog.dialog_id!r} appears in both "
                                 f"{seen_ids[dialog.dialog_id]} and {name}")
            seen_ids[dialog.dialog_id] = name

    sentiment_labels = list(manifest["sentiment_labels"])
    act_labels = list(manifest["act_labels"])
    for name in _SPLIT_NAMES:
        _check_labels(splits[name], sentiment_labels, act_labels, name)

    num_speakers = manifest.get("num_speakers")
    if num_speakers is None:
        num_speakers = max((s for d in splits["train"] for s in d.speakers), default=1)
    return Corpus(train=splits["train"], dev=splits["dev"], test=splits["test"],
                  sentiment_labels=sentiment_labels, act_labels=act_labels,
                  num_speakers=int(num_speakers))


def save_corpus(corpus: Corpus, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "sentiment_labels": corpus.sentiment_labels,
        "act_labels": corpus.act_labels,
        "num_speakers": corpus.num_speakers,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for name in _SPLIT_NAMES:
        with open(root / f"{name}.jsonl", "w") as fh:
            for dialog in corpus.split(name):
                record = {
                    "id": dialog.dialog_id,
                    "utterances": [
                        {"speaker": spk, "text": text, "sentiment": sent, "act": act}
                        for spk, text, sent, act in zip(dialog.speakers, dialog.texts,
                                                        dialog.sentiments, dialog.acts)
                    ],
                }
                fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# pretrained word vectors
# ---------------------------------------------------------------------------

def load_word_vectors(path, dim: int) -> dict[str, np.ndarray]:
    """Parse a GloVe-style text file: token followed by ``dim`` decimals per line."""
    vectors: dict[str, np.ndarray] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected a token and {dim} values, "
                                 f"got {len(parts) - 1} values")
            try:
                vectors[parts[0]] = np.asarray([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric vector entry") from exc
    return vectors


def fallback_vector(token: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic stand-in for a token absent from the vector file."""
    rng = np.random.default_rng([seed, zlib.crc32(token.encode("utf-8"))])
    return rng.uniform(-0.1, 0.1, size=dim)


def build_embedding_matrix(vocab: Vocabulary, vectors: dict[str, np.ndarray] | None,
                           dim: int, seed: int) -> np.ndarray:
    """Per-vocab-row embedding init: file vector if present, seeded fallback
    otherwise.  The PAD row stays zero."""
    matrix = np.zeros((len(vocab), dim))
    for i, token in enumerate(vocab.tokens):
        if i == PAD_INDEX:
            continue
        vec = None if vectors is None else vectors.get(token)
        if vec is not None:
            if vec.shape != (dim,):
                raise ValueError(f"vector for {token!r} has dim {vec.shape[0]}, expected {dim}")
            matrix[i] = vec
        else:
            matrix[i] = fallback_vector(token, dim, seed)
    return matrix


@dataclass
class EncodedDialog:
    """A dialog mapped to model inputs: token ids and integer labels."""

    dialog_id: str
    token_ids: list[np.ndarray]
    speakers: list[int]
    sentiment_ids: np.ndarray
    act_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.token_ids)


def encode_dialogs(dialogs: list[Dialog], vocab: Vocabulary,
                   sentiment_labels: list[str], act_labels: list[str]) -> list[EncodedDialog]:
    sent_index = {label: i for i, label in enumerate(sentiment_labels)}
    act_index = {label: i for i, label in enumerate(act_labels)}
    encoded = []
    for dialog in dialogs:
        encoded.append(EncodedDialog(
            dialog_id=dialog.dialog_id,
            token_ids=[vocab.encode(text) for text in dialog.texts],
            speakers=list(dialog.speakers),
            sentiment_ids=np.asarray([sent_index[s] for s in dialog.sentiments]),
            act_ids=np.asarray([act_index[a] for a in dialog.acts]),
        ))
    return encoded


# ---------------------------------------------------------------------------
# synthetic corpus with planted dual-task rules
# ---------------------------------------------------------------------------

@dataclass
class SyntheticRules:
    """Generation rules that make the two label sequences mutually informative.

    Planted structure:
      R1  a "disagreement" act flips the sentiment of the previous utterance;
      R2  an "agreement" act copies it;
      R3  a "question" act forces the next utterance's act to "answer".

    Agreement/disagreement utterances carry no sentiment cue, so their
    sentiment is recoverable only from the previous utterance plus their own
    act.  With the default settings most turns agree or disagree, sharing one
    "reaction" keyword inventory; which of the two acts a reaction carries is
    decided by the turn-taking pattern (a reaction from a new speaker
    disagrees, from the same speaker agrees).  Sentiment labels therefore
    form long flip/copy chains anchored by sparse keyword-bearing utterances,
    and a bag-of-words look at single utterances can solve neither task.
    """

    sentiments: tuple[str, ...] = ("positive", "negative")
    acts: tuple[str, ...] = ("statement", "question", "answer",
                             "agreement", "disagreement")
    flip_act: str = "disagreement"
    copy_act: str = "agreement"
    question_act: str = "question"
    answer_act: str = "answer"
    min_utterances: int = 4
    max_utterances: int = 10
    speaker_repeat_prob: float = 0.2
    context_act_prob: float = 0.75          # share of eligible turns that agree/disagree
    max_context_chain: int | None = None    # optional cap on consecutive such turns
    reaction_act_from_speaker: bool = True  # new speaker disagrees, same speaker agrees
    act_keywords: dict = field(default_factory=lambda: {
        "statement": ("report", "notice", "observe"),
        "question": ("what", "why", "how"),
        "answer": ("because", "reply", "therefore"),
        "agreement": ("react", "echo", "counter"),
        "disagreement": ("react", "echo", "counter"),
    })
    sentiment_keywords: dict = field(default_factory=lambda: {
        "positive": ("great", "lovely", "win"),
        "negative": ("awful", "gloomy", "loss"),
    })
    noise_tokens: tuple[str, ...] = tuple(
        f"filler{i:02d}" for i in range(40)
    )
    noise_range: tuple[int, int] = (2, 5)

    def validate(self) -> None:
        if not self.acts or not self.sentiments:
            raise ValueError("rule set needs non-empty act and sentiment inventories")
        for act in self.acts:
            if act not in self.act_keywords or not self.act_keywords[act]:
                raise ValueError(f"no keywords for act {act!r}")
        for sent in self.sentiments:
            if sent not in self.sentiment_keywords or not self.sentiment_keywords[sent]:
                raise ValueError(f"no keywords for sentiment {sent!r}")


def default_rules() -> SyntheticRules:
    return SyntheticRules()


def _generate_dialog(rules: SyntheticRules, dialog_id: str,
                     rng: np.random.Generator) -> Dialog:
    n = int(rng.integers(rules.min_utterances, rules.max_utterances + 1))
    opening_acts = [a for a in rules.acts
                    if a not in (rules.flip_act, rules.copy_act, rules.answer_act)]
    speakers, acts, sentiments = [], [], []
    chain = 0
    for i in range(n):
        if i == 0:
            speakers.append(1)
            acts.append(str(rng.choice(opening_acts)))
            sentiments.append(str(rng.choice(rules.sentiments)))
            continue
        if rng.random() < rules.speaker_repeat_prob:
            speakers.append(speakers[-1])
        else:
            speakers.append(2 if speakers[-1] == 1 else 1)
        chain_open = rules.max_context_chain is None or chain < rules.max_context_chain
        if acts[-1] == rules.question_act:
            act = rules.answer_act
        elif chain_open and rng.random() < rules.context_act_prob:
            if rules.reaction_act_from_speaker:
                act = rules.flip_act if speakers[i] != speakers[i - 1] else rules.copy_act
            else:
                act = rules.flip_act if rng.random() < 0.5 else rules.copy_act
        else:
            act = str(rng.choice(opening_acts))
        if act == rules.flip_act:
            prev = sentiments[-1]
            others = [s for s in rules.sentiments if s != prev]
            sentiments.append(str(rng.choice(others)))
            chain += 1
        elif act == rules.copy_act:
            sentiments.append(sentiments[-1])
            chain += 1
        else:
            sentiments.append(str(rng.choice(rules.sentiments)))
            chain = 0
        acts.append(act)

    texts = []
    for act, sentiment in zip(acts, sentiments):
        tokens = [str(rng.choice(rules.act_keywords[act]))]
        if act not in (rules.flip_act, rules.copy_act):
            tokens.append(str(rng.choice(rules.sentiment_keywords[sentiment])))
        lo, hi = rules.noise_range
        k = int(rng.integers(lo, hi + 1))
        tokens.extend(str(t) for t in rng.choice(rules.noise_tokens, size=k))
        rng.shuffle(tokens)
        texts.append(" ".join(tokens))
    return Dialog(dialog_id, speakers, texts, sentiments, acts)


def generate_synthetic(rule_set: SyntheticRules | None = None,
                       num_dialogs: int | tuple[int, int, int] = 500,
                       seed: int = 0) -> Corpus:
    """Deterministic synthetic corpus; an int count yields n/(n//5)/(n//5) splits."""
    rules = default_rules() if rule_set is None else rule_set
    rules.validate()
    if isinstance(num_dialogs, int):
        counts = (num_dialogs, max(1, num_dialogs // 5), max(1, num_dialogs // 5))
    else:
        counts = tuple(num_dialogs)
    rng = np.random.default_rng(seed)
    splits = {}
    for name, count in zip(_SPLIT_NAMES, counts):
        splits[name] = [_generate_dialog(rules, f"{name}-{i:04d}", rng)
                        for i in range(count)]
    return Corpus(train=splits["train"], dev=splits["dev"], test=splits["test"],
                  sentiment_labels=sorted(rules.sentiments),
                  act_labels=sorted(rules.acts),
                  num_speakers=2)
