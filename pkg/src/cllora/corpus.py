"""Corpus ingestion: byte-level tokenization, context-length classes, splits.

Documents are tokenized at the byte level (token id = byte value, vocab
256 + BOS/EOS/PAD = 259) and truncated to ``max_seq_len``; the pre-truncation
token count (``raw_length``) drives the 5 context-length classes, whose
boundaries sit at the 20/40/60/80th nearest-rank percentiles of the corpus's
raw lengths. Boundary values fall in the lower class.
"""

from __future__ import annotations

import bisect
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Rng

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259
N_LENGTH_CLASSES = 5
DEFAULT_MAX_SEQ_LEN = 128

PLAIN_LINES = "plain-lines"
JSON_LINES = "json-lines"


class CorpusError(ValueError):
    """Corpus-level contract violation (empty corpus, bad config)."""


class IngestError(CorpusError):
    """Malformed input record; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DegenerateLengthsError(CorpusError):
    """Length distribution too flat for 5 classes; use IID partitioning only."""


class SplitFallbackWarning(UserWarning):
    """Stratified split fell back to a global split."""


class ClassingUnavailableWarning(UserWarning):
    """Length classing was skipped; corpus supports IID partitioning only."""


@dataclass(frozen=True)
class Document:
    doc_id: int
    token_ids: np.ndarray  # int64, truncated to max_seq_len, read-only
    raw_length: int        # token count before truncation
    length_class: int      # in [0, 5)

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])


@dataclass
class Corpus:
    documents: list[Document]
    boundaries: tuple[int, int, int, int] | None
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN

    def __len__(self) -> int:
        return len(self.documents)

    def doc(self, doc_id: int) -> Document:
        return self.documents[doc_id]

    def raw_lengths(self) -> list[int]:
        return [d.raw_length for d in self.documents]

    def class_histogram(self, doc_ids=None) -> np.ndarray:
        """Counts per length class (length 5) over the given ids (default all)."""
        hist = np.zeros(N_LENGTH_CLASSES, dtype=np.int64)
        docs = self.documents if doc_ids is None else (self.documents[i] for i in doc_ids)
        for d in docs:
            hist[d.length_class] += 1
        return hist


def tokenize(text: str) -> np.ndarray:
    """UTF-8 byte-level tokenization: one token id in [0, 256) per byte."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def detokenize(token_ids) -> str:
    """Inverse of :func:`tokenize`; special tokens (>= 256) are dropped."""
    ids = np.asarray(token_ids, dtype=np.int64)
    return bytes(int(t) for t in ids if t < 256).decode("utf-8")


def compute_length_classes(raw_lengths) -> tuple[int, int, int, int]:
    """Class boundaries at the 20/40/60/80th nearest-rank percentiles.

    A document with raw length x gets class = number of boundaries < x, i.e.
    boundary values themselves land in the lower class. Tied percentile
    values are advanced to the next distinct length so boundaries stay
    strictly ascending; if that is impossible the corpus cannot support the
    5 classes and only IID partitioning is meaningful.
    """
    lengths = sorted(int(x) for x in raw_lengths)
    n = len(lengths)
    if n < 5:
        raise CorpusError(f"length classing needs >= 5 documents, got {n}")
    if lengths[0] == lengths[-1]:
        raise DegenerateLengthsError(
            "all documents have equal raw length; length classes are undefined "
            "- partition this corpus with mode=iid only"
        )
    bounds = [lengths[math.ceil(p * n / 100) - 1] for p in (20, 40, 60, 80)]
    distinct = sorted(set(lengths))
    for i in range(1, 4):
        if bounds[i] <= bounds[i - 1]:
            j = bisect.bisect_right(distinct, bounds[i - 1])
            if j >= len(distinct):
                raise DegenerateLengthsError(
                    "too few distinct raw lengths for 5 classes "
                    "- partition this corpus with mode=iid only"
                )
            bounds[i] = distinct[j]
    return tuple(bounds)


def length_class_of(raw_length: int, boundaries) -> int:
    return bisect.bisect_left(list(boundaries), raw_length)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _build_corpus(token_rows: list[np.ndarray], max_seq_len: int,
                  classing: str) -> Corpus:
    if not token_rows:
        raise CorpusError("empty corpus: no non-empty documents found")
    raw_lengths = [int(t.shape[0]) for t in token_rows]
    boundaries = None
    if classing not in ("auto", "strict", "off"):
        raise ValueError(f"classing must be auto/strict/off, got {classing!r}")
    if classing != "off":
        try:
            boundaries = compute_length_classes(raw_lengths)
        except CorpusError:
            if classing == "strict":
                raise
            warnings.warn(
                "length classing unavailable for this corpus; all documents "
                "assigned class 0 (IID partitioning only)",
                ClassingUnavailableWarning,
            )
    documents = []
    for i, toks in enumerate(token_rows):
        cls = length_class_of(raw_lengths[i], boundaries) if boundaries else 0
        documents.append(
            Document(
                doc_id=i,
                token_ids=_freeze(toks[:max_seq_len].copy()),
                raw_length=raw_lengths[i],
                length_class=cls,
            )
        )
    return Corpus(documents=documents, boundaries=boundaries,
                  max_seq_len=max_seq_len)


def ingest(path, format: str = PLAIN_LINES, max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
           classing: str = "auto") -> Corpus:
    """Read a corpus file: one document per non-empty line (or jsonl record).

    json-lines records must carry a string "text" field; malformed records
    raise :class:`IngestError` with their 1-based line number.
    """
    path = Path(path)
    if format not in (PLAIN_LINES, JSON_LINES):
        raise ValueError(f"unknown corpus format {format!r}")
    token_rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if format == PLAIN_LINES:
                text = line
            else:
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as err:
                    raise IngestError(lineno, f"malformed JSON ({err.msg})") from None
                if not isinstance(record, dict) or "text" not in record:
                    raise IngestError(lineno, 'record is missing the "text" field')
                text = record["text"]
                if not isinstance(text, str):
                    raise IngestError(lineno, '"text" field must be a string')
                if not text:
                    continue
            token_rows.append(tokenize(text))
    return _build_corpus(token_rows, max_seq_len, classing)


def split(corpus: Corpus, test_fraction: float, seed: int):
    """Deterministic stratified train/test split.

    Within each length class, documents are shuffled by a seed-derived stream
    and the last ceil(fraction * class size) go to the test side. If any
    class is too small to leave a train document, the whole split falls back
    to a global (unstratified) split and a :class:`SplitFallbackWarning` is
    emitted. Returns (train_ids, test_ids), each sorted ascending.
    """
    if not 0 < test_fraction < 0.5:
        raise ValueError(f"test_fraction must be in (0, 0.5), got {test_fraction}")
    rng = Rng(seed)
    by_class: dict[int, list[int]] = {}
    for d in corpus.documents:
        by_class.setdefault(d.length_class, []).append(d.doc_id)

    for cls, ids in sorted(by_class.items()):
        if math.ceil(test_fraction * len(ids)) >= len(ids):
            warnings.warn(
                f"length class {cls} has only {len(ids)} document(s); "
                "falling back to a global unstratified split",
                SplitFallbackWarning,
            )
            all_ids = [d.doc_id for d in corpus.documents]
            perm = rng.split("split/global").permutation(len(all_ids))
            shuffled = [all_ids[int(p)] for p in perm]
            n_test = math.ceil(test_fraction * len(all_ids))
            return sorted(shuffled[:-n_test]), sorted(shuffled[-n_test:])

    train, test = [], []
    for cls, ids in sorted(by_class.items()):
        perm = rng.split(f"split/class/{cls}").permutation(len(ids))
        shuffled = [ids[int(p)] for p in perm]
        n_test = math.ceil(test_fraction * len(ids))
        test.extend(shuffled[-n_test:])
        train.extend(shuffled[:-n_test])
    return sorted(train), sorted(test)


# ---------------------------------------------------------------------------
# Synthetic corpus fixture
# ---------------------------------------------------------------------------

_ALPHABET = "abcdefghijklmnopqrstuvwxyz "
_VOWELS = frozenset("aeiou")


def _char_model() -> tuple[np.ndarray, np.ndarray]:
    """Fixed unigram weights and first-order transition matrix over _ALPHABET.

    Letters follow a 1/(rank+2) frequency decay with a fixed space weight;
    consonant<->vowel transitions are boosted so the text has local structure
    a character model can pick up.
    """
    k = len(_ALPHABET)
    uni = np.array([1.0 / (i + 2) for i in range(k - 1)] + [0.0])
    uni = uni / uni.sum() * 0.82
    uni[-1] = 0.18
    trans = np.empty((k, k))
    for i, ci in enumerate(_ALPHABET):
        row = uni.copy()
        for j, cj in enumerate(_ALPHABET):
            if ci != " " and cj != " ":
                alternates = (ci in _VOWELS) != (cj in _VOWELS)
                row[j] *= 3.0 if alternates else 1.0
        if ci == " ":
            row[-1] = 0.0  # no double spaces
        trans[i] = row / row.sum()
    return uni, trans


_UNIGRAM, _TRANSITION = _char_model()
_UNIGRAM_CDF = np.cumsum(_UNIGRAM)
_TRANSITION_CDF = np.cumsum(_TRANSITION, axis=1)


def _markov_text(rng: Rng, n_chars: int) -> str:
    """Walk the fixed character chain for n_chars steps."""
    u = rng.random(n_chars)
    k = len(_ALPHABET)
    chars = [min(int(np.searchsorted(_UNIGRAM_CDF, u[0], side="right")), k - 1)]
    for t in range(1, n_chars):
        cdf = _TRANSITION_CDF[chars[-1]]
        chars.append(min(int(np.searchsorted(cdf, u[t], side="right")), k - 1))
    return "".join(_ALPHABET[c] for c in chars)


@dataclass(frozen=True)
class LengthProfile:
    """Raw-length recipe for synthetic corpora.

    "uniform" deals every length in [low, high] an equal quota (remainder to
    the shortest lengths) so the profile is followed exactly; "constant" makes
    every document `low` tokens long.
    """
    kind: str = "uniform"
    low: int = 4
    high: int = 124

    def lengths(self, n_docs: int) -> list[int]:
        if self.kind == "constant":
            return [self.low] * n_docs
        if self.kind != "uniform":
            raise ValueError(f"unknown length profile kind {self.kind!r}")
        if not 1 <= self.low <= self.high:
            raise ValueError(f"bad length range [{self.low}, {self.high}]")
        values = list(range(self.low, self.high + 1))
        quota, extra = divmod(n_docs, len(values))
        out = []
        for rank, v in enumerate(values):
            out.extend([v] * (quota + (1 if rank < extra else 0)))
        return out


def synth_corpus(seed: int, n_docs: int, length_profile: LengthProfile | None = None,
                 max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
                 classing: str = "strict") -> Corpus:
    """Deterministic pseudo-text corpus whose raw lengths follow the profile."""
    if n_docs < 5:
        raise CorpusError(f"synthetic corpus needs >= 5 documents, got {n_docs}")
    profile = length_profile or LengthProfile()
    rng = Rng(seed)
    lengths = profile.lengths(n_docs)
    order = rng.split("synth/lengths").permutation(len(lengths))
    lengths = [lengths[int(i)] for i in order]
    token_rows = []
    for i, n_chars in enumerate(lengths):
        text = _markov_text(rng.split(f"synth/doc/{i}"), n_chars)
        token_rows.append(tokenize(text))
    return _build_corpus(token_rows, max_seq_len, classing)


def write_manifest(corpus: Corpus, path) -> None:
    """Audit manifest: json-lines of {id, raw_length, length_class}."""
    with open(path, "w", encoding="utf-8") as fh:
        for d in corpus.documents:
            fh.write(json.dumps({"id": d.doc_id, "raw_length": d.raw_length,
                                 "length_class": d.length_class}) + "\n")
