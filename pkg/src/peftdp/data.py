"""Corpus ingestion, deterministic tokenization, and the synthetic task.

External data arrives as JSONL records with `text` and `label` fields. The
tokenizer lowercases and splits on whitespace/punctuation; the vocabulary
keeps the most frequent training-split tokens (ties broken lexicographically)
with ids 0 and 1 reserved for PAD and UNK. The synthetic generator produces
a binary classification task whose Bayes accuracy is controlled by the
probability that a class-indicative token is planted into a document.
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, FormatError
from .rng import rng_stream

PAD_ID = 0
UNK_ID = 1
_RESERVED = 2

_TOKEN_RE = re.compile(r"\w+")

# synthetic task shape: documents of 20..60 background tokens drawn from a
# Zipf-like distribution, with class-indicative tokens planted at 3 positions
DOC_LEN_RANGE = (20, 60)
ZIPF_EXPONENT = 1.1
INDICATORS_PER_CLASS = 10
PLANT_POSITIONS = 3


@dataclass(frozen=True)
class Record:
    id: int
    text: str
    label: int


@dataclass(frozen=True)
class Corpus:
    records: tuple
    split: str = "train"
    flipped_ids: frozenset = frozenset()

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def with_flipped_labels(self, flips: dict) -> "Corpus":
        """Copy with labels replaced for the given record ids."""
        unknown = set(flips) - {r.id for r in self.records}
        if unknown:
            raise ContractError(f"flip targets not in corpus: {sorted(unknown)[:5]}")
        new = tuple(replace(r, label=flips[r.id]) if r.id in flips else r
                    for r in self.records)
        return Corpus(new, self.split, self.flipped_ids | frozenset(flips))


def load_jsonl(path) -> Corpus:
    """Read a corpus from JSONL; any malformed line is a hard error.

    Each line must be a JSON object with a string `text` and an integer
    `label`. Record ids are assigned in file order starting at 0.
    """
    records = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid UTF-8") from exc
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise FormatError(f"{path}: line {lineno}: expected an object")
            for fieldname in ("text", "label"):
                if fieldname not in obj:
                    raise FormatError(f"{path}: line {lineno}: missing field {fieldname!r}")
            if not isinstance(obj["text"], str):
                raise FormatError(f"{path}: line {lineno}: `text` must be a string")
            if isinstance(obj["label"], bool) or not isinstance(obj["label"], int):
                raise FormatError(f"{path}: line {lineno}: `label` must be an integer")
            records.append(Record(len(records), obj["text"], obj["label"]))
    return Corpus(tuple(records))


def save_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in corpus.records:
            fh.write(json.dumps({"text": r.text, "label": r.label}) + "\n")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict
    max_size: int

    @classmethod
    def build(cls, train_corpus: Corpus, vocab_size: int) -> "Vocabulary":
        """Keep the top (vocab_size - 2) training tokens by frequency.

        Frequency ties are broken lexicographically (the earlier token wins),
        so the vocabulary is a pure function of the training split.
        """
        if vocab_size < _RESERVED:
            raise ContractError(f"vocab_size must be at least {_RESERVED}")
        counts = Counter()
        for r in train_corpus.records:
            counts.update(tokenize(r.text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        kept = ranked[:vocab_size - _RESERVED]
        mapping = {tok: i + _RESERVED for i, (tok, _) in enumerate(kept)}
        return cls(mapping, vocab_size)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    @property
    def size(self) -> int:
        return _RESERVED + len(self.token_to_id)


@dataclass
class EncodedSplit:
    """Fixed-length id/mask arrays plus bookkeeping for one corpus split."""

    sample_ids: np.ndarray  # (n,) int64
    token_ids: np.ndarray   # (n, max_len) int64
    mask: np.ndarray        # (n, max_len) uint8, 1 = real token
    labels: np.ndarray      # (n,) int64
    flipped: np.ndarray     # (n,) bool

    def __len__(self) -> int:
        return len(self.sample_ids)


def encode(corpus: Corpus, vocab: Vocabulary, max_len: int) -> EncodedSplit:
    """Tokenize, truncate/pad to exactly max_len, and mark real positions.

    A record whose text tokenizes to nothing is encoded as a single UNK so
    every sample keeps at least one unmasked position.
    """
    if max_len < 1:
        raise ContractError("max_len must be positive")
    n = len(corpus)
    token_ids = np.full((n, max_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((n, max_len), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    sample_ids = np.empty(n, dtype=np.int64)
    flipped = np.zeros(n, dtype=bool)
    for row, rec in enumerate(corpus.records):
        toks = tokenize(rec.text)[:max_len] or ["\x00empty"]
        ids = [vocab.encode_token(t) for t in toks]
        token_ids[row, :len(ids)] = ids
        mask[row, :len(ids)] = 1
        labels[row] = rec.label
        sample_ids[row] = rec.id
        flipped[row] = rec.id in corpus.flipped_ids
    return EncodedSplit(sample_ids, token_ids, mask, labels, flipped)


def build_vocab_and_encode(train_corpus: Corpus, test_corpus: Corpus,
                           vocab_size: int, max_len: int):
    """Vocabulary from the training split only, then encode both splits."""
    vocab = Vocabulary.build(train_corpus, vocab_size)
    return vocab, encode(train_corpus, vocab, max_len), encode(test_corpus, vocab, max_len)


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

def generate_synthetic_task(n_train: int, n_test: int, vocab_size: int,
                            signal_strength: float, seed: int):
    """Binary classification corpora with tunable separability.

    Documents draw 20-60 background tokens from a Zipf(1.1) distribution;
    with probability `signal_strength` one of the label's indicator tokens
    is planted at 3 random positions. Unplanted documents carry no label
    signal, so Bayes accuracy is (1 + signal_strength) / 2. Deterministic
    per seed.
    """
    if not 0.5 < signal_strength <= 1.0:
        raise ContractError("signal_strength must lie in (0.5, 1]")
    if n_train < 1 or n_test < 1:
        raise ContractError("n_train and n_test must be positive")
    n_background = vocab_size - _RESERVED - 2 * INDICATORS_PER_CLASS
    if n_background < 10:
        raise ContractError(f"vocab_size {vocab_size} too small for the synthetic task")

    background = [f"w{i:04d}" for i in range(n_background)]
    indicators = [[f"cls{c}tok{j}" for j in range(INDICATORS_PER_CLASS)] for c in (0, 1)]
    weights = 1.0 / np.arange(1, n_background + 1) ** ZIPF_EXPONENT
    weights /= weights.sum()

    rng = rng_stream(seed, "synthetic")

    def make_split(n, split_name):
        records = []
        lo, hi = DOC_LEN_RANGE
        for i in range(n):
            label = int(rng.integers(0, 2))
            length = int(rng.integers(lo, hi + 1))
            toks = [background[j] for j in rng.choice(n_background, size=length, p=weights)]
            if rng.random() < signal_strength:
                tok = indicators[label][int(rng.integers(0, INDICATORS_PER_CLASS))]
                for pos in rng.choice(length, size=min(PLANT_POSITIONS, length), replace=False):
                    toks[pos] = tok
            records.append(Record(i, " ".join(toks), label))
        return Corpus(tuple(records), split_name)

    return make_split(n_train, "train"), make_split(n_test, "test")


def subsample_split(corpus: Corpus, fraction: float, seed: int) -> Corpus:
    """Uniform subsample without replacement, re-sorted by record id."""
    if not 0.0 < fraction <= 1.0:
        raise ContractError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return corpus
    k = round(fraction * len(corpus))
    rng = rng_stream(seed, "subsample")
    picked = rng.choice(len(corpus), size=k, replace=False)
    records = sorted((corpus.records[i] for i in picked), key=lambda r: r.id)
    return Corpus(tuple(records), corpus.split,
                  corpus.flipped_ids & frozenset(r.id for r in records))


# ---------------------------------------------------------------------------
# binary cache for encoded splits
# ---------------------------------------------------------------------------

_CACHE_MAGIC = b"PDPD"
_CACHE_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<i8"), 1: np.dtype("u1"), 2: np.dtype("<f4")}
_TAG_FOR_KIND = {"i": 0, "u": 1, "b": 1, "f": 2}


def _write_arrays(fh, arrays: dict) -> None:
    fh.write(_CACHE_MAGIC)
    fh.write(bytes([_CACHE_VERSION]))
    fh.write(struct.pack("<Q", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = _TAG_FOR_KIND.get(arr.dtype.kind)
        if tag is None:
            raise ContractError(f"unsupported dtype {arr.dtype} for cache record {name!r}")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(bytes([tag, arr.ndim]))
        for dim in arr.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated cache file while reading {what}")
    return buf


def _read_arrays(fh) -> dict:
    if _read_exact(fh, 4, "magic") != _CACHE_MAGIC:
        raise FormatError("bad magic: not an encoded-dataset cache")
    version = _read_exact(fh, 1, "version")[0]
    if version != _CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}")
    (count,) = struct.unpack("<Q", _read_exact(fh, 8, "record count"))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
        name = _read_exact(fh, name_len, "name").decode("utf-8")
        tag, rank = _read_exact(fh, 2, "type tags")
        if tag not in _DTYPE_TAGS:
            raise FormatError(f"unknown dtype tag {tag} for record {name!r}")
        shape = tuple(struct.unpack("<Q", _read_exact(fh, 8, "dim"))[0] for _ in range(rank))
        dtype = _DTYPE_TAGS[tag]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        data = np.frombuffer(_read_exact(fh, n_bytes, f"payload of {name!r}"), dtype=dtype)
        if name in arrays:
            raise FormatError(f"duplicate cache record {name!r}")
        arrays[name] = data.reshape(shape)
    return arrays


def save_encoded(train: EncodedSplit, test: EncodedSplit, path) -> None:
    """Persist both encoded splits to one tagged binary container."""
    arrays = {}
    for prefix, split in (("train", train), ("test", test)):
        arrays[f"{prefix}.sample_ids"] = split.sample_ids
        arrays[f"{prefix}.token_ids"] = split.token_ids
        arrays[f"{prefix}.mask"] = split.mask
        arrays[f"{prefix}.labels"] = split.labels
        arrays[f"{prefix}.flipped"] = split.flipped.astype(np.uint8)
    with open(path, "wb") as fh:
        _write_arrays(fh, arrays)


def load_encoded(path):
    with open(path, "rb") as fh:
        arrays = _read_arrays(fh)
    splits = []
    for prefix in ("train", "test"):
        try:
            splits.append(EncodedSplit(
                sample_ids=arrays[f"{prefix}.sample_ids"].astype(np.int64),
                token_ids=arrays[f"{prefix}.token_ids"].astype(np.int64),
                mask=arrays[f"{prefix}.mask"].astype(np.uint8),
                labels=arrays[f"{prefix}.labels"].astype(np.int64),
                flipped=arrays[f"{prefix}.flipped"].astype(bool),
            ))
        except KeyError as exc:
            raise FormatError(f"cache missing record {exc.args[0]!r}") from exc
    return splits[0], splits[1]
