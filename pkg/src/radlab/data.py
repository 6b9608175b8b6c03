"""Corpus ingestion, word-level vocabulary, encoding and batching.

Corpus files are JSONL, one object per line::

    {"context": "hi there" | ["turn 1", "turn 2"], "response": "hello",
     "persona": ["optional leading turns"]}

A context becomes its turns joined and terminated by ``<sep>``; a response
ends with ``<eos>``.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ._io import atomic_write_text, dump_jsonl

log = logging.getLogger(__name__)

PAD, BOS, SEP, EOS, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<sep>", "<eos>", "<unk>")
SPECIAL_IDS = frozenset(range(len(SPECIAL_TOKENS)))

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Split into word runs and single punctuation marks."""
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in SPECIAL_IDS:
                continue
            out.append(self.itos[i])
        return out

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, "".join(t + "\n" for t in self.itos))

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(pairs: Sequence[DialoguePair], max_size: int) -> Vocabulary:
    """Most frequent words first, ties by first occurrence; specials always kept."""
    if max_size <= len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must exceed {len(SPECIAL_TOKENS)} reserved tokens")
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    for pair in pairs:
        for tok in list(pair.context) + list(pair.response):
            if tok in SPECIAL_TOKENS:
                continue
            counts[tok] += 1
            first_seen.setdefault(tok, len(first_seen))
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    return Vocabulary(list(SPECIAL_TOKENS) + ranked[: max_size - len(SPECIAL_TOKENS)])


@dataclass(frozen=True)
class DialoguePair:
    context: tuple[str, ...]  # word tokens, turns separated and ended by <sep>
    response: tuple[str, ...]  # word tokens ending with <eos>

    @classmethod
    def from_texts(cls, turns: Sequence[str], response: str) -> DialoguePair:
        ctx: list[str] = []
        for turn in turns:
            ctx.extend(tokenize(turn))
            ctx.append(SPECIAL_TOKENS[SEP])
        return cls(tuple(ctx), tuple(tokenize(response)) + (SPECIAL_TOKENS[EOS],))


def _turns(value, lineno: int, key: str) -> list[str]:
    if isinstance(value, str):
        return [value]
    if isinstance(value, list) and all(isinstance(v, str) for v in value):
        return list(value)
    raise CorpusError(f"line {lineno}: field {key!r} must be a string or list of strings")


def parse_records(lines, source: str = "<input>") -> tuple[list[DialoguePair], int]:
    """Parse JSONL lines into pairs; returns (pairs, number of skipped records)."""
    pairs, skipped = [], 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{source}: line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise CorpusError(f"{source}: line {lineno}: expected a JSON object")
        for key in ("context", "response"):
            if key not in rec:
                raise CorpusError(f"{source}: line {lineno}: missing {key!r}")
        turns = _turns(rec.get("persona", []), lineno, "persona") + _turns(rec["context"], lineno, "context")
        turns = [t for t in turns if tokenize(t)]
        if not isinstance(rec["response"], str):
            raise CorpusError(f"{source}: line {lineno}: field 'response' must be a string")
        if not turns or not tokenize(rec["response"]):
            skipped += 1
            continue
        pairs.append(DialoguePair.from_texts(turns, rec["response"]))
    return pairs, skipped


def load_corpus(path: str | Path) -> list[DialoguePair]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus not found: {path}")
    with path.open(encoding="utf-8") as fh:
        pairs, skipped = parse_records(fh, str(path))
    if skipped:
        log.warning("%s: skipped %d record(s) with an empty context or response", path, skipped)
    return pairs


# ---------------------------------------------------------------------------
# encoding and batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncodedPair:
    context: np.ndarray  # int64 ids, ends with SEP
    response: np.ndarray  # int64 ids, ends with EOS
    truncated: bool = False


def encode_pair(pair: DialoguePair, vocab: Vocabulary, max_positions: int) -> EncodedPair:
    """Encode ids; drop the oldest context tokens when m + n exceeds capacity."""
    ctx = np.asarray(vocab.encode(pair.context), dtype=np.int64)
    resp = np.asarray(vocab.encode(pair.response), dtype=np.int64)
    truncated = False
    if len(resp) > max_positions - 1:
        resp = np.concatenate([resp[: max_positions - 2], [EOS]])
        truncated = True
    room = max_positions - len(resp)
    if len(ctx) > room:
        ctx = ctx[len(ctx) - room :]
        truncated = True
    return EncodedPair(ctx, resp, truncated)


def encode_corpus(pairs: Sequence[DialoguePair], vocab: Vocabulary, max_positions: int) -> list[EncodedPair]:
    encoded = [encode_pair(p, vocab, max_positions) for p in pairs]
    n_trunc = sum(e.truncated for e in encoded)
    if n_trunc:
        log.warning("truncated %d of %d pairs to fit %d positions", n_trunc, len(encoded), max_positions)
    return encoded


@dataclass(frozen=True)
class Batch:
    context: np.ndarray  # (B, M) left-padded with PAD
    context_mask: np.ndarray  # (B, M) True on real tokens
    response: np.ndarray  # (B, N) right-padded with PAD
    response_mask: np.ndarray

    def __len__(self):
        return self.context.shape[0]


def collate(items: Sequence[EncodedPair]) -> Batch:
    B = len(items)
    M = max(len(e.context) for e in items)
    N = max(len(e.response) for e in items)
    ctx = np.full((B, M), PAD, dtype=np.int64)
    resp = np.full((B, N), PAD, dtype=np.int64)
    for i, e in enumerate(items):
        ctx[i, M - len(e.context) :] = e.context
        resp[i, : len(e.response)] = e.response
    return Batch(ctx, _left_mask(items, M), resp, _right_mask(items, N))


def _left_mask(items, M):
    mask = np.zeros((len(items), M), dtype=bool)
    for i, e in enumerate(items):
        mask[i, M - len(e.context) :] = True
    return mask


def _right_mask(items, N):
    mask = np.zeros((len(items), N), dtype=bool)
    for i, e in enumerate(items):
        mask[i, : len(e.response)] = True
    return mask


def iter_batches(
    encoded: Sequence[EncodedPair], batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[Batch]:
    """Yield batches in an order fixed by ``rng`` (corpus order when None)."""
    order = np.arange(len(encoded)) if rng is None else rng.permutation(len(encoded))
    for start in range(0, len(order), batch_size):
        yield collate([encoded[i] for i in order[start : start + batch_size]])


def num_batches(n_items: int, batch_size: int) -> int:
    return -(-n_items // batch_size)


# ---------------------------------------------------------------------------
# synthetic copy task
# ---------------------------------------------------------------------------


def copy_task_alphabet(size: int = 20) -> list[str]:
    return [f"s{i:02d}" for i in range(size)]


def make_copy_records(
    n: int, seed: int, alphabet_size: int = 20, min_len: int = 3, max_len: int = 8
) -> list[dict]:
    """Records whose response is the context's symbols in reverse order."""
    if not 1 <= min_len <= max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    rng = np.random.default_rng(seed)
    alphabet = copy_task_alphabet(alphabet_size)
    records = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        syms = [alphabet[i] for i in rng.integers(0, alphabet_size, size=length)]
        records.append({"context": " ".join(syms), "response": " ".join(reversed(syms))})
    return records


def write_jsonl(path: str | Path, records) -> None:
    atomic_write_text(path, dump_jsonl(records))
