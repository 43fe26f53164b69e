"""Byte-level byte-pair-encoding tokenizer.

Token ids are laid out densely: ids 0..255 are the single bytes, followed by
the special tokens, followed by merge outputs in the order they were learned.
There is no pre-tokenizer; merges are learned and applied directly on the raw
byte stream of each document, so encode/decode is lossless for any UTF-8 text.
"""

from __future__ import annotations

import base64
import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataFormatError
from .util import get_logger, kv

log = get_logger(__name__)

N_BYTES = 256
SPECIAL_NAMES = ("mask", "pad", "bos", "eos", "unk")
SPECIAL_MARKERS = {
    "mask": b"<mask>",
    "pad": b"<pad>",
    "bos": b"<bos>",
    "eos": b"<eos>",
    "unk": b"<unk>",
}

TokenSeq = list[int]


@dataclass
class Vocab:
    """A trained BPE vocabulary: byte table, ordered merges, special ids."""

    tokens: list[bytes]
    merges: list[tuple[int, int]]
    special: dict[str, int]
    _rank: dict[tuple[int, int], int] = field(default=None, repr=False, compare=False)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def mask_id(self) -> int:
        return self.special["mask"]

    @property
    def pad_id(self) -> int:
        return self.special["pad"]

    @property
    def bos_id(self) -> int:
        return self.special["bos"]

    @property
    def eos_id(self) -> int:
        return self.special["eos"]

    @property
    def unk_id(self) -> int:
        return self.special["unk"]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.special.values())

    def merge_rank(self) -> dict[tuple[int, int], int]:
        if self._rank is None:
            self._rank = {pair: i for i, pair in enumerate(self.merges)}
        return self._rank

    def token_text(self, token_id: int) -> str:
        """Human-readable form of one token (special markers render literally)."""
        return self.tokens[token_id].decode("utf-8", errors="replace")

    def validate(self) -> None:
        if len(self.tokens) < N_BYTES + len(SPECIAL_NAMES):
            raise DataFormatError(f"vocab too small: {len(self.tokens)} tokens")
        for b in range(N_BYTES):
            if self.tokens[b] != bytes([b]):
                raise DataFormatError(f"byte token {b} missing or misplaced")
        ids = sorted(self.special.values())
        if len(set(ids)) != len(SPECIAL_NAMES) or set(self.special) != set(SPECIAL_NAMES):
            raise DataFormatError("special ids must be mutually distinct and complete")
        for sid in ids:
            if not 0 <= sid < len(self.tokens):
                raise DataFormatError(f"special id {sid} out of range")
        first_merged = N_BYTES + len(SPECIAL_NAMES)
        for i, (a, b) in enumerate(self.merges):
            out = first_merged + i
            if out >= len(self.tokens):
                raise DataFormatError(f"merge {i} output id {out} missing from table")
            if a >= out or b >= out:
                raise DataFormatError(f"merge {i} refers to a later token ({a},{b})")
            if a in self.special_ids or b in self.special_ids:
                raise DataFormatError(f"merge {i} involves a special token")
            if self.tokens[out] != self.tokens[a] + self.tokens[b]:
                raise DataFormatError(f"merge {i} output bytes inconsistent")


def _empty_vocab() -> Vocab:
    tokens = [bytes([b]) for b in range(N_BYTES)]
    special = {}
    for name in SPECIAL_NAMES:
        special[name] = len(tokens)
        tokens.append(SPECIAL_MARKERS[name])
    return Vocab(tokens=tokens, merges=[], special=special)


def _doc_texts(docs) -> list[str]:
    if hasattr(docs, "documents"):
        return [d.text() for d in docs.documents]
    return [str(t) for t in docs]


def train_bpe(docs, vocab_size: int, min_pair_count: int = 2) -> Vocab:
    """Learn BPE merges by greedy highest-frequency pair merging.

    Merging stops when `vocab_size` tokens exist or no adjacent pair occurs at
    least `min_pair_count` times. Frequency ties break by the lexicographic
    byte order of the merged pair (then of the left token), so retraining on
    identical input is byte-identical. Pairs never span document boundaries.
    """
    texts = _doc_texts(docs)
    vocab = _empty_vocab()
    n_base = vocab.size
    if vocab_size <= n_base:
        raise ValueError(
            f"vocab_size must exceed {n_base} (256 bytes + {len(SPECIAL_NAMES)} specials), got {vocab_size}"
        )

    # Flat corpus as a doubly linked list; links never cross document bounds.
    ids: list[int] = []
    nxt: list[int] = []
    prv: list[int] = []
    for text in texts:
        data = text.encode("utf-8")
        if not data:
            continue
        start = len(ids)
        ids.extend(data)
        end = len(ids)
        for i in range(start, end):
            prv.append(i - 1 if i > start else -1)
            nxt.append(i + 1 if i < end - 1 else -1)
    if not ids:
        raise DataFormatError("cannot train BPE on an empty corpus")

    tokens = vocab.tokens
    counts: dict[tuple[int, int], int] = {}
    occ: dict[tuple[int, int], list[int]] = {}
    for i in range(len(ids)):
        j = nxt[i]
        if j != -1:
            pair = (ids[i], ids[j])
            counts[pair] = counts.get(pair, 0) + 1
            occ.setdefault(pair, []).append(i)

    # Lazy max-heap keyed by (-count, merged bytes, left bytes); stale entries
    # are skipped when their recorded count no longer matches.
    heap: list[tuple[int, bytes, bytes, tuple[int, int]]] = []

    def push(pair: tuple[int, int]) -> None:
        c = counts.get(pair, 0)
        if c >= min_pair_count:
            a, b = pair
            heapq.heappush(heap, (-c, tokens[a] + tokens[b], tokens[a], pair))

    def bump(pair: tuple[int, int], delta: int, left_pos: int | None = None) -> None:
        c = counts.get(pair, 0) + delta
        if c <= 0:
            counts.pop(pair, None)
        else:
            counts[pair] = c
        if delta > 0 and left_pos is not None:
            occ.setdefault(pair, []).append(left_pos)
        push(pair)

    for pair in counts:
        push(pair)

    while len(tokens) < vocab_size and heap:
        negc, _, _, pair = heapq.heappop(heap)
        if counts.get(pair, 0) != -negc:
            continue
        a, b = pair
        new_id = len(tokens)
        tokens.append(tokens[a] + tokens[b])
        vocab.merges.append(pair)

        # Occurrence lists may hold stale or duplicate positions; validation
        # against the live linked list filters them. Ascending order gives the
        # same greedy left-to-right semantics as encode() ("aaa" -> [aa, a]).
        positions = sorted(set(occ.pop(pair, ())))
        for i in positions:
            if ids[i] != a:
                continue
            j = nxt[i]
            if j == -1 or ids[j] != b:
                continue
            p, n = prv[i], nxt[j]
            if p != -1:
                bump((ids[p], a), -1)
            if n != -1:
                bump((b, ids[n]), -1)
            ids[i] = new_id
            ids[j] = -1
            nxt[i] = n
            if n != -1:
                prv[n] = i
            if p != -1:
                bump((ids[p], new_id), +1, p)
            if n != -1:
                bump((new_id, ids[n]), +1, i)
        counts.pop(pair, None)

    log.info(kv(event="bpe_trained", vocab_size=len(tokens), merges=len(vocab.merges)))
    return vocab


def encode(vocab: Vocab, text: str) -> TokenSeq:
    """Tokenize text by applying the learned merges in order to its byte stream.

    Special ids are never produced from raw text; the 256 byte tokens guarantee
    coverage of any UTF-8 input.
    """
    seq: list[int] = list(text.encode("utf-8"))
    if len(seq) < 2:
        return seq
    rank = vocab.merge_rank()
    while True:
        best_rank = None
        best_pair = None
        prev_tok = seq[0]
        for tok in seq[1:]:
            r = rank.get((prev_tok, tok))
            if r is not None and (best_rank is None or r < best_rank):
                best_rank = r
                best_pair = (prev_tok, tok)
            prev_tok = tok
        if best_pair is None:
            return seq
        a, b = best_pair
        new_id = N_BYTES + len(SPECIAL_NAMES) + best_rank
        merged: list[int] = []
        i = 0
        n = len(seq)
        while i < n:
            if i + 1 < n and seq[i] == a and seq[i + 1] == b:
                merged.append(new_id)
                i += 2
            else:
                merged.append(seq[i])
                i += 1
        seq = merged
        if len(seq) < 2:
            return seq


def decode(vocab: Vocab, seq: TokenSeq) -> str:
    """Concatenate token byte-strings; special tokens render as their markers."""
    chunks = []
    for tid in seq:
        if not 0 <= tid < vocab.size:
            raise DataFormatError(f"token id {tid} out of range for vocab of size {vocab.size}")
        chunks.append(vocab.tokens[tid])
    return b"".join(chunks).decode("utf-8", errors="replace")


def _token_to_json(b: bytes):
    try:
        s = b.decode("utf-8")
    except UnicodeDecodeError:
        return {"b64": base64.b64encode(b).decode("ascii")}
    if s.encode("utf-8") == b and all(ch.isprintable() or ch == " " for ch in s):
        return s
    return {"b64": base64.b64encode(b).decode("ascii")}


def _token_from_json(entry) -> bytes:
    if isinstance(entry, str):
        return entry.encode("utf-8")
    if isinstance(entry, dict) and "b64" in entry:
        return base64.b64decode(entry["b64"])
    raise DataFormatError(f"unrecognized token entry {entry!r}")


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    doc = {
        "tokens": [_token_to_json(t) for t in vocab.tokens],
        "merges": [list(pair) for pair in vocab.merges],
        "special": dict(vocab.special),
    }
    Path(path).write_text(json.dumps(doc, ensure_ascii=False), encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"vocab file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    try:
        vocab = Vocab(
            tokens=[_token_from_json(t) for t in doc["tokens"]],
            merges=[(int(a), int(b)) for a, b in doc["merges"]],
            special={str(k): int(v) for k, v in doc["special"].items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed vocab file {path}: {exc}") from exc
    vocab.validate()
    return vocab
