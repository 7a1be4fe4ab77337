"""Byte-level BPE tokenizer: training, encode/decode, JSON serialization.

Tokens are byte strings. The base alphabet is all 256 bytes plus four
reserved special tokens at ids 0..3, so any UTF-8 text round-trips exactly.
Training merges the highest-frequency adjacent pair until the target
vocabulary size is reached; ties break lexicographically on the pair's byte
strings, which makes training order-independent of dict/hash state.
"""

from __future__ import annotations

import heapq
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)

TOKENIZER_FORMAT_VERSION = 1
NUM_BYTE_TOKENS = 256

# Pieces are maximal runs of whitespace or non-whitespace; merges never
# cross piece boundaries.
_PIECE_RE = re.compile(r"\s+|\S+")


@dataclass(frozen=True)
class SpecialTokens:
    bos: int = 0
    eos: int = 1
    pad: int = 2
    sep: int = 3

    @property
    def names(self) -> dict[int, str]:
        return {self.bos: "<bos>", self.eos: "<eos>", self.pad: "<pad>", self.sep: "<sep>"}


class BpeTokenizer:
    """A trained byte-level BPE model."""

    def __init__(self, merges: list[tuple[int, int]], specials: SpecialTokens | None = None):
        self.specials = specials or SpecialTokens()
        self.merges = list(merges)
        # id -> byte string; specials carry empty payloads and never decode to text.
        self.token_bytes: list[bytes] = [b""] * 4 + [bytes([i]) for i in range(NUM_BYTE_TOKENS)]
        for left, right in self.merges:
            self.token_bytes.append(self.token_bytes[left] + self.token_bytes[right])
        self.ranks: dict[tuple[int, int], int] = {pair: i for i, pair in enumerate(self.merges)}
        self.merged_id: dict[tuple[int, int], int] = {
            pair: 4 + NUM_BYTE_TOKENS + i for i, pair in enumerate(self.merges)
        }
        self._piece_cache: dict[str, list[int]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.token_bytes)

    def vocab(self) -> dict[bytes, int]:
        return {b: i for i, b in enumerate(self.token_bytes)}

    # -- encoding ----------------------------------------------------------
    def _encode_piece(self, piece: str) -> list[int]:
        cached = self._piece_cache.get(piece)
        if cached is not None:
            return cached
        symbols = [4 + b for b in piece.encode("utf-8")]
        while len(symbols) > 1:
            best_rank = None
            best_pair = None
            for pair in zip(symbols, symbols[1:]):
                rank = self.ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_pair = pair
            if best_pair is None:
                break
            merged = self.merged_id[best_pair]
            new_symbols = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best_pair:
                    new_symbols.append(merged)
                    i += 2
                else:
                    new_symbols.append(symbols[i])
                    i += 1
            symbols = new_symbols
        if len(self._piece_cache) < 200_000:
            self._piece_cache[piece] = symbols
        return symbols

    def encode(self, text: str, add_special: bool = False) -> list[int]:
        ids: list[int] = []
        for piece in _PIECE_RE.findall(text):
            ids.extend(self._encode_piece(piece))
        if add_special:
            return [self.specials.bos] + ids + [self.specials.eos]
        return ids

    def encode_words(self, words: list[str]) -> tuple[list[int], list[tuple[int, int]]]:
        """Encode whitespace-joined ``words`` with per-word token offsets.

        Returns (ids, offsets) where ids start with bos and offsets[i] is the
        half-open token range of word i; the separating space belongs to the
        word it precedes, so the ranges tile ids[1:] exactly.
        """
        ids: list[int] = [self.specials.bos]
        offsets: list[tuple[int, int]] = []
        for i, word in enumerate(words):
            if not word or word.split() != [word]:
                raise ValueError(f"word {i} is empty or contains whitespace: {word!r}")
            chunk = word if i == 0 else " " + word
            toks = self.encode(chunk)
            offsets.append((len(ids), len(ids) + len(toks)))
            ids.extend(toks)
        return ids, offsets

    # -- decoding ----------------------------------------------------------
    def decode(self, ids: list[int]) -> str:
        """Inverse of encode for no-specials sequences; special ids are skipped.

        Byte sequences that are not valid UTF-8 decode to U+FFFD replacement
        characters.
        """
        payload = bytearray()
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise ValueError(f"token id {i} out of range [0, {self.vocab_size})")
            payload.extend(self.token_bytes[i])
        return payload.decode("utf-8", errors="replace")

    # -- persistence ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format_version": TOKENIZER_FORMAT_VERSION,
            "kind": "byte_bpe",
            "specials": {"bos": self.specials.bos, "eos": self.specials.eos,
                         "pad": self.specials.pad, "sep": self.specials.sep},
            "merges": [[l, r] for l, r in self.merges],
            "vocab_size": self.vocab_size,
        }

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        payload = self.to_dict()
        if extra_meta:
            payload["meta"] = extra_meta
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, payload: dict) -> "BpeTokenizer":
        if payload.get("format_version") != TOKENIZER_FORMAT_VERSION:
            raise ValueError("unsupported tokenizer format version")
        sp = payload["specials"]
        return cls(merges=[(l, r) for l, r in payload["merges"]],
                   specials=SpecialTokens(bos=sp["bos"], eos=sp["eos"],
                                          pad=sp["pad"], sep=sp["sep"]))

    @classmethod
    def load(cls, path: str | Path) -> "BpeTokenizer":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _piece_counts(texts) -> dict[str, int]:
    counts: dict[str, int] = {}
    for text in texts:
        for piece in _PIECE_RE.findall(text):
            counts[piece] = counts.get(piece, 0) + 1
    return counts


def train_bpe(corpus, vocab_size: int) -> BpeTokenizer:
    """Train byte-level BPE until the vocabulary holds ``vocab_size`` tokens.

    ``corpus`` is an iterable of strings or objects with a ``text`` attribute.
    Merging is greedy on pair frequency with lexicographic tie-breaking, so
    repeated runs over the same corpus produce identical merge lists. Stops
    early (with a warning) if every piece collapses to a single token first.
    """
    base = 4 + NUM_BYTE_TOKENS
    if vocab_size <= base:
        raise ValueError(f"vocab_size must exceed {base} (bytes + special tokens)")

    texts = (getattr(doc, "text", doc) for doc in corpus)
    counts = _piece_counts(texts)
    if not counts:
        raise ValueError("empty corpus")

    token_bytes: list[bytes] = [b""] * 4 + [bytes([i]) for i in range(NUM_BYTE_TOKENS)]
    # Deterministic piece order so occurrence sets iterate identically everywhere.
    pieces = [[4 + b for b in piece.encode("utf-8")] for piece in sorted(counts)]
    freqs = [counts[piece] for piece in sorted(counts)]

    pair_counts: dict[tuple[int, int], int] = {}
    pair_sites: dict[tuple[int, int], set[int]] = {}
    for idx, symbols in enumerate(pieces):
        f = freqs[idx]
        for pair in zip(symbols, symbols[1:]):
            pair_counts[pair] = pair_counts.get(pair, 0) + f
            pair_sites.setdefault(pair, set()).add(idx)

    # Max-heap keyed by (count desc, pair bytes asc); entries are lazily
    # invalidated when their recorded count goes stale.
    heap: list[tuple[int, bytes, bytes, tuple[int, int]]] = [
        (-count, token_bytes[p[0]], token_bytes[p[1]], p) for p, count in pair_counts.items()
    ]
    heapq.heapify(heap)

    def push(pair):
        heapq.heappush(heap, (-pair_counts[pair], token_bytes[pair[0]],
                              token_bytes[pair[1]], pair))

    merges: list[tuple[int, int]] = []
    while len(token_bytes) < vocab_size:
        best = None
        while heap:
            neg, _, _, pair = heapq.heappop(heap)
            if pair_counts.get(pair, 0) == -neg and -neg > 0:
                best = pair
                break
        if best is None:
            log.warning("pair supply exhausted at vocab size %d (target %d)",
                        len(token_bytes), vocab_size)
            break

        new_id = len(token_bytes)
        token_bytes.append(token_bytes[best[0]] + token_bytes[best[1]])
        merges.append(best)

        touched: set[tuple[int, int]] = set()
        for idx in sorted(pair_sites.pop(best, ())):
            symbols = pieces[idx]
            f = freqs[idx]
            for pair in zip(symbols, symbols[1:]):
                pair_counts[pair] -= f
                touched.add(pair)
            new_symbols = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    new_symbols.append(new_id)
                    i += 2
                else:
                    new_symbols.append(symbols[i])
                    i += 1
            pieces[idx] = new_symbols
            for pair in zip(new_symbols, new_symbols[1:]):
                pair_counts[pair] = pair_counts.get(pair, 0) + f
                pair_sites.setdefault(pair, set()).add(idx)
                touched.add(pair)
        for pair in touched:
            if pair_counts.get(pair, 0) > 0:
                push(pair)
            else:
                pair_counts.pop(pair, None)
                pair_sites.pop(pair, None)

    return BpeTokenizer(merges=merges)
