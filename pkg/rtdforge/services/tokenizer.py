"""
Byte-level byte-pair-encoding tokenizer.

Ids 0-3 are the special tokens, ids 4-259 the 256 raw bytes, and every id
after that is a learned merge, in acquisition order.
"""
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from rtdforge.exceptions import VocabError
from rtdforge.services.tensor import TokenIndexError

logger = logging.getLogger('rtdforge')

CLS, SEP, PAD, MASK = 0, 1, 2, 3
SPECIAL_TOKENS = ('[CLS]', '[SEP]', '[PAD]', '[MASK]')
BYTE_OFFSET = len(SPECIAL_TOKENS)
BASE_VOCAB_SIZE = BYTE_OFFSET + 256
FORMAT_HEADER = 'bbpe-vocab v1'
WHITESPACE = frozenset(b' \t\n\r\x0b\x0c')


def split_chunks(data: bytes) -> list[bytes]:
    """Split into maximal runs of whitespace and non-whitespace bytes."""
    chunks = []
    start = 0
    for i in range(1, len(data) + 1):
        if i == len(data) or (data[i] in WHITESPACE) != (data[start] in WHITESPACE):
            chunks.append(data[start:i])
            start = i
    return chunks


@dataclass(eq=False)
class Vocab:
    """
    Learned merge rules plus the derived token table.

    Immutable after construction; ``encode``/``decode`` only read it (the
    per-chunk cache is a pure memo of the merge result).
    """
    merges: tuple[tuple[bytes, bytes], ...]
    target_size: int
    specials: tuple[str, ...] = SPECIAL_TOKENS
    tokens: list[bytes] = field(init=False, repr=False)
    token_to_id: dict[bytes, int] = field(init=False, repr=False)
    _ranks: dict[tuple[bytes, bytes], int] = field(init=False, repr=False)
    _cache: dict[bytes, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self.merges = tuple(self.merges)
        self.tokens = [bytes([b]) for b in range(256)]
        self.token_to_id = {token: BYTE_OFFSET + i for i, token in enumerate(self.tokens)}
        self._ranks = {}
        for rank, (left, right) in enumerate(self.merges):
            if left not in self.token_to_id or right not in self.token_to_id:
                raise VocabError(f"Merge {rank} uses unknown token(s) {left!r} {right!r}")
            self._ranks.setdefault((left, right), rank)
            merged = left + right
            if merged not in self.token_to_id:
                self.token_to_id[merged] = BYTE_OFFSET + len(self.tokens)
                self.tokens.append(merged)
        self._cache = {}

    def __eq__(self, other):
        if not isinstance(other, Vocab):
            return NotImplemented
        return (self.merges, self.target_size, self.specials) == (other.merges, other.target_size, other.specials)

    def __len__(self):
        return BYTE_OFFSET + len(self.tokens)

    @property
    def special_ids(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.specials)}

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for chunk in split_chunks(text.encode('utf-8')):
            ids.extend(self._encode_chunk(chunk))
        return ids

    def _encode_chunk(self, chunk: bytes) -> tuple[int, ...]:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        parts = [bytes([b]) for b in chunk]
        while len(parts) > 1:
            ranked = [(self._ranks.get(pair, -1), i) for i, pair in enumerate(zip(parts, parts[1:]))]
            ranked = [(rank, i) for rank, i in ranked if rank >= 0]
            if not ranked:
                break
            best = min(ranked)[0]
            pair = self.merges[best]
            parts = _apply_merge(parts, pair)
        ids = tuple(self.token_to_id[p] for p in parts)
        self._cache[chunk] = ids
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        pieces: list[bytes] = []
        size = len(self)
        for token_id in ids:
            token_id = int(token_id)
            if token_id < 0 or token_id >= size:
                raise TokenIndexError(f"Token id {token_id} out of range for vocab of size {size}")
            if token_id < BYTE_OFFSET:
                pieces.append(self.specials[token_id].encode('utf-8'))
            else:
                pieces.append(self.tokens[token_id - BYTE_OFFSET])
        return b''.join(pieces).decode('utf-8', errors='replace')


def _apply_merge(parts: list[bytes], pair: tuple[bytes, bytes]) -> list[bytes]:
    merged = []
    i = 0
    while i < len(parts):
        if i + 1 < len(parts) and parts[i] == pair[0] and parts[i + 1] == pair[1]:
            merged.append(pair[0] + pair[1])
            i += 2
        else:
            merged.append(parts[i])
            i += 1
    return merged


def _count_pairs(word: list[bytes]) -> Counter:
    return Counter(zip(word, word[1:]))


def train_vocab(documents: Iterable[str], target_size: int) -> Vocab:
    """
    Greedy BPE: merge the most frequent adjacent pair until ``target_size``
    tokens exist or no pair occurs at least twice.

    Ties go to the lexicographically smallest (left, right) byte pair, so the
    result is fully determined by the corpus.
    """
    if target_size < BASE_VOCAB_SIZE:
        raise VocabError(f"target_size must be at least {BASE_VOCAB_SIZE} (256 bytes + 4 specials), got {target_size}")

    chunk_counts: Counter = Counter()
    doc_count = 0
    for doc in documents:
        doc_count += 1
        chunk_counts.update(split_chunks(doc.encode('utf-8')))
    if not chunk_counts:
        raise VocabError("Cannot train a vocabulary on an empty corpus")

    words = [[bytes([b]) for b in chunk] for chunk in chunk_counts]
    freqs = list(chunk_counts.values())
    pair_counts: Counter = Counter()
    pair_index: dict[tuple[bytes, bytes], set[int]] = defaultdict(set)
    for idx, word in enumerate(words):
        for pair, n in _count_pairs(word).items():
            pair_counts[pair] += n * freqs[idx]
            pair_index[pair].add(idx)

    known = {bytes([b]) for b in range(256)}
    merges: list[tuple[bytes, bytes]] = []
    size = BASE_VOCAB_SIZE
    while size < target_size and pair_counts:
        pair, count = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if count < 2:
            break
        merges.append(pair)
        merged = pair[0] + pair[1]
        if merged not in known:
            known.add(merged)
            size += 1
        for idx in sorted(pair_index.pop(pair, ())):
            word = words[idx]
            before = _count_pairs(word)
            after_word = _apply_merge(word, pair)
            after = _count_pairs(after_word)
            words[idx] = after_word
            for p, n in before.items():
                pair_counts[p] -= n * freqs[idx]
                if pair_counts[p] <= 0:
                    del pair_counts[p]
                if p not in after and p != pair:
                    pair_index[p].discard(idx)
            for p, n in after.items():
                pair_counts[p] += n * freqs[idx]
                pair_index[p].add(idx)

    logger.info(f"Trained BBPE vocab on {doc_count} documents: {len(merges)} merges, {size} tokens")
    return Vocab(merges=tuple(merges), target_size=target_size)


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    lines = [f"{FORMAT_HEADER} {vocab.target_size}", f"merges {len(vocab.merges)}"]
    lines.extend(f"{left.hex()} {right.hex()}" for left, right in vocab.merges)
    lines.append(f"specials {len(vocab.specials)}")
    lines.extend(f"{name} {i}" for i, name in enumerate(vocab.specials))
    lines.append('end')
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')


def load_vocab(path: str | Path) -> Vocab:
    try:
        lines = Path(path).read_text(encoding='utf-8').splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise VocabError(f"Cannot read vocab file {path}: {e}") from e

    def fail(lineno: int, message: str):
        raise VocabError(f"{path}: line {lineno}: {message}")

    def line_at(i: int) -> str:
        if i >= len(lines):
            fail(i + 1, "unexpected end of file")
        return lines[i]

    header = line_at(0).split(' ')
    if ' '.join(header[:2]) != FORMAT_HEADER or len(header) != 3:
        fail(1, f"expected header '{FORMAT_HEADER} <target_size>'")
    try:
        target_size = int(header[2])
    except ValueError:
        fail(1, f"bad target size {header[2]!r}")

    kind, _, count = line_at(1).partition(' ')
    if kind != 'merges' or not count.isdigit():
        fail(2, "expected 'merges <count>'")
    merges = []
    cursor = 2
    for _ in range(int(count)):
        fields = line_at(cursor).split(' ')
        if len(fields) != 2:
            fail(cursor + 1, "merge rule needs two hex byte strings")
        try:
            merges.append((bytes.fromhex(fields[0]), bytes.fromhex(fields[1])))
        except ValueError:
            fail(cursor + 1, "merge rule is not valid hex")
        cursor += 1

    kind, _, count = line_at(cursor).partition(' ')
    if kind != 'specials' or not count.isdigit():
        fail(cursor + 1, "expected 'specials <count>'")
    cursor += 1
    specials = []
    for expected_id in range(int(count)):
        name, _, token_id = line_at(cursor).rpartition(' ')
        if token_id != str(expected_id) or not name:
            fail(cursor + 1, f"expected special token with id {expected_id}")
        specials.append(name)
        cursor += 1
    if tuple(specials) != SPECIAL_TOKENS:
        fail(cursor, f"special tokens {specials} do not match {list(SPECIAL_TOKENS)}")
    if line_at(cursor) != 'end':
        fail(cursor + 1, "expected 'end'")

    try:
        return Vocab(merges=tuple(merges), target_size=target_size)
    except VocabError as e:
        raise VocabError(f"{path}: {e}") from e
