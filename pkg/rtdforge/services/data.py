"""
Model inputs: dynamic pretraining segments, masking, sentence-pair packing,
batch streams and the downstream task TSV loader.
"""
import csv
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import pandas as pd

from rtdforge.exceptions import ConfigError, DataError, TaskDataError
from rtdforge.services.tokenizer import CLS, MASK, PAD, SEP, Vocab

logger = logging.getLogger('rtdforge')

SPECIAL_IDS = (CLS, SEP, PAD, MASK)

# Independent random streams drawn per optimizer step.
STREAM_DATA = 0
STREAM_MASKING = 1
STREAM_SAMPLING = 2
STREAM_DROPOUT = 3
STREAM_INIT = 4


def step_generator(seed: int, step: int, stream: int) -> np.random.Generator:
    """Generator for one (seed, step, stream) triple; batches are a pure function of it."""
    return np.random.default_rng(np.random.SeedSequence([seed, step, stream]))


class RowGenerators:
    """
    One generator per batch row. ``random(shape)`` draws row ``r``'s slice
    from generator ``r``, so a row's dropout masks are the same whether it
    runs in the full batch or in a micro-batch.
    """

    def __init__(self, generators: Sequence[np.random.Generator]):
        self.generators = list(generators)

    @classmethod
    def for_step(cls, seed: int, step: int, stream: int, rows: int) -> 'RowGenerators':
        children = np.random.SeedSequence([seed, step, stream]).spawn(rows)
        return cls([np.random.default_rng(child) for child in children])

    def __len__(self):
        return len(self.generators)

    def random(self, shape: tuple[int, ...]) -> np.ndarray:
        if not shape or shape[0] != len(self.generators):
            raise ValueError(f"Row generators cover {len(self.generators)} rows, asked for shape {tuple(shape)}")
        return np.stack([g.random(tuple(shape[1:])) for g in self.generators])

    def split(self, parts: int) -> list['RowGenerators']:
        """Contiguous groups matching ``MaskedBatch.split``."""
        return [RowGenerators([self.generators[i] for i in rows])
                for rows in np.array_split(np.arange(len(self.generators)), parts)]


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass
class TokenSequence:
    ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    max_seq_len: int

    @classmethod
    def from_tokens(cls, tokens: Sequence[int], segments: Sequence[int], max_seq_len: int) -> 'TokenSequence':
        if len(tokens) > max_seq_len:
            raise DataError(f"Sequence of {len(tokens)} tokens exceeds max_seq_len {max_seq_len}")
        pad = max_seq_len - len(tokens)
        ids = np.array(list(tokens) + [PAD] * pad, dtype=np.int64)
        segment_ids = np.array(list(segments) + [0] * pad, dtype=np.int64)
        attention_mask = np.array([1] * len(tokens) + [0] * pad, dtype=np.int64)
        return cls(ids, segment_ids, attention_mask, max_seq_len)

    @property
    def length(self) -> int:
        return int(self.attention_mask.sum())


@dataclass
class SequenceBatch:
    """[B, L] arrays; L is trimmed to the longest non-pad sequence in the batch."""
    ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray

    @classmethod
    def stack(cls, sequences: Sequence[TokenSequence]) -> 'SequenceBatch':
        if not sequences:
            raise DataError("Cannot build a batch from zero sequences")
        width = max(seq.length for seq in sequences)
        return cls(
            ids=np.stack([seq.ids[:width] for seq in sequences]),
            segment_ids=np.stack([seq.segment_ids[:width] for seq in sequences]),
            attention_mask=np.stack([seq.attention_mask[:width] for seq in sequences]),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def __len__(self):
        return self.ids.shape[0]

    def select(self, rows) -> 'SequenceBatch':
        return SequenceBatch(self.ids[rows], self.segment_ids[rows], self.attention_mask[rows])

    def with_ids(self, ids: np.ndarray) -> 'SequenceBatch':
        return SequenceBatch(ids, self.segment_ids, self.attention_mask)


@dataclass
class MaskedBatch:
    """
    A batch with MASK substituted at the selected positions.

    ``original_ids`` keeps the clean batch; ``mask_positions`` is a boolean
    [B, L] array of the selected positions.
    """
    inputs: SequenceBatch
    original_ids: np.ndarray
    mask_positions: np.ndarray

    @property
    def originals(self) -> np.ndarray:
        """Pre-mask token ids at the selected positions, in row-major order."""
        return self.original_ids[self.mask_positions]

    @property
    def attention_mask(self) -> np.ndarray:
        return self.inputs.attention_mask

    @property
    def clean(self) -> SequenceBatch:
        return self.inputs.with_ids(self.original_ids)

    def __len__(self):
        return len(self.inputs)

    def split(self, parts: int) -> list['MaskedBatch']:
        """Contiguous micro-batches for gradient accumulation."""
        if parts < 1 or parts > len(self):
            raise DataError(f"Cannot split a batch of {len(self)} into {parts} micro-batches")
        return [
            MaskedBatch(self.inputs.select(rows), self.original_ids[rows], self.mask_positions[rows])
            for rows in np.array_split(np.arange(len(self)), parts)
        ]


def dynamic_segment(doc: Sequence[int], max_seq_len: int, rng: np.random.Generator) -> TokenSequence | None:
    """
    Wrap a document, or a uniformly placed window of it, as [CLS] tokens [SEP].

    Returns None for an empty document so the caller can draw another one.
    """
    if max_seq_len < 3:
        raise DataError(f"max_seq_len must be at least 3, got {max_seq_len}")
    if len(doc) == 0:
        return None
    budget = max_seq_len - 2
    if len(doc) <= budget:
        window = list(doc)
    else:
        start = int(rng.integers(0, len(doc) - budget + 1))
        window = list(doc[start:start + budget])
    tokens = [CLS] + window + [SEP]
    return TokenSequence.from_tokens(tokens, [0] * len(tokens), max_seq_len)


def apply_masking(batch: SequenceBatch, mask_percent: float, rng: np.random.Generator) -> MaskedBatch:
    if not 0.0 < mask_percent <= 0.5:
        raise DataError(f"mask_percent must be in (0, 0.5], got {mask_percent}")
    eligible = (batch.attention_mask == 1) & ~np.isin(batch.ids, SPECIAL_IDS)
    mask_positions = np.zeros_like(eligible)
    for row in range(len(batch)):
        candidates = np.flatnonzero(eligible[row])
        if candidates.size == 0:
            raise DataError(f"unmaskable sequence at batch row {row}")
        count = max(1, round_half_up(mask_percent * candidates.size))
        chosen = rng.choice(candidates, size=count, replace=False)
        mask_positions[row, chosen] = True
    masked_ids = np.where(mask_positions, MASK, batch.ids)
    return MaskedBatch(batch.with_ids(masked_ids), batch.ids.copy(), mask_positions)


@dataclass(frozen=True)
class TaskDescriptor:
    """A downstream task: input arity, label space, metrics and epoch count."""
    name: str = field(metadata={'help': "Task name used in result records and reports"})
    sentences: str = field(default='single', metadata={'help': "'single' or 'pair'"})
    kind: str = field(default='classification', metadata={'help': "'classification' or 'regression'"})
    labels: tuple[str, ...] = field(default=('0', '1'), metadata={'help': "Class names in id order (classification)"})
    metrics: tuple[str, ...] = field(default=('accuracy',), metadata={'help': "Metric names reported for this task"})
    epochs: int = field(default=3, metadata={'help': "Fine-tuning epochs"})
    max_seq_len: int = field(default=128, metadata={'help': "Packed input length"})

    def __post_init__(self):
        if self.sentences not in ('single', 'pair'):
            raise ConfigError(f"Task {self.name}: sentences must be 'single' or 'pair', got {self.sentences!r}")
        if self.kind not in ('classification', 'regression'):
            raise ConfigError(f"Task {self.name}: kind must be 'classification' or 'regression', got {self.kind!r}")
        if self.kind == 'classification' and len(self.labels) < 2:
            raise ConfigError(f"Task {self.name}: classification needs at least 2 labels")
        if self.epochs < 1:
            raise ConfigError(f"Task {self.name}: epochs must be positive")
        if self.max_seq_len < 3:
            raise ConfigError(f"Task {self.name}: max_seq_len must be at least 3")

    @property
    def is_pair(self) -> bool:
        return self.sentences == 'pair'

    @property
    def is_regression(self) -> bool:
        return self.kind == 'regression'

    @property
    def num_outputs(self) -> int:
        return 1 if self.is_regression else len(self.labels)


@dataclass(frozen=True)
class TaskExample:
    sentence1: str
    sentence2: str | None
    label: int | float


def truncate_pair(first: list[int], second: list[int], budget: int) -> tuple[list[int], list[int]]:
    """Trim one token at a time from the end of the currently longer list; ties trim ``second``."""
    first, second = list(first), list(second)
    while len(first) + len(second) > budget:
        if len(first) > len(second):
            first.pop()
        else:
            second.pop()
    return first, second


def pack_downstream(example: TaskExample, vocab: Vocab, max_seq_len: int) -> TokenSequence:
    first = vocab.encode(example.sentence1)
    if example.sentence2 is None:
        if not first:
            raise TaskDataError("Cannot pack an example whose sentence is empty")
        first = first[:max_seq_len - 2]
        tokens = [CLS] + first + [SEP]
        return TokenSequence.from_tokens(tokens, [0] * len(tokens), max_seq_len)

    second = vocab.encode(example.sentence2)
    if not first and not second:
        raise TaskDataError("Cannot pack an example whose sentences are both empty")
    first, second = truncate_pair(first, second, max_seq_len - 3)
    tokens = [CLS] + first + [SEP] + second + [SEP]
    segments = [0] * (len(first) + 2) + [1] * (len(second) + 1)
    return TokenSequence.from_tokens(tokens, segments, max_seq_len)


def batch_iterator(
    source: Sequence,
    batch_size: int,
    rng: np.random.Generator,
    mode: str = 'epoch',
    epochs: int = 1,
) -> Iterator[list]:
    """
    ``step`` mode samples items with replacement forever; ``epoch`` mode
    shuffles once per epoch and yields every item exactly once, final partial
    batch included.
    """
    if len(source) == 0:
        raise DataError("batch_iterator needs a nonempty source")
    if batch_size < 1:
        raise DataError(f"batch_size must be positive, got {batch_size}")
    if mode == 'step':
        while True:
            yield [source[i] for i in rng.integers(0, len(source), size=batch_size)]
    elif mode == 'epoch':
        for _ in range(epochs):
            order = rng.permutation(len(source))
            for start in range(0, len(order), batch_size):
                yield [source[i] for i in order[start:start + batch_size]]
    else:
        raise ValueError(f"Unknown batch mode {mode!r}; use 'step' or 'epoch'")


def draw_pretraining_batch(
    documents: Sequence[Sequence[int]],
    batch_size: int,
    max_seq_len: int,
    rng: np.random.Generator,
) -> SequenceBatch:
    """Sample documents with replacement and cut one dynamic segment from each."""
    if not any(len(doc) for doc in documents):
        raise DataError("Corpus has no nonempty documents")
    sequences = []
    draws = batch_iterator(documents, 1, rng, mode='step')
    while len(sequences) < batch_size:
        segment = dynamic_segment(next(draws)[0], max_seq_len, rng)
        if segment is not None:
            sequences.append(segment)
    return SequenceBatch.stack(sequences)


class Prefetcher:
    """
    Prepares ``produce(step)`` for upcoming steps on a worker thread.

    Each produced batch is handed over through a bounded queue and never
    touched again by the worker.
    """

    _DONE = object()

    def __init__(self, produce: Callable[[int], object], steps: Iterator[int] | range, depth: int = 2):
        self._produce = produce
        self._steps = steps
        self._queue: queue.Queue = queue.Queue(maxsize=max(1, depth))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._work, name='rtdforge-prefetch', daemon=True)
        self._thread.start()

    def _work(self):
        try:
            for step in self._steps:
                if self._stop.is_set():
                    return
                self._put((step, self._produce(step), None))
        except Exception as e:
            self._put((None, None, e))
            return
        self._put((None, self._DONE, None))

    def _put(self, item):
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self):
        while True:
            step, payload, error = self._queue.get()
            if error is not None:
                raise error
            if payload is self._DONE:
                return
            yield step, payload

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_task_split(path: str | Path, descriptor: TaskDescriptor) -> list[TaskExample]:
    """
    Read a task TSV (header ``sentence1[\\tsentence2]\\tlabel``) into examples.

    Classification labels must be one of the descriptor's class names;
    regression labels must parse as decimals.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False, quoting=csv.QUOTE_NONE)
    except FileNotFoundError as e:
        raise TaskDataError(f"Task file not found: {path}") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise TaskDataError(f"Cannot parse task file {path}: {e}") from e

    required = ['sentence1', 'sentence2', 'label'] if descriptor.is_pair else ['sentence1', 'label']
    missing = [col for col in required if col not in df.columns]
    if missing:
        raise TaskDataError(f"{path}: missing columns {missing}")
    if df.empty:
        raise TaskDataError(f"{path}: no examples")

    if descriptor.is_regression:
        labels = pd.to_numeric(df['label'], errors='coerce')
        bad = labels.isna()
        if bad.any():
            row = int(bad.idxmax()) + 2
            raise TaskDataError(f"{path}: line {row}: label {df['label'][bad].iloc[0]!r} is not a number")
        labels = labels.astype(float).tolist()
    else:
        index = {name: i for i, name in enumerate(descriptor.labels)}
        unseen = ~df['label'].isin(list(index))
        if unseen.any():
            row = int(unseen.idxmax()) + 2
            raise TaskDataError(
                f"{path}: line {row}: label {df['label'][unseen].iloc[0]!r} not in task labels {list(descriptor.labels)}"
            )
        labels = df['label'].map(index).astype(int).tolist()

    second = df['sentence2'].tolist() if descriptor.is_pair else [None] * len(df)
    examples = [
        TaskExample(sentence1=s1, sentence2=s2, label=label)
        for s1, s2, label in zip(df['sentence1'].tolist(), second, labels)
    ]
    logger.info(f"Loaded {len(examples)} examples for task {descriptor.name} from {path}")
    return examples


def read_corpus(path: str | Path) -> list[str]:
    """Documents are separated by one or more blank lines."""
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"Cannot read corpus {path}: {e}") from e
    documents, current = [], []
    for line in text.splitlines():
        if line.strip():
            current.append(line)
        elif current:
            documents.append('\n'.join(current))
            current = []
    if current:
        documents.append('\n'.join(current))
    logger.info(f"Read {len(documents)} documents from {path}")
    return documents
