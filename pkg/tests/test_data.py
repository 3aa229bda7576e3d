import numpy as np
import pytest
from scipy import stats

from rtdforge.exceptions import ConfigError, DataError, TaskDataError
from rtdforge.services.data import (
    CLS,
    MASK,
    PAD,
    SEP,
    Prefetcher,
    RowGenerators,
    SequenceBatch,
    TaskDescriptor,
    TaskExample,
    TokenSequence,
    apply_masking,
    batch_iterator,
    draw_pretraining_batch,
    dynamic_segment,
    load_task_split,
    pack_downstream,
    read_corpus,
    step_generator,
    truncate_pair,
)
from rtdforge.services.tokenizer import BYTE_OFFSET, Vocab
from tests.conftest import write_task_split


@pytest.fixture
def byte_vocab():
    return Vocab(merges=(), target_size=260)


def full_batch(rows: int, length: int) -> SequenceBatch:
    """Rows of [CLS] + ``length`` content tokens + [SEP]."""
    sequences = [
        TokenSequence.from_tokens([CLS] + list(range(10, 10 + length)) + [SEP], [0] * (length + 2), length + 2)
        for _ in range(rows)
    ]
    return SequenceBatch.stack(sequences)


class TestDynamicSegment:
    """Pretraining segments cut from documents."""

    def test_short_document_is_used_whole(self):
        """Test that a 10-token document becomes [CLS] doc [SEP] plus padding."""
        doc = list(range(20, 30))

        seq = dynamic_segment(doc, 128, np.random.default_rng(0))

        assert seq.ids[0] == CLS
        assert seq.ids[11] == SEP
        assert list(seq.ids[1:11]) == doc
        assert (seq.ids[12:] == PAD).all()
        assert seq.attention_mask.sum() == 12
        assert (seq.segment_ids == 0).all()

    def test_exact_budget_starts_at_zero(self):
        """Test that a document of exactly max_seq_len - 2 tokens is taken from index 0."""
        doc = list(range(100, 126))

        seq = dynamic_segment(doc, 28, np.random.default_rng(3))

        assert list(seq.ids[1:27]) == doc

    def test_empty_document_signals_skip(self):
        """Test that an empty document returns None."""
        assert dynamic_segment([], 16, np.random.default_rng(0)) is None

    def test_max_seq_len_too_small(self):
        """Test that max_seq_len below 3 is rejected."""
        with pytest.raises(DataError):
            dynamic_segment([5], 2, np.random.default_rng(0))

    def test_window_start_is_uniform(self):
        """Test that window starts over a long document pass a chi-squared uniformity test."""
        doc = list(range(1000, 1040))
        rng = np.random.default_rng(11)
        starts = [int(dynamic_segment(doc, 12, rng).ids[1]) - 1000 for _ in range(6000)]

        counts = np.bincount(starts, minlength=31)

        assert len(counts) == 31
        assert stats.chisquare(counts).pvalue > 0.001


class TestMasking:
    """MASK substitution on eligible positions."""

    def test_fifteen_percent_of_128(self):
        """Test that 128 eligible tokens at 15% give 19 masked positions."""
        masked = apply_masking(full_batch(2, 128), 0.15, np.random.default_rng(0))

        assert masked.mask_positions.sum(axis=1).tolist() == [19, 19]

    def test_minimum_one_position(self):
        """Test that a single eligible token is always masked."""
        masked = apply_masking(full_batch(1, 1), 0.15, np.random.default_rng(0))

        assert masked.mask_positions.sum() == 1
        assert masked.inputs.ids[0, 1] == MASK

    def test_specials_and_padding_never_selected(self):
        """Test that CLS, SEP and PAD positions are never masked."""
        sequences = [
            TokenSequence.from_tokens([CLS, 40, 41, 42, SEP], [0] * 5, 8),
            TokenSequence.from_tokens([CLS, 50, 51, 52, 53, 54, SEP], [0] * 7, 8),
        ]
        batch = SequenceBatch.stack(sequences)

        for seed in range(20):
            masked = apply_masking(batch, 0.5, np.random.default_rng(seed))
            selected = batch.ids[masked.mask_positions]
            assert not np.isin(selected, [CLS, SEP, PAD]).any()

    def test_originals_and_inputs(self):
        """Test that inputs carry MASK exactly at mask_positions and originals keep the clean ids."""
        batch = full_batch(3, 20)

        masked = apply_masking(batch, 0.15, np.random.default_rng(5))

        assert ((masked.inputs.ids == MASK) == masked.mask_positions).all()
        np.testing.assert_array_equal(masked.original_ids, batch.ids)
        np.testing.assert_array_equal(masked.originals, batch.ids[masked.mask_positions])

    def test_masking_is_reproducible(self):
        """Test that the same seed selects the same positions."""
        batch = full_batch(4, 30)

        first = apply_masking(batch, 0.15, np.random.default_rng(9))
        second = apply_masking(batch, 0.15, np.random.default_rng(9))

        np.testing.assert_array_equal(first.mask_positions, second.mask_positions)

    def test_selection_is_uniform(self):
        """Test that per-position selection frequency passes a chi-squared test."""
        batch = full_batch(1, 20)
        rng = np.random.default_rng(21)
        counts = np.zeros(22)
        for _ in range(3000):
            counts += apply_masking(batch, 0.15, rng).mask_positions[0]

        assert counts[0] == counts[21] == 0
        assert stats.chisquare(counts[1:21]).pvalue > 0.001

    def test_unmaskable_sequence(self):
        """Test that a row with only special tokens is rejected."""
        batch = SequenceBatch.stack([TokenSequence.from_tokens([CLS, SEP], [0, 0], 4)])

        with pytest.raises(DataError, match='unmaskable sequence'):
            apply_masking(batch, 0.15, np.random.default_rng(0))

    def test_mask_percent_range(self):
        """Test that mask_percent outside (0, 0.5] is rejected."""
        with pytest.raises(DataError):
            apply_masking(full_batch(1, 5), 0.6, np.random.default_rng(0))

    def test_split_preserves_rows(self):
        """Test that micro-batches partition the batch contiguously."""
        masked = apply_masking(full_batch(5, 10), 0.15, np.random.default_rng(0))

        parts = masked.split(2)

        assert [len(p) for p in parts] == [3, 2]
        np.testing.assert_array_equal(np.concatenate([p.mask_positions for p in parts]), masked.mask_positions)
        with pytest.raises(DataError):
            masked.split(6)


class TestPacking:
    """Downstream single and pair packing."""

    def test_pair_structure(self, byte_vocab):
        """Test [CLS] a b [SEP] c d [SEP] with segment ids 0 0 0 0 1 1 1."""
        seq = pack_downstream(TaskExample('ab', 'cd', 1), byte_vocab, 10)

        a, b, c, d = (BYTE_OFFSET + ord(ch) for ch in 'abcd')
        assert seq.ids[:7].tolist() == [CLS, a, b, SEP, c, d, SEP]
        assert seq.segment_ids[:7].tolist() == [0, 0, 0, 0, 1, 1, 1]
        assert seq.attention_mask.tolist() == [1] * 7 + [0] * 3

    def test_single_sentence_segments(self, byte_vocab):
        """Test that single-sentence inputs have all-zero segment ids."""
        seq = pack_downstream(TaskExample('hello', None, 0), byte_vocab, 16)

        assert (seq.segment_ids == 0).all()
        assert seq.ids[0] == CLS
        assert seq.length == 7

    def test_single_sentence_truncation(self, byte_vocab):
        """Test that a long single sentence is cut to max_seq_len."""
        seq = pack_downstream(TaskExample('x' * 50, None, 0), byte_vocab, 16)

        assert seq.length == 16
        assert seq.ids[15] == SEP

    def test_longest_first_truncation(self):
        """Test that lengths (100, 10) under budget 61 trim to (51, 10)."""
        first, second = truncate_pair(list(range(100)), list(range(10)), 61)

        assert (len(first), len(second)) == (51, 10)
        assert first == list(range(51))

    def test_truncation_ties_trim_second(self):
        """Test that equal lengths trim the second sentence first."""
        first, second = truncate_pair([1, 2, 3], [4, 5, 6], 5)

        assert (len(first), len(second)) == (3, 2)

    def test_both_sentences_empty(self, byte_vocab):
        """Test that an example with no text is rejected."""
        with pytest.raises(TaskDataError):
            pack_downstream(TaskExample('', '', 0), byte_vocab, 8)


class TestBatchIterator:
    """Epoch and step batch streams."""

    def test_epoch_mode_partial_batch(self):
        """Test that 10 examples with batch 4 give batches of 4, 4, 2 covering everything once."""
        batches = list(batch_iterator(list(range(10)), 4, np.random.default_rng(0), mode='epoch'))

        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(sum(batches, [])) == list(range(10))

    def test_same_seed_same_stream(self):
        """Test that identical seeds give identical batch streams."""
        def stream(seed):
            return list(batch_iterator(list(range(20)), 3, np.random.default_rng(seed), epochs=2))

        assert stream(4) == stream(4)
        assert stream(4) != stream(5)

    def test_step_mode_samples_with_replacement(self):
        """Test that 3000 single draws over 3 documents land near 1000 each."""
        draws = batch_iterator(['a', 'b', 'c'], 1, np.random.default_rng(2), mode='step')
        counts = {'a': 0, 'b': 0, 'c': 0}
        for _ in range(3000):
            counts[next(draws)[0]] += 1

        assert all(850 <= n <= 1150 for n in counts.values())

    def test_empty_source(self):
        """Test that an empty source is rejected."""
        with pytest.raises(DataError):
            next(batch_iterator([], 2, np.random.default_rng(0)))

    def test_pretraining_batch_is_pure_function_of_seed_and_step(self):
        """Test that draw_pretraining_batch with step generators is reproducible."""
        docs = [list(range(10, 10 + n)) for n in (3, 40, 7, 0, 25)]

        first = draw_pretraining_batch(docs, 6, 16, step_generator(0, 3, 0))
        second = draw_pretraining_batch(docs, 6, 16, step_generator(0, 3, 0))

        np.testing.assert_array_equal(first.ids, second.ids)
        assert first.shape[0] == 6
        assert first.shape[1] <= 16


class TestPrefetcher:
    """Batches prepared ahead on a worker thread."""

    def test_yields_in_step_order(self):
        """Test that prefetched items arrive in order and the stream ends."""
        with Prefetcher(lambda step: step * 10, range(1, 6), depth=2) as prefetcher:
            items = list(prefetcher)

        assert items == [(1, 10), (2, 20), (3, 30), (4, 40), (5, 50)]

    def test_producer_error_is_reraised(self):
        """Test that an exception in the worker surfaces in the consumer."""
        def produce(step):
            if step == 2:
                raise DataError('broken batch')
            return step

        with Prefetcher(produce, range(1, 4)) as prefetcher:
            with pytest.raises(DataError, match='broken batch'):
                list(prefetcher)


class TestTaskFiles:
    """Task TSV loading and descriptors."""

    def test_load_pair_split(self, tmp_path):
        """Test loading a pair task with class-name labels."""
        descriptor = TaskDescriptor(name='pairs', sentences='pair')
        path = tmp_path / 'train.tsv'
        write_task_split(path, [('a cat', 'the cat', 1), ('a dog', 'a bird', 0)], pair=True)

        examples = load_task_split(path, descriptor)

        assert examples == [TaskExample('a cat', 'the cat', 1), TaskExample('a dog', 'a bird', 0)]

    def test_load_regression_split(self, tmp_path):
        """Test that regression labels parse as floats."""
        descriptor = TaskDescriptor(name='sts', kind='regression', metrics=('pearson',))
        path = tmp_path / 'dev.tsv'
        write_task_split(path, [('one', '4.5'), ('two', '0.25')])

        examples = load_task_split(path, descriptor)

        assert [ex.label for ex in examples] == [4.5, 0.25]

    def test_unknown_label_reports_line(self, tmp_path):
        """Test that a label outside the descriptor is reported with its line."""
        descriptor = TaskDescriptor(name='toy')
        path = tmp_path / 'train.tsv'
        write_task_split(path, [('fine', 1), ('odd', 7)])

        with pytest.raises(TaskDataError, match='line 3'):
            load_task_split(path, descriptor)

    def test_missing_column(self, tmp_path):
        """Test that a pair task without sentence2 is rejected."""
        path = tmp_path / 'train.tsv'
        write_task_split(path, [('only one', 1)])

        with pytest.raises(TaskDataError, match='missing columns'):
            load_task_split(path, TaskDescriptor(name='pairs', sentences='pair'))

    def test_missing_file(self, tmp_path):
        """Test that a missing task file raises TaskDataError."""
        with pytest.raises(TaskDataError, match='not found'):
            load_task_split(tmp_path / 'absent.tsv', TaskDescriptor(name='toy'))

    def test_descriptor_validation(self):
        """Test that invalid descriptors raise ConfigError."""
        with pytest.raises(ConfigError):
            TaskDescriptor(name='bad', sentences='triple')
        with pytest.raises(ConfigError):
            TaskDescriptor(name='bad', labels=('only',))

    def test_read_corpus_splits_on_blank_lines(self, tmp_path):
        """Test that one or more blank lines separate documents."""
        path = tmp_path / 'corpus.txt'
        path.write_text('first line\nstill first\n\n\n\nsecond\n\nthird\n', encoding='utf-8')

        assert read_corpus(path) == ['first line\nstill first', 'second', 'third']


class TestRowGenerators:
    """Per-row random streams."""

    def test_split_draws_match_full_draws(self):
        """Test that drawing per micro-batch gives the full-batch values row for row."""
        full = RowGenerators.for_step(seed=3, step=2, stream=3, rows=8).random((8, 5, 4))
        parts = RowGenerators.for_step(seed=3, step=2, stream=3, rows=8).split(2)

        split = np.concatenate([part.random((len(part), 5, 4)) for part in parts])

        assert [len(part) for part in parts] == [4, 4]
        np.testing.assert_array_equal(split, full)

    def test_rows_are_independent(self):
        """Test that rows do not share a stream."""
        draws = RowGenerators.for_step(seed=0, step=1, stream=3, rows=2).random((2, 16))

        assert not np.array_equal(draws[0], draws[1])

    def test_wrong_leading_dimension(self):
        """Test that the shape must start with the row count."""
        rows = RowGenerators.for_step(seed=0, step=1, stream=3, rows=4)

        with pytest.raises(ValueError, match='4 rows'):
            rows.random((2, 3))
