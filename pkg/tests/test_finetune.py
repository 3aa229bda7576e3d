from dataclasses import replace

import numpy as np
import pytest

from rtdforge.exceptions import ConfigError, MultiSeedError
from rtdforge.services.data import CLS, SEP, SequenceBatch, TaskDescriptor, TokenSequence, step_generator
from rtdforge.services.finetune import (
    DiscriminatorWeights,
    FinetuneConfig,
    FinetuneModel,
    SeedResult,
    TaskData,
    evaluate,
    finetune,
    multi_seed_eval,
    predict,
    summarize_seed_results,
)
from rtdforge.services.tensor import precision
from rtdforge.services.transformer import ElectraModel
from tests.conftest import sentiment_rows, write_task_split


@pytest.fixture
def quick_config():
    return FinetuneConfig(learning_rate=1e-3, batch_size=8, head_dropout=0.0, precision='float64')


@pytest.fixture
def task(binary_task_dir, binary_descriptor, tiny_vocab):
    return TaskData.load(binary_task_dir, binary_descriptor, tiny_vocab)


@pytest.fixture
def weights(tiny_model_config):
    return DiscriminatorWeights.untrained(tiny_model_config)


class TestFinetuneConfig:
    """Defaults, validation and warmup."""

    def test_defaults(self):
        """Test the fine-tuning defaults."""
        config = FinetuneConfig()

        assert (config.learning_rate, config.layerwise_decay, config.batch_size) == (3e-4, 0.8, 32)
        assert config.pooling == 'mean'

    def test_warmup_is_capped_at_ten_percent(self):
        """Test effective warmup = min(warmup_steps, 10% of total steps)."""
        config = FinetuneConfig()

        assert config.effective_warmup(1000) == 100
        assert config.effective_warmup(1_000_000) == 10000

    @pytest.mark.parametrize('override', [
        {'layerwise_decay': 0.0},
        {'pooling': 'max'},
        {'batch_size': 0},
        {'head_dropout': 1.0},
    ])
    def test_invalid(self, override):
        """Test that invalid settings raise ConfigError."""
        with pytest.raises(ConfigError):
            FinetuneConfig(**override)


class TestFinetuneModel:
    """Encoder restoration, pooling and learning-rate scales."""

    def test_restores_pretrained_tensors(self, tiny_model_config, binary_descriptor, quick_config):
        """Test that encoder and embedding values come from the weights, not the init."""
        source = ElectraModel(tiny_model_config, rng=5)
        tensors = {name: value for name, value in source.state_dict().items()
                   if name.startswith('embeddings.') or
                   (name.startswith('discriminator.') and not name.startswith('discriminator.head.'))}
        weights = DiscriminatorWeights(tiny_model_config, tensors, source='test')

        model = FinetuneModel(weights, binary_descriptor, quick_config, np.random.default_rng(0))

        own = model.named_parameters()
        for name, value in tensors.items():
            np.testing.assert_array_equal(own[name].data, value)
        assert own['head.out.weight'].shape == (16, 2)

    def test_layerwise_scales(self, weights, binary_descriptor, quick_config):
        """Test multipliers 0.8 ** distance from the head for a 2-layer encoder."""
        model = FinetuneModel(weights, binary_descriptor, quick_config, np.random.default_rng(0))

        scales = model.lr_scales()

        assert scales['head.out.weight'] == 1.0
        assert scales['discriminator.layers.1.ffn.inner.weight'] == 0.8
        assert scales['discriminator.layers.0.ffn.inner.weight'] == 0.8 ** 2
        assert scales['embeddings.token'] == 0.8 ** 3

    def test_mean_pooling_ignores_padding(self, weights, binary_descriptor, quick_config):
        """Test that extra PAD columns do not change the logits."""
        tokens = [CLS, 40, 41, 42, SEP]
        with precision(np.float64):
            model = FinetuneModel(weights, binary_descriptor, quick_config, np.random.default_rng(0))
            short = TokenSequence.from_tokens(tokens, [0] * 5, 5)
            long = TokenSequence.from_tokens(tokens, [0] * 5, 9)
            a = model.forward(SequenceBatch(short.ids[None], short.segment_ids[None], short.attention_mask[None]))
            b = model.forward(SequenceBatch(long.ids[None], long.segment_ids[None], long.attention_mask[None]))

        np.testing.assert_allclose(a.data, b.data, rtol=1e-10, atol=1e-12)

    def test_first_token_pooling(self, weights, binary_descriptor, quick_config):
        """Test that 'first' pooling returns the [CLS] position."""
        config = replace(quick_config, pooling='first')
        with precision(np.float64):
            model = FinetuneModel(weights, binary_descriptor, config, np.random.default_rng(0))
            seq = TokenSequence.from_tokens([CLS, 40, 41, SEP], [0] * 4, 4)
            batch = SequenceBatch(seq.ids[None], seq.segment_ids[None], seq.attention_mask[None])
            hidden = model.encoder.encode(batch)
            pooled = model.pool(hidden, batch)

        np.testing.assert_array_equal(pooled.data, hidden.data[:, 0, :])


class TestFinetune:
    """Training runs."""

    def test_metrics_after_every_epoch(self, task, binary_descriptor, weights, quick_config):
        """Test one dev-metric map per epoch and one loss per step."""
        outcome = finetune(task, binary_descriptor, weights, quick_config)

        assert len(outcome.epoch_metrics) == 2
        assert len(outcome.train_losses) == 2 * 3
        assert set(outcome.metrics) == {'accuracy', 'mcc'}
        assert 0.0 <= outcome.metrics['accuracy'].value <= 1.0

    def test_same_seed_same_run(self, task, binary_descriptor, weights, quick_config):
        """Test that a seed fixes head init, data order and dropout."""
        config = replace(quick_config, head_dropout=0.1)
        a = finetune(task, binary_descriptor, weights, config)
        b = finetune(task, binary_descriptor, weights, config)
        c = finetune(task, binary_descriptor, weights, replace(config, seed=1))

        assert a.train_losses == b.train_losses
        assert a.train_losses != c.train_losses

    def test_predict_labels(self, task, binary_descriptor, weights, quick_config):
        """Test that predictions are class ids, one per dev example."""
        outcome = finetune(task, binary_descriptor, weights, quick_config)

        predictions = predict(outcome.model, task.dev, batch_size=5)

        assert predictions.shape == (12,)
        assert set(predictions.tolist()) <= {0, 1}
        assert evaluate(outcome.model, task.dev)['accuracy'].value == pytest.approx(np.mean(predictions == task.dev.labels))

    def test_regression_task(self, tmp_path, tiny_vocab, weights, quick_config):
        """Test a one-output regression head trained with squared error."""
        descriptor = TaskDescriptor(name='toy-sts', kind='regression', labels=(), metrics=('pearson', 'spearman'),
                                    epochs=1, max_seq_len=24)
        rows = [(text, float(label) * 5.0) for text, label in sentiment_rows(16, seed=3)]
        write_task_split(tmp_path / 'train.tsv', rows)
        write_task_split(tmp_path / 'dev.tsv', rows[:8])
        task = TaskData.load(tmp_path, descriptor, tiny_vocab)

        outcome = finetune(task, descriptor, weights, quick_config)

        assert task.train.labels.dtype == np.float64
        assert set(outcome.metrics) == {'pearson', 'spearman'}
        assert predict(outcome.model, task.dev).dtype.kind == 'f'

    @pytest.mark.slow
    def test_learns_separable_task(self, tmp_path, tiny_vocab, tiny_model_config, binary_descriptor):
        """Test that a single-word cue is learned to > 0.95 dev accuracy in 3 epochs."""
        write_task_split(tmp_path / 'train.tsv', sentiment_rows(200, seed=11))
        write_task_split(tmp_path / 'dev.tsv', sentiment_rows(60, seed=12))
        descriptor = replace(binary_descriptor, epochs=3)
        task = TaskData.load(tmp_path, descriptor, tiny_vocab)
        config = FinetuneConfig(learning_rate=2e-3, batch_size=16, layerwise_decay=1.0, head_dropout=0.0)

        outcome = finetune(task, descriptor, DiscriminatorWeights.untrained(tiny_model_config), config)

        assert outcome.metrics['accuracy'].value > 0.95


class TestMultiSeed:
    """Independent runs per seed and their summary."""

    def test_repeated_seed_has_zero_spread(self, task, binary_descriptor, weights, quick_config):
        """Test that seeds [7, 7] give identical runs and stddev 0."""
        result = multi_seed_eval(task, binary_descriptor, weights, quick_config, seeds=[7, 7])

        assert result.seeds == [7, 7]
        assert result.per_seed[0].metrics == result.per_seed[1].metrics
        assert result.std('accuracy') == 0.0
        assert result.mean('accuracy') == result.per_seed[0].metrics['accuracy']

    def test_values_in_percentage_points(self, task, binary_descriptor, weights, quick_config):
        """Test that per-seed metrics are scaled to percentage points."""
        result = multi_seed_eval(task, binary_descriptor, weights, quick_config, seeds=[0, 1], workers=2)

        for seed_result in result.per_seed:
            assert 0.0 <= seed_result.metrics['accuracy'] <= 100.0
        assert set(result.to_dict()['metrics']) == {'accuracy', 'mcc'}
        assert [r.seed for r in result.per_seed] == [0, 1]

    def test_needs_two_seeds(self, task, binary_descriptor, weights, quick_config):
        """Test that a single seed cannot report a stddev."""
        with pytest.raises(ConfigError, match='at least two seeds'):
            multi_seed_eval(task, binary_descriptor, weights, quick_config, seeds=[3])

    def test_failures_are_collected(self, task, binary_descriptor, weights, quick_config):
        """Test that every failing seed is named in MultiSeedError."""
        broken = replace(binary_descriptor, metrics=('bogus',))

        with pytest.raises(MultiSeedError) as excinfo:
            multi_seed_eval(task, broken, weights, quick_config, seeds=[1, 2])

        assert set(excinfo.value.failures) == {1, 2}

    def test_summary_frame(self):
        """Test mean and sample stddev over seed results."""
        results = [SeedResult('toy', s, {'accuracy': v}) for s, v in [(0, 80.0), (1, 90.0)]]

        summary = summarize_seed_results(results)

        assert summary.loc['accuracy', 'mean'] == 85.0
        assert summary.loc['accuracy', 'std'] == pytest.approx(np.sqrt(50.0))
        assert results[0].to_record(model='m')['model'] == 'm'

    def test_seed_streams_differ(self):
        """Test that the init stream depends on the seed."""
        assert step_generator(0, 0, 4).random() != step_generator(1, 0, 4).random()
