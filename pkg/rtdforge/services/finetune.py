"""
Downstream fine-tuning of the pretrained discriminator.

The discriminator encoder and shared embeddings are restored from a
pretraining checkpoint, a pooling + 2-layer MLP head is attached, and the
whole stack is trained with layer-wise learning-rate decay.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from rtdforge.exceptions import CheckpointError, ConfigError, MultiSeedError, RtdforgeError
from rtdforge.services import functional as F
from rtdforge.services.checkpoint import load_checkpoint
from rtdforge.services.data import (
    STREAM_DATA,
    STREAM_DROPOUT,
    STREAM_INIT,
    SequenceBatch,
    TaskDescriptor,
    TokenSequence,
    batch_iterator,
    load_task_split,
    pack_downstream,
    step_generator,
)
from rtdforge.services.metrics import MetricValue, compute_task_metrics
from rtdforge.services.optim import AdamW, layerwise_multiplier, linear_schedule, parameter_depth
from rtdforge.services.tensor import Tensor, backward, no_grad, precision
from rtdforge.services.tokenizer import Vocab
from rtdforge.services.transformer import Encoder, Initializer, ModelConfig, SharedEmbeddings

logger = logging.getLogger('rtdforge')

# Fields that must agree between a checkpoint and the model it is loaded into.
COMPATIBILITY_FIELDS = ('vocab_size', 'embedding_size', 'hidden_size', 'ffn_size', 'num_layers',
                        'num_heads', 'head_size', 'max_positions')


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = field(default=3e-4, metadata={'help': "Head learning rate"})
    layerwise_decay: float = field(default=0.8, metadata={'help': "Per-layer learning-rate decay"})
    warmup_steps: int = field(default=10000, metadata={'help': "Warmup steps before the 10% cap"})
    warmup_fraction: float = field(default=0.1, metadata={'help': "Warmup cap as a fraction of total steps"})
    schedule: str = field(default='linear', metadata={'help': "Learning-rate decay (only 'linear')"})
    beta1: float = field(default=0.9, metadata={'help': "Adam beta1"})
    beta2: float = field(default=0.9999, metadata={'help': "Adam beta2"})
    epsilon: float = field(default=1e-6, metadata={'help': "Adam epsilon"})
    weight_decay: float = field(default=0.0, metadata={'help': "Decoupled weight decay"})
    batch_size: int = field(default=32, metadata={'help': "Examples per step"})
    epochs: int = field(default=0, metadata={'help': "Epochs (0: use the task descriptor's value)"})
    head_dropout: float = field(default=0.1, metadata={'help': "Dropout before each head linear layer"})
    pooling: str = field(default='mean', metadata={'help': "'mean' over non-pad tokens or 'first' token"})
    seed: int = field(default=0, metadata={'help': "Seed for head init, data order and dropout"})
    precision: str = field(default='float32', metadata={'help': "'float32' or 'float64'"})

    def __post_init__(self):
        if not 0.0 < self.layerwise_decay <= 1.0:
            raise ConfigError(f"layerwise_decay must be in (0, 1], got {self.layerwise_decay}")
        if not self.learning_rate > 0 or self.batch_size < 1 or self.epochs < 0 or self.warmup_steps < 0:
            raise ConfigError("learning_rate and batch_size must be positive, epochs and warmup_steps >= 0")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(f"warmup_fraction must be in [0, 1], got {self.warmup_fraction}")
        if self.schedule != 'linear':
            raise ConfigError(f"Unsupported schedule {self.schedule!r}; only 'linear' is available")
        if self.pooling not in ('mean', 'first'):
            raise ConfigError(f"pooling must be 'mean' or 'first', got {self.pooling!r}")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError(f"head_dropout must be in [0, 1), got {self.head_dropout}")
        if self.precision not in ('float32', 'float64'):
            raise ConfigError(f"precision must be 'float32' or 'float64', got {self.precision!r}")

    @classmethod
    def from_dict(cls, values: dict) -> 'FinetuneConfig':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    def effective_warmup(self, total_steps: int) -> int:
        return min(self.warmup_steps, int(self.warmup_fraction * total_steps))


@dataclass
class DiscriminatorWeights:
    """Shared embeddings + discriminator encoder arrays; empty ``tensors`` means random init."""
    model_config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    source: str = 'random-init'

    @classmethod
    def untrained(cls, model_config: ModelConfig) -> 'DiscriminatorWeights':
        return cls(model_config)


def load_pretrained(path: str | Path, expected: ModelConfig | None = None) -> DiscriminatorWeights:
    """
    Restore the discriminator side of a pretraining checkpoint.

    Generator tensors and the RTD head are dropped; the checkpoint does not
    need to contain them.
    """
    checkpoint = load_checkpoint(path)
    config = checkpoint.model_config
    if expected is not None:
        mismatched = [
            f"{name} (checkpoint {getattr(config, name)}, expected {getattr(expected, name)})"
            for name in COMPATIBILITY_FIELDS if getattr(config, name) != getattr(expected, name)
        ]
        if mismatched:
            raise CheckpointError(f"Checkpoint {path} is incompatible: {', '.join(mismatched)}")

    tensors = {}
    for name, value in checkpoint.model_tensors().items():
        name = checkpoint.aliases.get(name, name)
        if name.startswith('embeddings.') or (
            name.startswith('discriminator.') and not name.startswith('discriminator.head.')
        ):
            tensors[name] = value

    required = Encoder.parameter_shapes('discriminator', config.discriminator_dims(), config)
    required.update({
        'embeddings.token': (config.vocab_size, config.embedding_size),
        'embeddings.position': (config.max_positions, config.embedding_size),
        'embeddings.segment': (2, config.embedding_size),
    })
    missing = sorted(set(required) - set(tensors))
    if missing:
        raise CheckpointError(f"Checkpoint {path} lacks discriminator tensors: {missing[:5]}")
    wrong = [name for name, shape in required.items() if tensors[name].shape != shape]
    if wrong:
        raise CheckpointError(f"Checkpoint {path} has mis-shaped tensors: {wrong[:5]}")
    logger.info(f"Loaded discriminator weights ({len(tensors)} tensors) from {path}")
    return DiscriminatorWeights(config, tensors, source=str(path))


class FinetuneModel:
    """Discriminator encoder + pooling + MLP head for one task."""

    def __init__(self, weights: DiscriminatorWeights, descriptor: TaskDescriptor,
                 config: FinetuneConfig, rng: np.random.Generator):
        model_config = weights.model_config
        self.model_config = model_config
        self.descriptor = descriptor
        self.config = config
        init = Initializer(rng, model_config.initializer_range)
        self.embeddings = SharedEmbeddings(model_config, init)
        self.encoder = Encoder('discriminator', model_config.discriminator_dims(), model_config, self.embeddings, init)
        hidden = model_config.hidden_size
        self.head = {
            'head.dense.weight': init.normal('head.dense.weight', hidden, hidden),
            'head.dense.bias': init.zeros('head.dense.bias', hidden),
            'head.out.weight': init.normal('head.out.weight', hidden, descriptor.num_outputs),
            'head.out.bias': init.zeros('head.out.bias', descriptor.num_outputs),
        }
        own = self.named_parameters()
        for name, value in weights.tensors.items():
            if name in own:
                own[name].data[...] = value

    def named_parameters(self) -> dict[str, Tensor]:
        named = self.embeddings.named_parameters()
        named.update(self.encoder.named_parameters())
        named.update(self.head)
        return named

    def zero_grad(self) -> None:
        for param in self.named_parameters().values():
            param.zero_grad()

    def pool(self, hidden: Tensor, batch: SequenceBatch) -> Tensor:
        if self.config.pooling == 'first':
            return hidden[:, 0, :]
        return F.masked_mean(hidden, batch.attention_mask)

    def forward(self, batch: SequenceBatch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        hidden = self.encoder.encode(batch, training, rng)
        pooled = F.dropout(self.pool(hidden, batch), self.config.head_dropout, rng, training)
        inner = F.gelu(F.linear(pooled, self.head['head.dense.weight'], self.head['head.dense.bias']))
        inner = F.dropout(inner, self.config.head_dropout, rng, training)
        return F.linear(inner, self.head['head.out.weight'], self.head['head.out.bias'])

    def lr_scales(self) -> dict[str, float]:
        layers = self.model_config.num_layers
        return {
            name: layerwise_multiplier(parameter_depth(name, layers), layers, self.config.layerwise_decay)
            for name in self.named_parameters()
        }


@dataclass
class PackedSplit:
    sequences: list[TokenSequence]
    labels: np.ndarray

    def __len__(self):
        return len(self.sequences)

    def batch(self, indices) -> tuple[SequenceBatch, np.ndarray]:
        return SequenceBatch.stack([self.sequences[i] for i in indices]), self.labels[list(indices)]


@dataclass
class TaskData:
    train: PackedSplit
    dev: PackedSplit

    @classmethod
    def load(cls, directory: str | Path, descriptor: TaskDescriptor, vocab: Vocab) -> 'TaskData':
        """Pack ``train.tsv`` and ``dev.tsv`` from a task directory."""
        directory = Path(directory)
        return cls(
            train=pack_split(load_task_split(directory / 'train.tsv', descriptor), descriptor, vocab),
            dev=pack_split(load_task_split(directory / 'dev.tsv', descriptor), descriptor, vocab),
        )


def pack_split(examples, descriptor: TaskDescriptor, vocab: Vocab) -> PackedSplit:
    sequences = [pack_downstream(ex, vocab, descriptor.max_seq_len) for ex in examples]
    dtype = np.float64 if descriptor.is_regression else np.int64
    return PackedSplit(sequences, np.array([ex.label for ex in examples], dtype=dtype))


@dataclass
class FinetuneOutcome:
    model: FinetuneModel = field(repr=False)
    epoch_metrics: list[dict[str, MetricValue]]
    train_losses: list[float]

    @property
    def metrics(self) -> dict[str, MetricValue]:
        """Final-epoch dev metrics."""
        return self.epoch_metrics[-1]


def _task_loss(logits: Tensor, labels: np.ndarray, descriptor: TaskDescriptor) -> Tensor:
    if descriptor.is_regression:
        return F.mse_loss(logits.reshape(logits.shape[0]), labels)
    return F.cross_entropy_from_logits(logits, labels)


def predict(model: FinetuneModel, split: PackedSplit, batch_size: int = 64) -> np.ndarray:
    outputs = []
    with no_grad():
        for start in range(0, len(split), batch_size):
            batch, _ = split.batch(range(start, min(start + batch_size, len(split))))
            logits = model.forward(batch, training=False).data
            outputs.append(logits[:, 0] if model.descriptor.is_regression else logits.argmax(axis=-1))
    return np.concatenate(outputs)


def evaluate(model: FinetuneModel, split: PackedSplit) -> dict[str, MetricValue]:
    return compute_task_metrics(model.descriptor.metrics, predict(model, split), split.labels)


def finetune(task: TaskData, descriptor: TaskDescriptor, weights: DiscriminatorWeights,
             config: FinetuneConfig) -> FinetuneOutcome:
    """
    Fixed-epoch training; dev metrics are computed after every epoch and the
    final epoch's values are the result.
    """
    epochs = config.epochs or descriptor.epochs
    steps_per_epoch = math.ceil(len(task.train) / config.batch_size)
    total_steps = epochs * steps_per_epoch
    warmup = config.effective_warmup(total_steps)

    with precision(np.dtype(config.precision)):
        model = FinetuneModel(weights, descriptor, config, step_generator(config.seed, 0, STREAM_INIT))
        optimizer = AdamW(model.named_parameters(), config.beta1, config.beta2, config.epsilon,
                          config.weight_decay, lr_scales=model.lr_scales())
        order = batch_iterator(range(len(task.train)), config.batch_size,
                               step_generator(config.seed, 0, STREAM_DATA), mode='epoch', epochs=epochs)
        logger.info(
            f"Fine-tuning {descriptor.name} (seed {config.seed}, {weights.source}): "
            f"{epochs} epochs x {steps_per_epoch} steps, warmup {warmup}"
        )
        epoch_metrics, train_losses = [], []
        for step, indices in enumerate(order, start=1):
            batch, labels = task.train.batch(indices)
            model.zero_grad()
            logits = model.forward(batch, training=True, rng=step_generator(config.seed, step, STREAM_DROPOUT))
            loss = _task_loss(logits, labels, descriptor)
            backward(loss)
            optimizer.step(linear_schedule(step - 1, config.learning_rate, warmup, total_steps))
            train_losses.append(loss.item())
            if step % steps_per_epoch == 0:
                metrics = evaluate(model, task.dev)
                epoch_metrics.append(metrics)
                summary = ', '.join(f"{name}={m.value:.4f}" for name, m in metrics.items())
                logger.info(f"{descriptor.name} seed {config.seed} epoch {step // steps_per_epoch}: {summary}")
    return FinetuneOutcome(model, epoch_metrics, train_losses)


@dataclass
class SeedResult:
    task: str
    seed: int
    metrics: dict[str, float]
    degenerate: list[str] = field(default_factory=list)

    def to_record(self, **extra) -> dict:
        return {'task': self.task, 'seed': self.seed, 'metrics': self.metrics,
                'degenerate': self.degenerate, **extra}


@dataclass
class TaskResult:
    """Per-seed metric values (percentage points) with their mean and sample stddev."""
    task: str
    seeds: list[int]
    per_seed: list[SeedResult]
    summary: pd.DataFrame

    def mean(self, metric: str) -> float:
        return float(self.summary.loc[metric, 'mean'])

    def std(self, metric: str) -> float:
        return float(self.summary.loc[metric, 'std'])

    def to_dict(self) -> dict:
        return {
            'task': self.task,
            'seeds': self.seeds,
            'metrics': {
                metric: {'mean': float(row['mean']), 'std': float(row['std'])}
                for metric, row in self.summary.iterrows()
            },
        }


def summarize_seed_results(results: Sequence[SeedResult]) -> pd.DataFrame:
    df = pd.DataFrame([{'seed': r.seed, **r.metrics} for r in results]).drop(columns='seed')
    return pd.DataFrame({'mean': df.mean(), 'std': df.std(ddof=1)})


def multi_seed_eval(task: TaskData, descriptor: TaskDescriptor, weights: DiscriminatorWeights,
                    config: FinetuneConfig, seeds: Sequence[int], workers: int = 1) -> TaskResult:
    """
    Fine-tune once per seed from the same weights and summarize.

    Seed runs are independent and may execute on ``workers`` threads.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ConfigError("multi_seed_eval needs at least two seeds to report a stddev")

    def run(seed: int) -> SeedResult:
        outcome = finetune(task, descriptor, weights, _with_seed(config, seed))
        return SeedResult(
            task=descriptor.name,
            seed=seed,
            metrics={name: 100.0 * m.value for name, m in outcome.metrics.items()},
            degenerate=[name for name, m in outcome.metrics.items() if m.degenerate],
        )

    results: dict[int, SeedResult] = {}
    failures: dict[int, str] = {}
    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(seeds)))) as pool:
        futures = [(i, seed, pool.submit(run, seed)) for i, seed in enumerate(seeds)]
        for i, seed, future in futures:
            try:
                results[i] = future.result()
            except (RtdforgeError, ValueError, ArithmeticError) as e:
                logger.error(f"{descriptor.name} seed {seed} failed: {e}")
                failures[seed] = str(e)
    if failures:
        raise MultiSeedError(failures)

    per_seed = [results[i] for i in range(len(seeds))]
    return TaskResult(descriptor.name, seeds, per_seed, summarize_seed_results(per_seed))


def _with_seed(config: FinetuneConfig, seed: int) -> FinetuneConfig:
    values = {f.name: getattr(config, f.name) for f in fields(config)}
    values['seed'] = seed
    return FinetuneConfig(**values)
