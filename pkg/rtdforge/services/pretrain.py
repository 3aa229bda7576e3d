"""
Replaced-token-detection pretraining.

Per optimizer step: mask the batch, run the generator on the masked input,
sample replacements at the masked positions, run the discriminator on the
replaced sequence, and take an AdamW step on gen_loss + lambda * disc_loss.
"""
import logging
import threading
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from rtdforge.exceptions import CheckpointError, ConfigError, DataError, NonFiniteLossError
from rtdforge.services import functional as F
from rtdforge.services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from rtdforge.services.data import (
    STREAM_DATA,
    STREAM_DROPOUT,
    STREAM_MASKING,
    STREAM_SAMPLING,
    MaskedBatch,
    Prefetcher,
    RowGenerators,
    apply_masking,
    draw_pretraining_batch,
    step_generator,
)
from rtdforge.services.metrics import precision_recall, roc_auc_or_nan
from rtdforge.services.optim import AdamW, lr_at
from rtdforge.services.tensor import Tensor, backward, precision
from rtdforge.services.tokenizer import BYTE_OFFSET, Vocab
from rtdforge.services.transformer import ElectraModel, ModelConfig

logger = logging.getLogger('rtdforge')

CHANCE_AUC = 0.5


@dataclass(frozen=True)
class PretrainConfig:
    learning_rate: float = field(default=5e-4, metadata={'help': "Peak learning rate"})
    warmup_steps: int = field(default=10000, metadata={'help': "Linear warmup steps"})
    total_steps: int = field(default=1_000_000, metadata={'help': "Optimizer steps"})
    schedule: str = field(default='linear', metadata={'help': "Learning-rate decay (only 'linear')"})
    beta1: float = field(default=0.9, metadata={'help': "Adam beta1"})
    beta2: float = field(default=0.9999, metadata={'help': "Adam beta2"})
    epsilon: float = field(default=1e-6, metadata={'help': "Adam epsilon"})
    weight_decay: float = field(default=0.01, metadata={'help': "Decoupled weight decay"})
    batch_size: int = field(default=128, metadata={'help': "Sequences per optimizer step"})
    gradient_accumulation_steps: int = field(default=1, metadata={'help': "Micro-batches per optimizer step"})
    max_seq_len: int = field(default=128, metadata={'help': "Tokens per pretraining segment"})
    mask_percent: float = field(default=0.15, metadata={'help': "Fraction of tokens masked"})
    disc_loss_weight: float = field(default=50.0, metadata={'help': "Discriminator loss weight (lambda)"})
    seed: int = field(default=0, metadata={'help': "Seed for init, data, masking, sampling and dropout"})
    collapse_window: int = field(default=500, metadata={'help': "Collapse monitor window (steps)"})
    collapse_threshold: float = field(default=0.55, metadata={'help': "Collapse monitor AUC threshold"})
    halt_on_collapse: bool = field(default=False, metadata={'help': "Stop the run when the monitor trips"})
    checkpoint_every: int = field(default=0, metadata={'help': "Checkpoint interval in steps (0: final only)"})
    log_every: int = field(default=1, metadata={'help': "Metric record interval in steps"})
    prefetch: int = field(default=0, metadata={'help': "Batches prepared ahead on a worker thread (0: off)"})
    precision: str = field(default='float32', metadata={'help': "'float32' or 'float64'"})

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"warmup_steps ({self.warmup_steps}) must be in [0, total_steps={self.total_steps})")
        if self.schedule != 'linear':
            raise ConfigError(f"Unsupported schedule {self.schedule!r}; only 'linear' is available")
        if not self.disc_loss_weight > 0:
            raise ConfigError(f"disc_loss_weight must be positive, got {self.disc_loss_weight}")
        if not 0.0 < self.mask_percent <= 0.5:
            raise ConfigError(f"mask_percent must be in (0, 0.5], got {self.mask_percent}")
        if self.gradient_accumulation_steps < 1 or self.batch_size < self.gradient_accumulation_steps:
            raise ConfigError(
                f"batch_size ({self.batch_size}) must be at least gradient_accumulation_steps "
                f"({self.gradient_accumulation_steps}), which must be positive"
            )
        if self.collapse_window < 1 or not 0.0 <= self.collapse_threshold <= 1.0:
            raise ConfigError("collapse_window must be positive and collapse_threshold in [0, 1]")
        if self.max_seq_len < 3:
            raise ConfigError(f"max_seq_len must be at least 3, got {self.max_seq_len}")
        if self.precision not in ('float32', 'float64'):
            raise ConfigError(f"precision must be 'float32' or 'float64', got {self.precision!r}")
        if self.checkpoint_every < 0 or self.log_every < 1 or self.prefetch < 0:
            raise ConfigError("checkpoint_every and prefetch must be >= 0 and log_every >= 1")

    @classmethod
    def from_dict(cls, values: dict) -> 'PretrainConfig':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class CollapseMonitor:
    """Trips once, at the first step whose full window has a mean AUC below ``threshold``."""
    window: int = 500
    threshold: float = 0.55
    history: deque = field(default_factory=deque)
    tripped_at: int | None = None

    def __post_init__(self):
        self.history = deque(self.history, maxlen=self.window)

    @property
    def tripped(self) -> bool:
        return self.tripped_at is not None

    @property
    def window_mean(self) -> float:
        return float(np.mean(self.history)) if self.history else float('nan')

    def update(self, step: int, auc: float) -> bool:
        """
        Record one AUC value; returns True only on the tripping step.

        An undefined AUC (a batch with one label class) counts as chance, so
        every step fills the window.
        """
        self.history.append(CHANCE_AUC if np.isnan(auc) else float(auc))
        if self.tripped or len(self.history) < self.window:
            return False
        if self.window_mean < self.threshold:
            self.tripped_at = step
            return True
        return False

    def to_dict(self) -> dict:
        return {'window': self.window, 'threshold': self.threshold,
                'history': list(self.history), 'tripped_at': self.tripped_at}

    @classmethod
    def from_dict(cls, values: dict) -> 'CollapseMonitor':
        return cls(values['window'], values['threshold'], deque(values['history']), values.get('tripped_at'))


def monitor_collapse(monitor: CollapseMonitor, step: int, disc_auc: float) -> CollapseMonitor:
    monitor.update(step, disc_auc)
    return monitor


def sample_replacements(gen_logits, masked: MaskedBatch, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """
    Sample one token per masked position from the generator softmax and
    write it into a copy of the original sequence.

    ``gen_logits`` is either [B, L, V] or [M, V] over the masked positions in
    row-major order. Special tokens are never sampled. Returns the replaced
    ids and the per-position labels (1 = replaced, 0 = original).
    """
    logits = gen_logits.data if isinstance(gen_logits, Tensor) else np.asarray(gen_logits)
    if logits.ndim == 3:
        logits = logits[masked.mask_positions]
    logits = logits.astype(np.float64)
    probs = F.softmax_array(logits, axis=-1)
    probs[:, :BYTE_OFFSET] = 0.0
    cumulative = np.cumsum(probs, axis=-1)
    targets = rng.random(cumulative.shape[0]) * cumulative[:, -1]
    sampled = np.minimum((cumulative <= targets[:, None]).sum(axis=-1), logits.shape[-1] - 1)

    replaced = masked.original_ids.copy()
    replaced[masked.mask_positions] = sampled
    labels = (replaced != masked.original_ids).astype(np.int64)
    return replaced, labels


@dataclass
class ElectraLoss:
    combined: Tensor
    gen_loss: Tensor
    disc_loss: Tensor
    gen_logits: Tensor
    disc_logits: Tensor
    replaced_ids: np.ndarray
    rtd_labels: np.ndarray


def _check_finite(tensor: Tensor, name: str, step: int | None):
    if not np.all(np.isfinite(tensor.data)):
        raise NonFiniteLossError(name, step)


def electra_loss(
    model: ElectraModel,
    masked: MaskedBatch,
    disc_loss_weight: float,
    sampling_rng: np.random.Generator | None = None,
    dropout_rng: np.random.Generator | RowGenerators | None = None,
    training: bool = True,
    replacements: tuple[np.ndarray, np.ndarray] | None = None,
    step: int | None = None,
) -> ElectraLoss:
    """
    Generator MLM loss plus weighted discriminator RTD loss for one batch.

    ``replacements`` fixes the sampled (ids, labels) instead of drawing them,
    which makes the loss a smooth function of the parameters.
    """
    gen_logits = model.generator_logits(masked.inputs, training, dropout_rng, positions=masked.mask_positions)
    _check_finite(gen_logits, 'generator_logits', step)
    gen_loss = F.cross_entropy_from_logits(gen_logits, masked.originals)
    _check_finite(gen_loss, 'gen_loss', step)

    if replacements is None:
        replacements = sample_replacements(gen_logits, masked, sampling_rng)
    replaced_ids, rtd_labels = replacements
    disc_logits = model.discriminator_logits(masked.inputs.with_ids(replaced_ids), training, dropout_rng)
    _check_finite(disc_logits, 'discriminator_logits', step)
    disc_loss = F.binary_cross_entropy_from_logits(disc_logits, rtd_labels, masked.attention_mask)
    _check_finite(disc_loss, 'disc_loss', step)

    combined = gen_loss + disc_loss * disc_loss_weight
    return ElectraLoss(combined, gen_loss, disc_loss, gen_logits, disc_logits, replaced_ids, rtd_labels)


@dataclass
class PretrainBatchOutcome:
    gen_loss: float
    disc_loss: float
    combined_loss: float
    gen_masked_accuracy: float
    disc_auc: float
    replaced_fraction: float
    disc_precision: float
    disc_recall: float
    lr: float
    sampled_ids: np.ndarray = field(repr=False)
    rtd_labels: np.ndarray = field(repr=False)


def make_batch(documents: Sequence[Sequence[int]], config: PretrainConfig, step: int) -> MaskedBatch:
    """The masked batch of ``step``; a pure function of (seed, step)."""
    batch = draw_pretraining_batch(documents, config.batch_size, config.max_seq_len,
                                   step_generator(config.seed, step, STREAM_DATA))
    return apply_masking(batch, config.mask_percent, step_generator(config.seed, step, STREAM_MASKING))


def pretrain_step(
    model: ElectraModel,
    optimizer: AdamW,
    config: PretrainConfig,
    masked: MaskedBatch,
    step: int,
) -> PretrainBatchOutcome:
    """
    One optimizer step (1-based ``step``) over ``gradient_accumulation_steps``
    micro-batches.

    Each micro-batch loss is weighted by its share of the batch's loss
    positions, so the accumulated gradient equals the full-batch gradient.
    Dropout masks come from one generator per row and replacements are
    sampled in row-major order, so the split does not change either.
    """
    sampling_rng = step_generator(config.seed, step, STREAM_SAMPLING)
    dropout_rows = RowGenerators.for_step(config.seed, step, STREAM_DROPOUT, len(masked))
    total_masked = int(masked.mask_positions.sum())
    total_tokens = int(masked.attention_mask.sum())

    model.zero_grad()
    gen_loss = disc_loss = 0.0
    gen_correct = 0
    disc_scores, disc_labels, disc_preds = [], [], []
    sampled_rows, label_rows = [], []
    parts = config.gradient_accumulation_steps
    for micro, micro_rows in zip(masked.split(parts), dropout_rows.split(parts)):
        losses = electra_loss(model, micro, config.disc_loss_weight, sampling_rng, micro_rows, True, step=step)
        gen_share = micro.mask_positions.sum() / total_masked
        disc_share = micro.attention_mask.sum() / total_tokens
        weighted = losses.gen_loss * float(gen_share) + losses.disc_loss * float(config.disc_loss_weight * disc_share)
        backward(weighted)

        gen_loss += losses.gen_loss.item() * gen_share
        disc_loss += losses.disc_loss.item() * disc_share
        gen_correct += int((losses.gen_logits.data.argmax(axis=-1) == micro.originals).sum())
        real = micro.attention_mask == 1
        disc_scores.append(losses.disc_logits.data[real])
        disc_labels.append(losses.rtd_labels[real])
        disc_preds.append((losses.disc_logits.data[real] > 0).astype(np.int64))
        sampled_rows.extend(losses.replaced_ids)
        label_rows.extend(losses.rtd_labels)

    for name, param in optimizer.params.items():
        if param.grad is not None and not np.all(np.isfinite(param.grad)):
            raise NonFiniteLossError(f"grad:{name}", step)
    lr = lr_at(step - 1, config)
    optimizer.step(lr)

    scores, labels, preds = np.concatenate(disc_scores), np.concatenate(disc_labels), np.concatenate(disc_preds)
    disc_precision, disc_recall = precision_recall(preds, labels)
    rtd_labels = _stack_rows(label_rows)
    return PretrainBatchOutcome(
        gen_loss=float(gen_loss),
        disc_loss=float(disc_loss),
        combined_loss=float(gen_loss + config.disc_loss_weight * disc_loss),
        gen_masked_accuracy=gen_correct / total_masked,
        disc_auc=roc_auc_or_nan(scores, labels),
        replaced_fraction=float(rtd_labels[masked.mask_positions].mean()),
        disc_precision=disc_precision,
        disc_recall=disc_recall,
        lr=lr,
        sampled_ids=_stack_rows(sampled_rows),
        rtd_labels=rtd_labels,
    )


def _stack_rows(rows: list[np.ndarray]) -> np.ndarray:
    width = max(len(row) for row in rows)
    return np.stack([np.pad(row, (0, width - len(row))) for row in rows])


METRIC_FIELDS = ('gen_loss', 'disc_loss', 'gen_acc', 'disc_auc', 'replaced_frac', 'lr', 'disc_precision', 'disc_recall')


@dataclass(frozen=True)
class MetricRecord:
    step: int
    gen_loss: float
    disc_loss: float
    gen_acc: float
    disc_auc: float
    replaced_frac: float
    lr: float
    disc_precision: float
    disc_recall: float

    @classmethod
    def from_outcome(cls, step: int, outcome: PretrainBatchOutcome) -> 'MetricRecord':
        return cls(step, outcome.gen_loss, outcome.disc_loss, outcome.gen_masked_accuracy, outcome.disc_auc,
                   outcome.replaced_fraction, outcome.lr, outcome.disc_precision, outcome.disc_recall)

    def format_line(self) -> str:
        values = ' '.join(f"{name}={getattr(self, name):.8g}" for name in METRIC_FIELDS)
        return f"step={self.step} {values}"

    @classmethod
    def parse_line(cls, line: str) -> 'MetricRecord':
        pairs = dict(item.split('=', 1) for item in line.split())
        try:
            return cls(step=int(pairs['step']), **{name: float(pairs[name]) for name in METRIC_FIELDS})
        except (KeyError, ValueError) as e:
            raise DataError(f"Malformed metric line {line!r}: {e}") from e


class MetricSink:
    def write(self, record: MetricRecord) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class MetricLogSink(MetricSink):
    """Appends one line per record to a metric log file."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, 'a' if append else 'w', encoding='utf-8')

    def write(self, record: MetricRecord) -> None:
        self._fh.write(record.format_line() + '\n')
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class MemorySink(MetricSink):
    """Thread-safe in-memory buffer; ``drain`` hands over everything written so far."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[MetricRecord] = []
        self.history: list[MetricRecord] = []

    def write(self, record: MetricRecord) -> None:
        with self._lock:
            self._records.append(record)
            self.history.append(record)

    def drain(self) -> list[MetricRecord]:
        with self._lock:
            drained, self._records = self._records, []
        return drained


def read_metric_log(path: str | Path) -> list[MetricRecord]:
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    return [MetricRecord.parse_line(line) for line in lines if line.strip()]


@dataclass
class PretrainResult:
    status: str
    steps_completed: int
    final_checkpoint: Path | None
    monitor: CollapseMonitor
    last_record: MetricRecord | None
    model: ElectraModel = field(repr=False)


def tokenize_corpus(documents: Iterable[str], vocab: Vocab) -> list[list[int]]:
    tokenized = [vocab.encode(doc) for doc in documents]
    empty = sum(1 for ids in tokenized if not ids)
    if empty:
        logger.warning(f"Skipping {empty} empty documents")
    tokenized = [ids for ids in tokenized if ids]
    if not tokenized:
        raise DataError("Corpus has no nonempty documents")
    return tokenized


def build_checkpoint(model: ElectraModel, optimizer: AdamW, config: PretrainConfig,
                     step: int, monitor: CollapseMonitor, status: str) -> Checkpoint:
    tensors = dict(model.state_dict())
    moments, steps = optimizer.state_dict()
    tensors.update({f"optimizer/{name}": value for name, value in moments.items()})
    return Checkpoint(
        model_config=model.config,
        tensors=tensors,
        aliases=dict(ElectraModel.ALIASES),
        extra={
            'step': step,
            'status': status,
            'monitor': monitor.to_dict(),
            'optimizer_steps': steps,
            'pretrain_config': asdict(config),
        },
    )


def run_pretraining(
    corpus: Sequence[str] | Sequence[Sequence[int]],
    vocab: Vocab | None,
    model_config: ModelConfig,
    config: PretrainConfig,
    sinks: Sequence[MetricSink] = (),
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> PretrainResult:
    """
    Pretrain for ``config.total_steps`` optimizer steps.

    ``corpus`` holds raw documents (tokenized with ``vocab``) or token-id
    lists when ``vocab`` is None. Resuming restores model, optimizer and
    monitor state; all randomness is derived from (seed, step), so a resumed
    run continues exactly as the uninterrupted one would.
    """
    documents = tokenize_corpus(corpus, vocab) if vocab is not None else [list(d) for d in corpus if len(d)]
    if vocab is not None and len(vocab) > model_config.vocab_size:
        raise ConfigError(f"vocab_size {model_config.vocab_size} is smaller than the vocabulary ({len(vocab)})")
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None

    with precision(np.dtype(config.precision)):
        model = ElectraModel(model_config, rng=config.seed)
        optimizer = AdamW(model.named_parameters(), config.beta1, config.beta2, config.epsilon, config.weight_decay)
        monitor = CollapseMonitor(config.collapse_window, config.collapse_threshold)
        start_step = 0
        if resume_from is not None:
            start_step, monitor = _restore(resume_from, model, optimizer)

        logger.info(
            f"Pretraining steps {start_step + 1}..{config.total_steps}: "
            f"{model.count_parameters(include_generator=False)} discriminator parameters, "
            f"{len(documents)} documents"
        )
        status = 'completed'
        last_record = None
        step = start_step
        steps = range(start_step + 1, config.total_steps + 1)
        if config.prefetch:
            batches = Prefetcher(lambda s: make_batch(documents, config, s), steps, config.prefetch)
        else:
            batches = ((s, make_batch(documents, config, s)) for s in steps)
        try:
            for step, masked in batches:
                outcome = pretrain_step(model, optimizer, config, masked, step)
                record = MetricRecord.from_outcome(step, outcome)
                last_record = record
                if step % config.log_every == 0 or step == config.total_steps:
                    for sink in sinks:
                        sink.write(record)
                    logger.info(record.format_line())

                if monitor.update(step, outcome.disc_auc):
                    logger.warning(
                        f"Discriminator collapse at step {step}: "
                        f"mean AUC {monitor.window_mean:.4f} over {monitor.window} steps"
                    )
                    if config.halt_on_collapse:
                        status = 'collapsed'
                        break
                if checkpoint_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_checkpoint(checkpoint_dir / f"step-{step}.ckpt",
                                    build_checkpoint(model, optimizer, config, step, monitor, 'running'))
        except Exception as e:
            logger.error(f"Pretraining failed at step {step}: {e}")
            raise
        finally:
            if isinstance(batches, Prefetcher):
                batches.close()

        final_checkpoint = None
        if checkpoint_dir:
            final_checkpoint = save_checkpoint(checkpoint_dir / 'final.ckpt',
                                               build_checkpoint(model, optimizer, config, step, monitor, status))
    logger.info(f"Pretraining finished with status {status} at step {step}")
    return PretrainResult(status, step, final_checkpoint, monitor, last_record, model)


def _restore(path: str | Path, model: ElectraModel, optimizer: AdamW) -> tuple[int, CollapseMonitor]:
    checkpoint = load_checkpoint(path)
    if checkpoint.model_config != model.config:
        raise CheckpointError(f"Checkpoint {path} was written for a different model configuration")
    try:
        model.load_state_dict(checkpoint.model_tensors())
        optimizer.load_state_dict(checkpoint.section('optimizer'), checkpoint.extra.get('optimizer_steps', {}))
        step = int(checkpoint.extra['step'])
        monitor = CollapseMonitor.from_dict(checkpoint.extra['monitor'])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"Checkpoint {path} cannot resume pretraining: {e}") from e
    logger.info(f"Resuming from {path} at step {step}")
    return step, monitor
