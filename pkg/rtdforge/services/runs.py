"""
Run directories and their manifests.

A run directory holds exactly one ``manifest.json`` recording the command,
the digest of its resolved configuration, seeds, timestamps, final status
and artifact paths. The pretraining and fine-tuning jobs here are shared by
the management commands and the Celery tasks.
"""
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, is_dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from rtdforge.exceptions import DataError, RtdforgeError
from rtdforge.services.checkpoint import file_digest
from rtdforge.services.data import TaskDescriptor, read_corpus
from rtdforge.services.finetune import FinetuneConfig, TaskData, TaskResult, load_pretrained, multi_seed_eval
from rtdforge.services.pretrain import MetricLogSink, PretrainConfig, PretrainResult, run_pretraining
from rtdforge.services.tokenizer import Vocab, load_vocab
from rtdforge.services.transformer import ModelConfig

logger = logging.getLogger('rtdforge')

MANIFEST_NAME = 'manifest.json'
RUN_STATUSES = ('completed', 'collapsed', 'failed')


def canonical_config(*configs) -> dict:
    """{ClassName: fields} for every dataclass config, tuples as lists."""
    resolved = {}
    for config in configs:
        if not is_dataclass(config):
            raise TypeError(f"Expected a dataclass config, got {type(config).__name__}")
        resolved[type(config).__name__] = json.loads(json.dumps(asdict(config)))
    return resolved


def config_digest(*configs) -> str:
    """SHA-256 of the canonical JSON (sorted keys) of the resolved configs."""
    payload = json.dumps(canonical_config(*configs), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class Manifest:
    command: str
    run_dir: str
    config_digest: str
    config: dict
    seeds: list[int]
    started_at: str = field(default_factory=utc_now)
    finished_at: str | None = None
    status: str | None = None
    artifacts: dict[str, str] = field(default_factory=dict)
    error: str = ''

    @classmethod
    def start(cls, command: str, run_dir: str | Path, configs: Sequence, seeds: Sequence[int]) -> 'Manifest':
        return cls(command, str(run_dir), config_digest(*configs), canonical_config(*configs), list(seeds))

    def finish(self, status: str, artifacts: dict[str, str | Path] | None = None, error: str = '') -> 'Manifest':
        if status not in RUN_STATUSES:
            raise ValueError(f"Run status must be one of {RUN_STATUSES}, got {status!r}")
        self.status = status
        self.finished_at = utc_now()
        self.artifacts.update({k: str(v) for k, v in (artifacts or {}).items()})
        self.error = error
        return self


def write_manifest(manifest: Manifest) -> Path:
    """Write (or replace) ``<run_dir>/manifest.json`` atomically."""
    run_dir = Path(manifest.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / MANIFEST_NAME
    tmp = path.with_suffix('.json.tmp')
    tmp.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True), encoding='utf-8')
    os.replace(tmp, path)
    return path


def read_manifest(run_dir: str | Path) -> Manifest:
    path = Path(run_dir) / MANIFEST_NAME
    try:
        return Manifest(**json.loads(path.read_text(encoding='utf-8')))
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise DataError(f"Unreadable manifest {path}: {e}") from e


def pretrain_job(
    run_dir: str | Path,
    corpus_path: str | Path,
    vocab: Vocab | str | Path,
    model_config: ModelConfig,
    config: PretrainConfig,
    resume_from: str | Path | None = None,
    command: str = 'pretrain',
) -> tuple[PretrainResult | None, Manifest]:
    """
    Pretrain into ``run_dir`` (``metrics.log``, ``checkpoints/``, manifest).

    The manifest is written whatever the outcome; errors are re-raised after
    it records status ``failed``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.start(command, run_dir, (model_config, config), [config.seed])
    log_path = run_dir / 'metrics.log'
    artifacts = {'metrics_log': log_path}
    sink = None
    try:
        if not isinstance(vocab, Vocab):
            artifacts['vocab'] = vocab
            vocab = load_vocab(vocab)
        documents = read_corpus(corpus_path)
        sink = MetricLogSink(log_path, append=resume_from is not None)
        result = run_pretraining(documents, vocab, model_config, config, sinks=[sink],
                                 checkpoint_dir=run_dir / 'checkpoints', resume_from=resume_from)
    except (RtdforgeError, ValueError, ArithmeticError) as e:
        logger.error(f"Pretraining run {run_dir} failed: {e}")
        write_manifest(manifest.finish('failed', artifacts, error=str(e)))
        raise
    finally:
        if sink is not None:
            sink.close()

    if resume_from is not None:
        artifacts['resumed_from'] = resume_from
    artifacts['final_checkpoint'] = result.final_checkpoint
    artifacts['final_checkpoint_sha256'] = file_digest(result.final_checkpoint)
    write_manifest(manifest.finish(result.status, artifacts))
    return result, manifest


@dataclass
class FinetuneJobResult:
    result: TaskResult
    manifest: Manifest
    record_paths: list[Path]
    summary_path: Path


def finetune_job(
    run_dir: str | Path,
    task_dir: str | Path,
    descriptor: TaskDescriptor,
    checkpoint: str | Path,
    vocab: Vocab | str | Path,
    config: FinetuneConfig,
    seeds: Sequence[int],
    label: str = '',
    workers: int = 1,
) -> FinetuneJobResult:
    """
    Multi-seed fine-tuning into ``run_dir``: one ``results/<task>-seed<seed>.json``
    record per seed plus ``summary.json``.
    """
    run_dir = Path(run_dir)
    manifest = Manifest.start('finetune', run_dir, (descriptor, config), seeds)
    label = label or Path(checkpoint).stem
    try:
        vocab = vocab if isinstance(vocab, Vocab) else load_vocab(vocab)
        weights = load_pretrained(checkpoint)
        task = TaskData.load(task_dir, descriptor, vocab)
        result = multi_seed_eval(task, descriptor, weights, config, seeds, workers=workers)
    except (RtdforgeError, ValueError, ArithmeticError) as e:
        logger.error(f"Fine-tuning run {run_dir} failed: {e}")
        write_manifest(manifest.finish('failed', {'checkpoint': checkpoint}, error=str(e)))
        raise

    results_dir = run_dir / 'results'
    results_dir.mkdir(parents=True, exist_ok=True)
    record_paths = []
    for seed_result in result.per_seed:
        path = results_dir / f"{seed_result.task}-seed{seed_result.seed}.json"
        path.write_text(json.dumps(seed_result.to_record(model=label), indent=2, sort_keys=True), encoding='utf-8')
        record_paths.append(path)
    summary_path = run_dir / 'summary.json'
    summary_path.write_text(json.dumps({'model': label, **result.to_dict()}, indent=2, sort_keys=True),
                            encoding='utf-8')
    write_manifest(manifest.finish('completed', {
        'checkpoint': checkpoint, 'results': results_dir, 'summary': summary_path,
    }))
    logger.info(f"Fine-tuning {descriptor.name} finished: {len(record_paths)} seed records in {results_dir}")
    return FinetuneJobResult(result, manifest, record_paths, summary_path)
