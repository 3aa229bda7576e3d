import logging
from pathlib import Path

from celery import shared_task

from rtdforge.exceptions import RtdforgeError
from rtdforge.models import RunManifest
from rtdforge.services.config_loader import load_task_descriptor
from rtdforge.services.finetune import FinetuneConfig
from rtdforge.services.pretrain import PretrainConfig
from rtdforge.services.runs import finetune_job, pretrain_job, read_manifest
from rtdforge.services.sweep import SweepRun, sweep_run_from_result
from rtdforge.services.transformer import ModelConfig

logger = logging.getLogger('rtdforge')


@shared_task(
    bind=True,
    name='rtdforge.tasks.pretrain_sweep_member_task'
)
def pretrain_sweep_member_task(self, multiplier: float, model_config: dict, pretrain_config: dict,
                               corpus_path: str, vocab_path: str, run_dir: str) -> dict:
    """
    One generator-size sweep member in its own run directory.
    Returns the SweepRun as a dict; a failed run is reported, not raised.
    """
    logger.info(f"Starting sweep member {multiplier} in {run_dir}")
    try:
        result, manifest = pretrain_job(
            run_dir, corpus_path, vocab_path,
            ModelConfig.from_dict(model_config), PretrainConfig.from_dict(pretrain_config),
            command='sweep_generator',
        )
        RunManifest.record(manifest)
        return sweep_run_from_result(multiplier, Path(run_dir), result).to_dict()
    except RtdforgeError as e:
        logger.error(f"Sweep member {multiplier} failed: {e}")
        if (Path(run_dir) / 'manifest.json').exists():
            RunManifest.record(read_manifest(run_dir))
        return SweepRun(multiplier, 'failed', run_dir, error=str(e)).to_dict()
    except Exception as e:
        logger.error(f"Unexpected error in sweep member {multiplier}: {e}")
        raise


@shared_task(
    bind=True,
    name='rtdforge.tasks.finetune_seed_task'
)
def finetune_seed_task(self, run_dir: str, task_dir: str, descriptor_path: str, checkpoint: str,
                       vocab_path: str, config: dict, seeds: list[int], label: str = '') -> dict:
    """Multi-seed fine-tuning of one checkpoint; returns the task summary."""
    logger.info(f"Starting fine-tuning task for {checkpoint} (seeds {seeds})")
    try:
        job = finetune_job(run_dir, task_dir, load_task_descriptor(descriptor_path), checkpoint,
                           vocab_path, FinetuneConfig.from_dict(config), seeds, label=label)
        RunManifest.record(job.manifest)
        return job.result.to_dict()
    except RtdforgeError as e:
        logger.error(f"Fine-tuning task failed: {e}")
        raise
    except Exception as e:
        logger.error(f"Unexpected error in fine-tuning task: {e}")
        raise
