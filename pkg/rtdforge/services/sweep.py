"""
Generator-size sweep: one pretraining run per generator multiplier with a
shared discriminator configuration, summarized per run.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import pandas as pd

from rtdforge.exceptions import ConfigError, RtdforgeError
from rtdforge.services.config_loader import build, read_config_file, split_entries
from rtdforge.services.pretrain import PretrainConfig
from rtdforge.services.runs import pretrain_job
from rtdforge.services.tokenizer import Vocab
from rtdforge.services.transformer import ModelConfig

logger = logging.getLogger('rtdforge')

DEFAULT_MULTIPLIERS = (0.125, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class SweepSpec:
    multipliers: tuple[float, ...] = field(default=DEFAULT_MULTIPLIERS,
                                           metadata={'help': "Generator multipliers, one run each"})
    steps_per_run: int = field(default=0, metadata={'help': "Step budget per run (0: base total_steps)"})
    workers: int = field(default=1, metadata={'help': "Runs executed concurrently on threads"})

    def __post_init__(self):
        if not self.multipliers:
            raise ConfigError("A sweep needs at least one generator multiplier")
        bad = [m for m in self.multipliers if not 0.0 < m <= 1.0]
        if bad:
            raise ConfigError(f"Generator multipliers must be in (0, 1], got {bad}")
        if len(set(self.multipliers)) != len(self.multipliers):
            raise ConfigError(f"Duplicate generator multipliers in {self.multipliers}")
        if self.steps_per_run < 0 or self.workers < 1:
            raise ConfigError("steps_per_run must be >= 0 and workers >= 1")


@dataclass(frozen=True)
class SweepPlan:
    spec: SweepSpec
    model_config: ModelConfig
    pretrain_config: PretrainConfig

    def member(self, multiplier: float) -> tuple[ModelConfig, PretrainConfig]:
        """Base configs with the generator multiplier and step budget applied."""
        model_config = replace(self.model_config, generator_multiplier=multiplier)
        pretrain_config = self.pretrain_config
        if self.spec.steps_per_run:
            pretrain_config = replace(pretrain_config, total_steps=self.spec.steps_per_run)
        return model_config, pretrain_config


def load_sweep_plan(path: str | Path) -> SweepPlan:
    """
    A sweep file carries SweepSpec keys plus the shared model and pretraining
    keys. ``halt_on_collapse`` defaults to true in a sweep.
    """
    entries = read_config_file(path)
    spec_values, model_values, pretrain_values = split_entries(
        entries, str(path), SweepSpec, ModelConfig, PretrainConfig
    )
    pretrain_values.setdefault('halt_on_collapse', True)
    plan = SweepPlan(
        build(SweepSpec, spec_values, str(path)),
        build(ModelConfig, model_values, str(path)),
        build(PretrainConfig, pretrain_values, str(path)),
    )
    for multiplier in plan.spec.multipliers:
        try:
            plan.member(multiplier)
        except ConfigError as e:
            raise ConfigError(f"{path}: multiplier {multiplier}: {e}") from e
    return plan


def run_label(multiplier: float) -> str:
    return f"gen-{multiplier:g}"


def size_label(multiplier: float) -> str:
    return f"{100 * multiplier:g}% Gen.Size"


@dataclass
class SweepRun:
    multiplier: float
    status: str
    run_dir: str
    steps_completed: int = 0
    final_disc_auc: float = math.nan
    window_mean_auc: float = math.nan
    final_checkpoint: str | None = None
    error: str = ''
    downstream: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


Runner = Callable[[float, ModelConfig, PretrainConfig, Path], SweepRun]
Downstream = Callable[[SweepRun], dict[str, float]]


class PretrainRunner:
    """Runs one sweep member in-process and writes its run directory."""

    def __init__(self, corpus_path: str | Path, vocab: Vocab | str | Path):
        self.corpus_path = corpus_path
        self.vocab = vocab

    def __call__(self, multiplier: float, model_config: ModelConfig,
                 pretrain_config: PretrainConfig, run_dir: Path) -> SweepRun:
        result, _ = pretrain_job(run_dir, self.corpus_path, self.vocab, model_config, pretrain_config,
                                 command='sweep_generator')
        return sweep_run_from_result(multiplier, run_dir, result)


def sweep_run_from_result(multiplier: float, run_dir: Path, result) -> SweepRun:
    last = result.last_record
    return SweepRun(
        multiplier=multiplier,
        status=result.status,
        run_dir=str(run_dir),
        steps_completed=result.steps_completed,
        final_disc_auc=last.disc_auc if last else math.nan,
        window_mean_auc=result.monitor.window_mean,
        final_checkpoint=str(result.final_checkpoint) if result.final_checkpoint else None,
    )


def run_sweep(plan: SweepPlan, out_dir: str | Path, runner: Runner,
              downstream: Downstream | None = None) -> list[SweepRun]:
    """
    Run every member; a failing member is recorded as ``failed`` and the
    sweep continues. Completed runs get downstream metrics when
    ``downstream`` is given.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def execute(multiplier: float) -> SweepRun:
        run_dir = out_dir / run_label(multiplier)
        try:
            model_config, pretrain_config = plan.member(multiplier)
            logger.info(f"Sweep member {run_label(multiplier)}: {pretrain_config.total_steps} steps")
            return runner(multiplier, model_config, pretrain_config, run_dir)
        except (RtdforgeError, ValueError, ArithmeticError) as e:
            logger.error(f"Sweep member {run_label(multiplier)} failed: {e}")
            return SweepRun(multiplier, 'failed', str(run_dir), error=str(e))

    with ThreadPoolExecutor(max_workers=min(plan.spec.workers, len(plan.spec.multipliers))) as pool:
        runs = list(pool.map(execute, plan.spec.multipliers))

    if downstream is not None:
        for run in runs:
            if run.status != 'completed':
                continue
            try:
                run.downstream = downstream(run)
            except RtdforgeError as e:
                logger.error(f"Downstream evaluation of {run_label(run.multiplier)} failed: {e}")
                run.error = f"downstream: {e}"
    write_sweep_summary(out_dir, runs)
    return runs


def summarize_sweep(runs: Sequence[SweepRun]) -> pd.DataFrame:
    rows = []
    for run in sorted(runs, key=lambda r: r.multiplier):
        rows.append({
            'generator': size_label(run.multiplier),
            'multiplier': run.multiplier,
            'status': run.status,
            'steps': run.steps_completed,
            'final_disc_auc': run.final_disc_auc,
            'window_mean_auc': run.window_mean_auc,
            **run.downstream,
        })
    return pd.DataFrame(rows)


def write_sweep_summary(out_dir: str | Path, runs: Sequence[SweepRun]) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    json_path = out_dir / 'sweep_summary.json'
    txt_path = out_dir / 'sweep_summary.txt'
    ordered = sorted(runs, key=lambda r: r.multiplier)
    json_path.write_text(json.dumps({'runs': [r.to_dict() for r in ordered]}, indent=2, sort_keys=True),
                         encoding='utf-8')
    table = summarize_sweep(ordered)
    txt_path.write_text(table.to_string(index=False, na_rep='-', float_format=lambda v: f"{v:.4f}") + '\n',
                        encoding='utf-8')
    collapsed = [size_label(r.multiplier) for r in ordered if r.status == 'collapsed']
    if collapsed:
        logger.warning(f"Collapsed sweep members: {', '.join(collapsed)}")
    return json_path, txt_path
