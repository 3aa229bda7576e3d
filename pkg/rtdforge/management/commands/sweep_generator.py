from dataclasses import asdict
from pathlib import Path

from celery import group
from django.core.management.base import BaseCommand, CommandError

from rtdforge.exceptions import RtdforgeError
from rtdforge.management.commands._common import command_error, parse_seeds, resolve_run_dir
from rtdforge.models import RunManifest
from rtdforge.services.config_loader import load_finetune_config, load_task_descriptor
from rtdforge.services.finetune import FinetuneConfig
from rtdforge.services.runs import MANIFEST_NAME, finetune_job, read_manifest
from rtdforge.services.sweep import (
    PretrainRunner,
    SweepRun,
    load_sweep_plan,
    run_label,
    run_sweep,
    size_label,
    write_sweep_summary,
)


class Command(BaseCommand):
    help = 'Pretrain one model per generator size with a shared discriminator config and summarize'

    def add_arguments(self, parser):
        parser.add_argument('--spec', required=True, help='Sweep config (sweep keys + shared model/pretrain keys)')
        parser.add_argument('--corpus', required=True, help='UTF-8 corpus, documents separated by blank lines')
        parser.add_argument('--vocab', required=True, help='Vocab file from train_tokenizer')
        parser.add_argument('--out', required=True, help='Sweep directory (relative paths under RTDFORGE_RUNS_DIR)')
        parser.add_argument(
            '--async',
            action='store_true',
            dest='run_async',
            help='Run members as Celery tasks and wait for all of them',
        )
        parser.add_argument('--finetune-task', help='Task directory for downstream evaluation of completed runs')
        parser.add_argument('--finetune-descriptor', help='Task descriptor for --finetune-task')
        parser.add_argument('--finetune-config', help='Fine-tuning config file')
        parser.add_argument('--finetune-seeds', default='0,1', help='Seeds for downstream evaluation')

    def handle(self, *args, **options):
        out = resolve_run_dir(options['out'])
        try:
            plan = load_sweep_plan(options['spec'])
            downstream = self._downstream(options)
        except RtdforgeError as e:
            raise command_error('Invalid sweep spec', e)

        labels = ', '.join(size_label(m) for m in plan.spec.multipliers)
        self.stdout.write(f'Sweeping generator sizes: {labels}')

        if options['run_async']:
            runs = self._run_async(plan, options, out)
            if downstream is not None:
                for run in runs:
                    if run.status == 'completed':
                        try:
                            run.downstream = downstream(run)
                        except RtdforgeError as e:
                            run.error = f'downstream: {e}'
            write_sweep_summary(out, runs)
        else:
            runs = run_sweep(plan, out, PretrainRunner(options['corpus'], options['vocab']), downstream)

        for run in runs:
            if (Path(run.run_dir) / MANIFEST_NAME).exists():
                RunManifest.record(read_manifest(run.run_dir))

        self.stdout.write(self.style.SUCCESS(f'Sweep finished: {out / "sweep_summary.txt"}'))
        for run in sorted(runs, key=lambda r: r.multiplier):
            line = f'  {size_label(run.multiplier)}: {run.status}, {run.steps_completed} steps'
            if run.error:
                line += f' ({run.error})'
            self.stdout.write(line)

    def _run_async(self, plan, options, out: Path) -> list[SweepRun]:
        from rtdforge.tasks import pretrain_sweep_member_task

        signatures = []
        for multiplier in plan.spec.multipliers:
            model_config, pretrain_config = plan.member(multiplier)
            signatures.append(pretrain_sweep_member_task.s(
                multiplier, asdict(model_config), asdict(pretrain_config),
                str(options['corpus']), str(options['vocab']), str(out / run_label(multiplier)),
            ))
        self.stdout.write(f'Queuing {len(signatures)} sweep members...')
        result = group(signatures).apply_async()
        self.stdout.write(self.style.SUCCESS(f'Sweep group queued: {result.id}'))
        return [SweepRun(**payload) for payload in result.get(disable_sync_subtasks=False)]

    def _downstream(self, options):
        if not options.get('finetune_task'):
            return None
        if not options.get('finetune_descriptor'):
            raise CommandError('--finetune-task needs --finetune-descriptor', returncode=2)
        descriptor = load_task_descriptor(options['finetune_descriptor'])
        config = load_finetune_config(options['finetune_config']) if options.get('finetune_config') \
            else FinetuneConfig()
        seeds = parse_seeds(options['finetune_seeds'])

        def evaluate(run: SweepRun) -> dict[str, float]:
            job = finetune_job(Path(run.run_dir) / 'finetune', options['finetune_task'], descriptor,
                               run.final_checkpoint, options['vocab'], config, seeds,
                               label=run_label(run.multiplier))
            RunManifest.record(job.manifest)
            return {f'{descriptor.name}_{metric}': job.result.mean(metric) for metric in job.result.summary.index}

        return evaluate
