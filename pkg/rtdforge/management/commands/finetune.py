from django.conf import settings
from django.core.management.base import BaseCommand

from rtdforge.exceptions import RtdforgeError
from rtdforge.management.commands._common import command_error, parse_seeds, resolve_run_dir
from rtdforge.models import RunManifest
from rtdforge.services.config_loader import load_finetune_config, load_task_descriptor
from rtdforge.services.finetune import FinetuneConfig
from rtdforge.services.runs import finetune_job, read_manifest


class Command(BaseCommand):
    help = 'Fine-tune a pretrained discriminator on one task over several seeds'

    def add_arguments(self, parser):
        parser.add_argument('--task', required=True, help='Task directory with train.tsv and dev.tsv')
        parser.add_argument('--descriptor', required=True, help='Task descriptor config file')
        parser.add_argument('--checkpoint', required=True, help='Pretraining checkpoint')
        parser.add_argument('--vocab', required=True, help='Vocab file used for pretraining')
        parser.add_argument('--seeds', default='0,1,2,3,4', help='Comma-separated seeds (at least two)')
        parser.add_argument('--out', required=True, help='Run directory (relative paths under RTDFORGE_RUNS_DIR)')
        parser.add_argument('--config', help='Fine-tuning config file (defaults otherwise)')
        parser.add_argument('--label', default='', help='Model name in result records')
        parser.add_argument(
            '--workers',
            type=int,
            default=settings.RTDFORGE_THREADS,
            help='Seeds fine-tuned concurrently',
        )

    def handle(self, *args, **options):
        out = resolve_run_dir(options['out'])
        seeds = parse_seeds(options['seeds'])
        try:
            descriptor = load_task_descriptor(options['descriptor'])
            config = load_finetune_config(options['config']) if options.get('config') else FinetuneConfig()
        except RtdforgeError as e:
            raise command_error('Invalid config', e)

        self.stdout.write(f"Fine-tuning {descriptor.name} with seeds {seeds}...")
        try:
            job = finetune_job(out, options['task'], descriptor, options['checkpoint'], options['vocab'],
                               config, seeds, label=options['label'], workers=options['workers'])
        except (RtdforgeError, ValueError, ArithmeticError) as e:
            if (out / 'manifest.json').exists():
                RunManifest.record(read_manifest(out))
            raise command_error('Fine-tuning failed', e)
        RunManifest.record(job.manifest)

        self.stdout.write(self.style.SUCCESS('Fine-tuning completed successfully!'))
        for metric in job.result.summary.index:
            self.stdout.write(f"  {metric}: {job.result.mean(metric):.2f} ± {job.result.std(metric):.2f}")
        self.stdout.write(f"  Records: {len(job.record_paths)}")
        self.stdout.write(f"  Summary: {job.summary_path}")
