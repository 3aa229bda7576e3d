from django.core.management.base import BaseCommand, CommandError

from rtdforge.exceptions import COLLAPSE_EXIT_CODE, RtdforgeError
from rtdforge.management.commands._common import command_error, resolve_run_dir
from rtdforge.models import RunManifest
from rtdforge.services.config_loader import load_pretrain_config
from rtdforge.services.runs import pretrain_job, read_manifest


class Command(BaseCommand):
    help = 'Run replaced-token-detection pretraining into a run directory'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Model + pretraining config file')
        parser.add_argument('--corpus', required=True, help='UTF-8 corpus, documents separated by blank lines')
        parser.add_argument('--vocab', required=True, help='Vocab file from train_tokenizer')
        parser.add_argument('--out', required=True, help='Run directory (relative paths under RTDFORGE_RUNS_DIR)')
        parser.add_argument('--resume', help='Checkpoint to resume from')

    def handle(self, *args, **options):
        out = resolve_run_dir(options['out'])
        try:
            model_config, config = load_pretrain_config(options['config'])
        except RtdforgeError as e:
            raise command_error('Invalid config', e)

        self.stdout.write(f"Pretraining for {config.total_steps} steps into {out}...")
        try:
            result, manifest = pretrain_job(out, options['corpus'], options['vocab'], model_config, config,
                                            resume_from=options.get('resume'))
        except (RtdforgeError, ValueError, ArithmeticError) as e:
            if (out / 'manifest.json').exists():
                RunManifest.record(read_manifest(out))
            raise command_error('Pretraining failed', e)
        RunManifest.record(manifest)

        last = result.last_record
        self.stdout.write(f"  Steps completed: {result.steps_completed}")
        if last is not None:
            self.stdout.write(f"  Final disc AUC: {last.disc_auc:.4f}")
            self.stdout.write(f"  Final gen accuracy: {last.gen_acc:.4f}")
        self.stdout.write(f"  Checkpoint: {result.final_checkpoint}")
        if result.status == 'collapsed':
            raise CommandError(
                f"Discriminator collapsed at step {result.monitor.tripped_at} "
                f"(mean AUC {result.monitor.window_mean:.4f}); run halted",
                returncode=COLLAPSE_EXIT_CODE,
            )
        self.stdout.write(self.style.SUCCESS('Pretraining completed successfully!'))
