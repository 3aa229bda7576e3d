from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from rtdforge.exceptions import RtdforgeError
from rtdforge.management.commands._common import command_error
from rtdforge.services.metrics import (
    DEFAULT_UTILIZATION,
    ComputeEstimate,
    compute_table,
    pfs_days_per_point,
    read_published_table,
)


class Command(BaseCommand):
    help = 'Estimate pretraining compute in pfs-days (and per score point)'

    def add_arguments(self, parser):
        parser.add_argument('--tflops', type=float, help='Theoretical TFLOPS per device')
        parser.add_argument('--devices', type=int, help='Number of devices')
        parser.add_argument('--utilization', type=float, default=DEFAULT_UTILIZATION, help='Utilization rate')
        parser.add_argument('--days', type=float, help='Training days')
        parser.add_argument('--score', type=float, help='AVG or GLUE score for pfs-days per point')
        parser.add_argument(
            '--table',
            nargs='?',
            const='',
            default=None,
            help='Print the published compute table (bundled published_compute.csv unless a path is given)',
        )
        parser.add_argument(
            '--reference',
            default='ELECTRA-Small (reproduction)',
            help='Row the per-point factors are relative to',
        )

    def handle(self, *args, **options):
        if options['table'] is not None:
            self._print_table(options['table'], options['reference'])
            if options['tflops'] is None:
                return

        if None in (options['tflops'], options['devices'], options['days']):
            raise CommandError('--tflops, --devices and --days are required', returncode=2)
        try:
            estimate = ComputeEstimate(options['tflops'], options['devices'], options['days'], options['utilization'])
            pfs = estimate.pfs_days
            per_point = pfs_days_per_point(pfs, options['score']) if options['score'] is not None else None
        except ValueError as e:
            raise CommandError(f'Invalid input: {e}', returncode=2)

        self.stdout.write(f'pfs-days: {pfs:.2f} ({pfs:.4g})')
        if per_point is not None:
            self.stdout.write(f'pfs-days per point: {per_point:.2f} ({per_point:.4g})')

    def _print_table(self, path: str, reference: str):
        try:
            table = read_published_table(path or settings.RTDFORGE_BASELINES_DIR / 'published_compute.csv')
            out = compute_table(table, reference)
        except RtdforgeError as e:
            raise command_error('Compute table failed', e)
        self.stdout.write(out.to_string(index=False, na_rep='', float_format=lambda v: f'{v:.2f}'))
