from pathlib import Path

import pandas as pd
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from rtdforge.exceptions import RtdforgeError
from rtdforge.management.commands._common import command_error
from rtdforge.services.metrics import (
    AggregationSpec,
    build_report,
    load_published_glue,
    load_result_records,
    render_report,
)


class Command(BaseCommand):
    help = 'Aggregate fine-tuning result records into an AVG or GLUE report table'

    def add_arguments(self, parser):
        parser.add_argument('--results', nargs='*', default=[], help='Result record files or directories')
        parser.add_argument('--mode', choices=['avg', 'glue'], default='glue', help='Aggregate to compute')
        parser.add_argument(
            '--avg-recipe',
            choices=['headline', 'task-score'],
            default='headline',
            help="AVG over one headline metric per task, or over per-task metric means",
        )
        parser.add_argument(
            '--baselines',
            nargs='?',
            const='',
            default=None,
            help='Include published numbers (bundled published_glue.csv unless a path is given)',
        )
        parser.add_argument('--out', required=True, help='Report path; a .csv is written next to it')

    def handle(self, *args, **options):
        if not options['results'] and options['baselines'] is None:
            raise CommandError('Nothing to report: pass --results and/or --baselines', returncode=2)
        spec = AggregationSpec(mode=options['mode'], avg_recipe=options['avg_recipe'])

        try:
            frames = [load_result_records(options['results'])] if options['results'] else []
            reported = None
            if options['baselines'] is not None:
                path = options['baselines'] or settings.RTDFORGE_BASELINES_DIR / 'published_glue.csv'
                published, reported = load_published_glue(path)
                frames.append(published)
            records = pd.concat(frames, ignore_index=True)
            report = build_report(records, spec, reported)
        except (RtdforgeError, OSError) as e:
            raise command_error('Report failed', e)

        out = Path(options['out'])
        out.parent.mkdir(parents=True, exist_ok=True)
        text = render_report(report)
        out.write_text(text + '\n', encoding='utf-8')
        report.to_csv(out.with_suffix('.csv'), index=False)

        self.stdout.write(text)
        self.stdout.write(self.style.SUCCESS(f'Report written to {out}'))
