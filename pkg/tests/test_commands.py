import json
from io import StringIO

import pandas as pd
import pytest
from django.core.management import call_command
from django.core.management.base import CommandError

from rtdforge.models import RunManifest

TINY_CONF = """\
# two-layer model for command tests
vocab_size = 300
embedding_size = 16
hidden_size = 16
ffn_size = 32
num_layers = 2
num_heads = 2
head_size = 8
max_positions = 32
dropout = 0.0
attention_dropout = 0.0
generator_multiplier = 0.5

learning_rate = 1e-3
warmup_steps = 2
total_steps = 6
batch_size = 4
max_seq_len = 24
collapse_window = 3
precision = float64
"""


def run(*args, **options) -> str:
    out = StringIO()
    call_command(*args, stdout=out, **options)
    return out.getvalue()


@pytest.fixture
def tiny_conf(tmp_path):
    path = tmp_path / 'tiny.conf'
    path.write_text(TINY_CONF, encoding='utf-8')
    return path


class TestEstimateCompute:
    """pfs-days from device throughput."""

    def test_estimate(self):
        """Test the one-device, four-day GPU example."""
        output = run('estimate_compute', '--tflops', '15.7', '--devices', '1', '--days', '4')

        assert output.startswith('pfs-days: 0.02 (')

    def test_per_point(self):
        """Test pfs-days per score point."""
        output = run('estimate_compute', '--tflops', '15.7', '--devices', '1', '--days', '4', '--score', '80')

        assert 'pfs-days per point:' in output

    def test_invalid_input(self):
        """Test that a non-positive device count exits with code 2."""
        with pytest.raises(CommandError) as excinfo:
            run('estimate_compute', '--tflops', '15.7', '--devices', '0', '--days', '4')

        assert excinfo.value.returncode == 2

    def test_missing_arguments(self):
        """Test that throughput, devices and days are required without --table."""
        with pytest.raises(CommandError, match='required'):
            run('estimate_compute', '--tflops', '15.7')

    def test_published_table(self):
        """Test the bundled compute table relative to the reproduction row."""
        output = run('estimate_compute', '--table')

        assert 'ELMo' in output
        assert 'pfs_days' in output

    def test_malformed_table(self, tmp_path):
        """Test that a compute table without hardware columns exits with code 3."""
        table = tmp_path / 'compute.csv'
        table.write_text('model,tflops_per_device\nX,15.7\n', encoding='utf-8')

        with pytest.raises(CommandError) as excinfo:
            run('estimate_compute', '--table', str(table))

        assert excinfo.value.returncode == 3


class TestGlueReport:
    """Reports over result records and published numbers."""

    def test_avg_with_baselines(self, tmp_path):
        """Test an AVG report of the published rows written as text and CSV."""
        out = tmp_path / 'report.txt'

        output = run('glue_report', '--mode', 'avg', '--baselines', '--out', str(out))

        assert 'ELMo' in output
        assert out.exists()
        table = pd.read_csv(out.with_suffix('.csv'))
        assert 'AVG' in table.columns

    def test_glue_with_missing_tasks_fails(self, tmp_path):
        """Test that GLUE over rows lacking tasks exits with a data error."""
        with pytest.raises(CommandError) as excinfo:
            run('glue_report', '--mode', 'glue', '--baselines', '--out', str(tmp_path / 'report.txt'))

        assert excinfo.value.returncode == 3

    def test_nothing_to_report(self, tmp_path):
        """Test that neither results nor baselines is a usage error."""
        with pytest.raises(CommandError) as excinfo:
            run('glue_report', '--out', str(tmp_path / 'report.txt'))

        assert excinfo.value.returncode == 2

    @pytest.mark.parametrize('content', [
        'model,cola\nA,50.0\nB,1,2,3\n',
        'model,cola\nA,high\n',
        '',
    ])
    def test_malformed_baselines_table(self, tmp_path, content):
        """Test that an unparseable published table exits with a data error."""
        table = tmp_path / 'published.csv'
        table.write_text(content, encoding='utf-8')

        with pytest.raises(CommandError) as excinfo:
            run('glue_report', '--mode', 'avg', '--baselines', str(table), '--out', str(tmp_path / 'report.txt'))

        assert excinfo.value.returncode == 3


class TestTrainTokenizer:
    """Vocabulary training from the command line."""

    def test_rerun_is_byte_identical(self, tmp_path, corpus_file):
        """Test that training twice on the same corpus writes the same file."""
        first, second = tmp_path / 'a.txt', tmp_path / 'b.txt'

        run('train_tokenizer', '--corpus', str(corpus_file), '--vocab-size', '300', '--out', str(first))
        run('train_tokenizer', '--corpus', str(corpus_file), '--vocab-size', '300', '--out', str(second))

        assert first.read_bytes() == second.read_bytes()

    def test_missing_corpus(self, tmp_path):
        """Test that an unreadable corpus exits with code 3."""
        with pytest.raises(CommandError) as excinfo:
            run('train_tokenizer', '--corpus', str(tmp_path / 'absent.txt'), '--out', str(tmp_path / 'v.txt'))

        assert excinfo.value.returncode == 3


@pytest.mark.django_db
class TestPretrainAndFinetune:
    """Toy runs through the commands, indexed in the database."""

    def test_pretrain(self, tmp_path, tiny_conf, corpus_file, vocab_file, clean_manifests):
        """Test a toy run directory and its manifest row."""
        out = tmp_path / 'run'

        output = run('pretrain', '--config', str(tiny_conf), '--corpus', str(corpus_file),
                     '--vocab', str(vocab_file), '--out', str(out))

        assert 'Steps completed: 6' in output
        assert (out / 'checkpoints' / 'final.ckpt').exists()
        row = RunManifest.objects.get(run_dir=str(out))
        assert (row.command, row.status) == ('pretrain', 'completed')

    def test_invalid_config(self, tmp_path, corpus_file, vocab_file):
        """Test that a config error exits with code 2."""
        conf = tmp_path / 'bad.conf'
        conf.write_text('learning_rat = 1e-3\n', encoding='utf-8')

        with pytest.raises(CommandError) as excinfo:
            run('pretrain', '--config', str(conf), '--corpus', str(corpus_file), '--vocab', str(vocab_file),
                '--out', str(tmp_path / 'run'))

        assert excinfo.value.returncode == 2

    def test_collapse_exit_code(self, tmp_path, tiny_conf, corpus_file, vocab_file, clean_manifests):
        """Test that a halted collapse exits with code 4 and records the status."""
        conf = tmp_path / 'collapse.conf'
        conf.write_text(tiny_conf.read_text(encoding='utf-8') +
                        'collapse_threshold = 1.0\nhalt_on_collapse = true\n', encoding='utf-8')
        out = tmp_path / 'run'

        with pytest.raises(CommandError) as excinfo:
            run('pretrain', '--config', str(conf), '--corpus', str(corpus_file), '--vocab', str(vocab_file),
                '--out', str(out))

        assert excinfo.value.returncode == 4
        assert 'collapsed at step' in str(excinfo.value)
        assert RunManifest.objects.get(run_dir=str(out)).status == 'collapsed'

    def test_finetune(self, tmp_path, tiny_conf, corpus_file, vocab_file, binary_task_dir, clean_manifests):
        """Test two seed records and a summary from a toy checkpoint."""
        run('pretrain', '--config', str(tiny_conf), '--corpus', str(corpus_file), '--vocab', str(vocab_file),
            '--out', str(tmp_path / 'pre'))
        descriptor = tmp_path / 'toy.conf'
        descriptor.write_text('labels = 0, 1\nmetrics = accuracy, mcc\nepochs = 1\nmax_seq_len = 24\n',
                              encoding='utf-8')
        ft_conf = tmp_path / 'ft.conf'
        ft_conf.write_text('learning_rate = 1e-3\nbatch_size = 8\nprecision = float64\n', encoding='utf-8')
        out = tmp_path / 'ft'

        output = run('finetune', '--task', str(binary_task_dir), '--descriptor', str(descriptor),
                     '--checkpoint', str(tmp_path / 'pre' / 'checkpoints' / 'final.ckpt'),
                     '--vocab', str(vocab_file), '--seeds', '0,1', '--config', str(ft_conf),
                     '--label', 'toy-electra', '--out', str(out), '--workers', '1')

        assert 'Records: 2' in output
        assert sorted(p.name for p in (out / 'results').iterdir()) == ['toy-seed0.json', 'toy-seed1.json']
        summary = json.loads((out / 'summary.json').read_text(encoding='utf-8'))
        assert summary['model'] == 'toy-electra'
        assert set(summary['metrics']) == {'accuracy', 'mcc'}
        assert RunManifest.objects.get(run_dir=str(out)).command == 'finetune'

    def test_finetune_bad_seeds(self, tmp_path):
        """Test that malformed seeds exit with code 2."""
        with pytest.raises(CommandError) as excinfo:
            run('finetune', '--task', str(tmp_path), '--descriptor', str(tmp_path / 'd.conf'),
                '--checkpoint', str(tmp_path / 'c.ckpt'), '--vocab', str(tmp_path / 'v.txt'),
                '--seeds', '0,x', '--out', str(tmp_path / 'ft'))

        assert excinfo.value.returncode == 2

    def test_sweep(self, tmp_path, tiny_conf, corpus_file, vocab_file, clean_manifests):
        """Test a two-member sweep with its summary and one row per member."""
        spec = tmp_path / 'sweep.conf'
        spec.write_text(tiny_conf.read_text(encoding='utf-8') + 'multipliers = 0.25, 1.0\n'
                        'halt_on_collapse = false\n', encoding='utf-8')
        out = tmp_path / 'sweep'

        output = run('sweep_generator', '--spec', str(spec), '--corpus', str(corpus_file),
                     '--vocab', str(vocab_file), '--out', str(out))

        assert '25% Gen.Size' in output
        assert (out / 'sweep_summary.txt').exists()
        assert RunManifest.objects.filter(command='sweep_generator').count() == 2
