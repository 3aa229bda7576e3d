from django.conf import settings
from django.core.management.base import BaseCommand

from rtdforge.exceptions import RtdforgeError
from rtdforge.management.commands._common import command_error
from rtdforge.services.data import read_corpus
from rtdforge.services.tokenizer import save_vocab, train_vocab


class Command(BaseCommand):
    help = 'Train a byte-level BPE vocabulary on a corpus and write the vocab file'

    def add_arguments(self, parser):
        parser.add_argument('--corpus', required=True, help='UTF-8 corpus, documents separated by blank lines')
        parser.add_argument(
            '--vocab-size',
            type=int,
            default=settings.RTDFORGE_DEFAULT_VOCAB_SIZE,
            help='Target vocabulary size including special and byte tokens',
        )
        parser.add_argument('--out', required=True, help='Vocab file to write')

    def handle(self, *args, **options):
        self.stdout.write(f"Training tokenizer on {options['corpus']}...")
        try:
            documents = read_corpus(options['corpus'])
            vocab = train_vocab(documents, options['vocab_size'])
            save_vocab(vocab, options['out'])
        except (RtdforgeError, OSError) as e:
            raise command_error('Tokenizer training failed', e)

        self.stdout.write(self.style.SUCCESS(f"Vocabulary written to {options['out']}"))
        self.stdout.write(f"  Vocab size: {len(vocab)}")
        self.stdout.write(f"  Merges: {len(vocab.merges)}")
