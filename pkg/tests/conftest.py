import os

import numpy as np
import pytest

# Setup Django settings before importing models
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'config.settings')

SUBJECTS = ['the cat', 'a dog', 'the old man', 'my sister', 'the baker', 'a small bird', 'our neighbor']
VERBS = ['sees', 'likes', 'finds', 'follows', 'paints', 'remembers', 'carries']
OBJECTS = ['the red ball', 'a green box', 'the long river', 'an old book', 'the quiet garden', 'a blue cup']


def make_documents(count: int = 40, seed: int = 0) -> list[str]:
    """Grammatical toy documents: 2-5 subject-verb-object sentences each."""
    rng = np.random.default_rng(seed)
    documents = []
    for _ in range(count):
        sentences = [
            f"{SUBJECTS[rng.integers(len(SUBJECTS))]} {VERBS[rng.integers(len(VERBS))]} "
            f"{OBJECTS[rng.integers(len(OBJECTS))]}."
            for _ in range(rng.integers(2, 6))
        ]
        documents.append(' '.join(sentences))
    return documents


def write_task_split(path, rows, pair: bool = False):
    header = 'sentence1\tsentence2\tlabel' if pair else 'sentence1\tlabel'
    path.write_text('\n'.join([header] + ['\t'.join(map(str, row)) for row in rows]) + '\n', encoding='utf-8')


def sentiment_rows(count: int, seed: int) -> list[tuple[str, int]]:
    """Linearly separable 2-class sentences: the label is carried by one word."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(count):
        label = i % 2
        word = 'wonderful' if label else 'terrible'
        rows.append((f"{SUBJECTS[rng.integers(len(SUBJECTS))]} is {word} today", label))
    return rows


def numeric_gradient(fn, array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of ``array``."""
    base = np.array(array, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        bumped = base.copy()
        bumped[idx] += eps
        plus = fn(bumped)
        bumped[idx] -= 2 * eps
        minus = fn(bumped)
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


@pytest.fixture
def finite_difference():
    return numeric_gradient


@pytest.fixture(scope='session')
def documents():
    return make_documents()


@pytest.fixture
def corpus_file(tmp_path, documents):
    path = tmp_path / 'corpus.txt'
    path.write_text('\n\n'.join(documents) + '\n', encoding='utf-8')
    return path


@pytest.fixture(scope='session')
def tiny_vocab(documents):
    from rtdforge.services.tokenizer import train_vocab
    return train_vocab(documents, 300)


@pytest.fixture
def vocab_file(tmp_path, tiny_vocab):
    from rtdforge.services.tokenizer import save_vocab
    path = tmp_path / 'vocab.txt'
    save_vocab(tiny_vocab, path)
    return path


@pytest.fixture
def tiny_model_config():
    """Two-layer model small enough for exact float64 checks."""
    from rtdforge.services.transformer import ModelConfig
    return ModelConfig(
        vocab_size=300,
        embedding_size=16,
        hidden_size=16,
        ffn_size=32,
        num_layers=2,
        num_heads=2,
        head_size=8,
        max_positions=32,
        dropout=0.0,
        attention_dropout=0.0,
        generator_multiplier=0.5,
    )


@pytest.fixture
def tiny_pretrain_config():
    from rtdforge.services.pretrain import PretrainConfig
    return PretrainConfig(
        learning_rate=1e-3,
        warmup_steps=2,
        total_steps=6,
        batch_size=4,
        max_seq_len=24,
        collapse_window=3,
        log_every=1,
        precision='float64',
    )


@pytest.fixture
def binary_descriptor():
    from rtdforge.services.data import TaskDescriptor
    return TaskDescriptor(name='toy', sentences='single', kind='classification', labels=('0', '1'),
                          metrics=('accuracy', 'mcc'), epochs=2, max_seq_len=24)


@pytest.fixture
def binary_task_dir(tmp_path):
    directory = tmp_path / 'toy_task'
    directory.mkdir()
    write_task_split(directory / 'train.tsv', sentiment_rows(24, seed=1))
    write_task_split(directory / 'dev.tsv', sentiment_rows(12, seed=2))
    return directory


@pytest.fixture
def clean_manifests(db):
    """Empty manifest table for tests that inspect it."""
    from rtdforge.models import RunManifest
    RunManifest.objects.all().delete()
