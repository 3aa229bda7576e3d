"""
Bidirectional transformer encoders for the generator and discriminator.

Both encoders read one set of token/position/segment embedding tables; the
generator's output projection is the transpose of the same token table.
Each encoder owns its embedding layer norm, embedding-to-hidden projection
and transformer blocks.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import stats

from rtdforge.exceptions import ConfigError
from rtdforge.services import functional as F
from rtdforge.services.data import SequenceBatch, round_half_up
from rtdforge.services.tensor import ShapeError, Tensor, get_default_dtype, parameter

logger = logging.getLogger('rtdforge')

SHARED_TABLES = ('token', 'position', 'segment')


class SequenceTooLongError(ShapeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = field(default=30522, metadata={'help': "Vocabulary size (BBPE target size)"})
    embedding_size: int = field(default=128, metadata={'help': "Width of the shared embedding tables"})
    hidden_size: int = field(default=256, metadata={'help': "Discriminator hidden width"})
    ffn_size: int = field(default=1024, metadata={'help': "Discriminator FFN inner width"})
    num_layers: int = field(default=12, metadata={'help': "Discriminator transformer blocks"})
    num_heads: int = field(default=4, metadata={'help': "Discriminator attention heads"})
    head_size: int = field(default=64, metadata={'help': "Attention head width"})
    max_positions: int = field(default=512, metadata={'help': "Learned position embeddings"})
    dropout: float = field(default=0.1, metadata={'help': "Hidden dropout rate"})
    attention_dropout: float = field(default=0.1, metadata={'help': "Attention probability dropout rate"})
    generator_multiplier: float = field(default=0.25, metadata={'help': "Generator hidden/FFN/heads multiplier"})
    generator_layer_multiplier: float = field(default=1.0, metadata={'help': "Generator layer-count multiplier"})
    initializer_range: float = field(default=0.02, metadata={'help': "Stddev of the truncated-normal init"})
    layer_norm_epsilon: float = field(default=1e-12, metadata={'help': "Layer norm epsilon"})

    def __post_init__(self):
        for name in ('vocab_size', 'embedding_size', 'hidden_size', 'ffn_size', 'num_heads', 'head_size', 'max_positions'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be non-negative, got {self.num_layers}")
        if self.hidden_size != self.num_heads * self.head_size:
            raise ConfigError(
                f"hidden_size ({self.hidden_size}) must equal num_heads x head_size "
                f"({self.num_heads} x {self.head_size})"
            )
        if not 0.0 < self.generator_multiplier <= 1.0:
            raise ConfigError(f"generator_multiplier must be in (0, 1], got {self.generator_multiplier}")
        if self.generator_layer_multiplier <= 0:
            raise ConfigError(f"generator_layer_multiplier must be positive, got {self.generator_layer_multiplier}")
        for name in ('dropout', 'attention_dropout'):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        self.generator_dims()

    @classmethod
    def from_dict(cls, values: dict) -> 'ModelConfig':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)

    def discriminator_dims(self) -> 'EncoderDims':
        return EncoderDims(self.hidden_size, self.ffn_size, self.num_heads, self.head_size, self.num_layers)

    def generator_dims(self) -> 'EncoderDims':
        g = self.generator_multiplier
        hidden = round_half_up(g * self.hidden_size)
        heads = max(1, round_half_up(g * self.num_heads))
        if hidden < 1 or hidden % heads:
            raise ConfigError(
                f"Generator hidden size {hidden} is not divisible by {heads} heads at multiplier {g}"
            )
        layers = round_half_up(self.generator_layer_multiplier * self.num_layers)
        if self.num_layers > 0:
            layers = max(1, layers)
        return EncoderDims(
            hidden_size=hidden,
            ffn_size=max(1, round_half_up(g * self.ffn_size)),
            num_heads=heads,
            head_size=hidden // heads,
            num_layers=layers,
        )


@dataclass(frozen=True)
class EncoderDims:
    hidden_size: int
    ffn_size: int
    num_heads: int
    head_size: int
    num_layers: int


class Initializer:
    """Truncated normal (two standard deviations) for matrices, zeros/ones for biases and gains."""

    def __init__(self, rng: np.random.Generator, std: float, dtype=None):
        self.rng = rng
        self.std = std
        self.dtype = dtype or get_default_dtype()

    def normal(self, name: str, *shape: int) -> Tensor:
        values = stats.truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=self.std, size=shape, random_state=self.rng)
        return parameter(values, name=name, dtype=self.dtype)

    def zeros(self, name: str, *shape: int) -> Tensor:
        return parameter(np.zeros(shape), name=name, dtype=self.dtype)

    def ones(self, name: str, *shape: int) -> Tensor:
        return parameter(np.ones(shape), name=name, dtype=self.dtype)


class SharedEmbeddings:
    """One storage per table, read by every encoder built on top of it."""

    def __init__(self, config: ModelConfig, init: Initializer):
        self.config = config
        self.token = init.normal('embeddings.token', config.vocab_size, config.embedding_size)
        self.position = init.normal('embeddings.position', config.max_positions, config.embedding_size)
        self.segment = init.normal('embeddings.segment', 2, config.embedding_size)

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"embeddings.{table}": getattr(self, table) for table in SHARED_TABLES}

    def lookup(self, batch: SequenceBatch) -> Tensor:
        length = batch.shape[1]
        if length > self.config.max_positions:
            raise SequenceTooLongError(
                f"Sequence length {length} exceeds max_positions {self.config.max_positions}"
            )
        summed = F.embedding_lookup(self.token, batch.ids) + F.embedding_lookup(self.position, np.arange(length))
        return summed + F.embedding_lookup(self.segment, batch.segment_ids)


class Encoder:
    """
    Embedding layer norm, optional projection to hidden width, then
    post-layer-norm transformer blocks with padding keys masked out.
    """

    def __init__(self, prefix: str, dims: EncoderDims, config: ModelConfig,
                 embeddings: SharedEmbeddings, init: Initializer):
        self.prefix = prefix
        self.dims = dims
        self.config = config
        self.embeddings = embeddings
        self.params: dict[str, Tensor] = {}
        for name, shape in self.parameter_shapes(prefix, dims, config).items():
            if name.endswith('.gain'):
                self.params[name] = init.ones(name, *shape)
            elif name.endswith('.bias'):
                self.params[name] = init.zeros(name, *shape)
            else:
                self.params[name] = init.normal(name, *shape)

    @staticmethod
    def parameter_shapes(prefix: str, dims: EncoderDims, config: ModelConfig) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in construction order."""
        emb, hidden, ffn = config.embedding_size, dims.hidden_size, dims.ffn_size
        shapes = {
            'embedding_norm.gain': (emb,),
            'embedding_norm.bias': (emb,),
        }
        if emb != hidden:
            shapes['embedding_projection.weight'] = (emb, hidden)
            shapes['embedding_projection.bias'] = (hidden,)
        for i in range(dims.num_layers):
            for proj in ('query', 'key', 'value', 'output'):
                shapes[f'layers.{i}.attention.{proj}.weight'] = (hidden, hidden)
                shapes[f'layers.{i}.attention.{proj}.bias'] = (hidden,)
            shapes[f'layers.{i}.attention_norm.gain'] = (hidden,)
            shapes[f'layers.{i}.attention_norm.bias'] = (hidden,)
            shapes[f'layers.{i}.ffn.inner.weight'] = (hidden, ffn)
            shapes[f'layers.{i}.ffn.inner.bias'] = (ffn,)
            shapes[f'layers.{i}.ffn.outer.weight'] = (ffn, hidden)
            shapes[f'layers.{i}.ffn.outer.bias'] = (hidden,)
            shapes[f'layers.{i}.ffn_norm.gain'] = (hidden,)
            shapes[f'layers.{i}.ffn_norm.bias'] = (hidden,)
        return {f"{prefix}.{suffix}": shape for suffix, shape in shapes.items()}

    def _p(self, suffix: str) -> Tensor:
        return self.params[f"{self.prefix}.{suffix}"]

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def encode(self, batch: SequenceBatch, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.config
        x = F.layer_norm(self.embeddings.lookup(batch), self._p('embedding_norm.gain'),
                         self._p('embedding_norm.bias'), cfg.layer_norm_epsilon)
        x = F.dropout(x, cfg.dropout, rng, training)
        if cfg.embedding_size != self.dims.hidden_size:
            x = F.linear(x, self._p('embedding_projection.weight'), self._p('embedding_projection.bias'))

        key_bias = np.where(batch.attention_mask[:, None, None, :] == 1, 0.0, -np.inf).astype(x.dtype)
        for i in range(self.dims.num_layers):
            attended = self._attention(i, x, key_bias, training, rng)
            x = F.layer_norm(x + attended, self._p(f'layers.{i}.attention_norm.gain'),
                             self._p(f'layers.{i}.attention_norm.bias'), cfg.layer_norm_epsilon)
            inner = F.gelu(F.linear(x, self._p(f'layers.{i}.ffn.inner.weight'), self._p(f'layers.{i}.ffn.inner.bias')))
            outer = F.linear(inner, self._p(f'layers.{i}.ffn.outer.weight'), self._p(f'layers.{i}.ffn.outer.bias'))
            outer = F.dropout(outer, cfg.dropout, rng, training)
            x = F.layer_norm(x + outer, self._p(f'layers.{i}.ffn_norm.gain'),
                             self._p(f'layers.{i}.ffn_norm.bias'), cfg.layer_norm_epsilon)
        return x

    def _attention(self, i: int, x: Tensor, key_bias: np.ndarray, training: bool, rng) -> Tensor:
        batch, length, _ = x.shape
        heads, width = self.dims.num_heads, self.dims.head_size

        def split_heads(t: Tensor) -> Tensor:
            return t.reshape(batch, length, heads, width).transpose(0, 2, 1, 3)

        def project(name: str) -> Tensor:
            return F.linear(x, self._p(f'layers.{i}.attention.{name}.weight'),
                            self._p(f'layers.{i}.attention.{name}.bias'))

        query, key, value = split_heads(project('query')), split_heads(project('key')), split_heads(project('value'))
        scores = (query @ key.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(width)) + key_bias
        probs = F.dropout(F.softmax(scores, axis=-1), self.config.attention_dropout, rng, training)
        context = (probs @ value).transpose(0, 2, 1, 3).reshape(batch, length, heads * width)
        out = F.linear(context, self._p(f'layers.{i}.attention.output.weight'),
                       self._p(f'layers.{i}.attention.output.bias'))
        return F.dropout(out, self.config.dropout, rng, training)


class ElectraModel:
    """
    Generator and discriminator over shared embeddings.

    ``rng`` seeds initialization and is the default dropout generator;
    forward calls may pass their own generator instead.
    """

    # Alternative names under which the shared tables are read.
    ALIASES = {
        'generator.embeddings.token': 'embeddings.token',
        'generator.embeddings.position': 'embeddings.position',
        'generator.embeddings.segment': 'embeddings.segment',
        'discriminator.embeddings.token': 'embeddings.token',
        'discriminator.embeddings.position': 'embeddings.position',
        'discriminator.embeddings.segment': 'embeddings.segment',
        'generator.head.output_embedding': 'embeddings.token',
    }

    def __init__(self, config: ModelConfig, rng: np.random.Generator | int | None = 0):
        self.config = config
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        init = Initializer(self.rng, config.initializer_range)
        self.embeddings = SharedEmbeddings(config, init)
        self.discriminator = Encoder('discriminator', config.discriminator_dims(), config, self.embeddings, init)
        self.generator = Encoder('generator', config.generator_dims(), config, self.embeddings, init)

        gen_hidden, emb = self.generator.dims.hidden_size, config.embedding_size
        self.head_params: dict[str, Tensor] = {
            'generator.head.dense.weight': init.normal('generator.head.dense.weight', gen_hidden, emb),
            'generator.head.dense.bias': init.zeros('generator.head.dense.bias', emb),
            'generator.head.norm.gain': init.ones('generator.head.norm.gain', emb),
            'generator.head.norm.bias': init.zeros('generator.head.norm.bias', emb),
            'generator.head.output_bias': init.zeros('generator.head.output_bias', config.vocab_size),
            'discriminator.head.weight': init.normal('discriminator.head.weight', config.hidden_size, 1),
            'discriminator.head.bias': init.zeros('discriminator.head.bias', 1),
        }
        logger.debug(
            f"Built ElectraModel: discriminator {self.discriminator.dims}, generator {self.generator.dims}"
        )

    def named_parameters(self, include_generator: bool = True) -> dict[str, Tensor]:
        named = self.embeddings.named_parameters()
        named.update(self.discriminator.named_parameters())
        named['discriminator.head.weight'] = self.head_params['discriminator.head.weight']
        named['discriminator.head.bias'] = self.head_params['discriminator.head.bias']
        if include_generator:
            named.update(self.generator.named_parameters())
            named.update({k: v for k, v in self.head_params.items() if k.startswith('generator.')})
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def count_parameters(self, include_generator: bool = True) -> int:
        """Distinct storages only; the shared tables count once."""
        unique = {id(p.data): p.size for p in self.named_parameters(include_generator).values()}
        return int(sum(unique.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: param.data for name, param in self.named_parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into the existing storages so tied readers see the update."""
        own = self.named_parameters()
        arrays = {self.ALIASES.get(name, name): value for name, value in arrays.items()}
        missing = [name for name in own if name not in arrays]
        if strict and missing:
            raise ShapeError(f"State is missing tensors: {missing}")
        for name, param in own.items():
            if name not in arrays:
                continue
            value = np.asarray(arrays[name])
            if value.shape != param.shape:
                raise ShapeError(f"Tensor {name}: expected shape {param.shape}, got {value.shape}")
            param.data[...] = value

    def generator_logits(self, batch: SequenceBatch, training: bool = False,
                         rng: np.random.Generator | None = None, positions: np.ndarray | None = None) -> Tensor:
        """
        Vocabulary logits, [B, L, V], or [M, V] for the M positions selected
        by a boolean ``positions`` mask.
        """
        hidden = self.generator.encode(batch, training, self.rng if rng is None else rng)
        if positions is not None:
            hidden = hidden[np.asarray(positions, dtype=bool)]
        p = self.head_params
        h = F.gelu(F.linear(hidden, p['generator.head.dense.weight'], p['generator.head.dense.bias']))
        h = F.layer_norm(h, p['generator.head.norm.gain'], p['generator.head.norm.bias'], self.config.layer_norm_epsilon)
        return h @ self.embeddings.token.T + p['generator.head.output_bias']

    def discriminator_logits(self, batch: SequenceBatch, training: bool = False,
                             rng: np.random.Generator | None = None) -> Tensor:
        hidden = self.discriminator.encode(batch, training, self.rng if rng is None else rng)
        logits = F.linear(hidden, self.head_params['discriminator.head.weight'],
                          self.head_params['discriminator.head.bias'])
        return logits.reshape(batch.shape)
