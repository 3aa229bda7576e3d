"""
Versioned binary checkpoint container.

Layout: the magic line ``rtdforge-ckpt v1``, a little-endian u32 length and
a UTF-8 JSON header (model config, alias records, extra run state, tensor
count), then each tensor as (u32 name length, name, u32 rank, u32 dims...,
little-endian float32 data).
"""
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rtdforge.exceptions import CheckpointError, ConfigError
from rtdforge.services.transformer import ModelConfig

logger = logging.getLogger('rtdforge')

MAGIC = b'rtdforge-ckpt v1\n'
_U32 = struct.Struct('<I')


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    aliases: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        start = f"{prefix}/"
        return {name[len(start):]: value for name, value in self.tensors.items() if name.startswith(start)}

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {name: value for name, value in self.tensors.items() if '/' not in name}


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> Path:
    """Write atomically: a crash mid-write never leaves a truncated file at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({
        'model_config': checkpoint.model_config.to_dict(),
        'aliases': checkpoint.aliases,
        'extra': checkpoint.extra,
        'tensor_count': len(checkpoint.tensors),
    }, sort_keys=True).encode('utf-8')

    tmp_path = path.with_name(path.name + '.tmp')
    with open(tmp_path, 'wb') as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(len(header)))
        fh.write(header)
        for name, value in checkpoint.tensors.items():
            encoded = name.encode('utf-8')
            array = np.ascontiguousarray(value, dtype='<f4')
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(array.ndim))
            for dim in array.shape:
                fh.write(_U32.pack(dim))
            fh.write(array.tobytes())
    os.replace(tmp_path, path)
    logger.info(f"Wrote checkpoint {path} ({len(checkpoint.tensors)} tensors)")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if not blob.startswith(MAGIC):
        first_line = blob.split(b'\n', 1)[0][:40]
        raise CheckpointError(f"{path}: unsupported checkpoint header {first_line!r}, expected {MAGIC.strip()!r}")

    offset = len(MAGIC)

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint at byte {offset}")
        chunk = blob[offset:offset + size]
        offset += size
        return chunk

    def take_u32() -> int:
        return _U32.unpack(take(4))[0]

    try:
        header = json.loads(take(take_u32()).decode('utf-8'))
        model_config = ModelConfig.from_dict(header['model_config'])
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint header: {e}") from e

    tensors: dict[str, np.ndarray] = {}
    for _ in range(int(header.get('tensor_count', 0))):
        name = take(take_u32()).decode('utf-8')
        shape = tuple(take_u32() for _ in range(take_u32()))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype='<f4').reshape(shape).astype(np.float32)
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after last tensor")

    return Checkpoint(model_config, tensors, header.get('aliases', {}), header.get('extra', {}))


def file_digest(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()
