"""
Versioned binary checkpoints.

Layout (little-endian):

    magic       8 bytes  b'SELSEGCK'
    version     uint32
    epoch       uint32
    config hash 64 bytes (sha256 hex digest)
    weights     uint32 count, then records
    velocities  uint32 count, then records
    state       uint32 length, then UTF-8 JSON (phase, RNG state)

A record is: uint32 name length, name (UTF-8), uint32 ndim, ndim x uint32
extents, float64 data in row-major order.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import RejectedInputError

MAGIC = b'SELSEGCK'
VERSION = 1


@dataclass
class Checkpoint:
    """
    Weights and optimizer velocities keyed by parameter name, with training state.

    history (per-epoch pandas table) is kept in memory only.
    """
    weights: dict
    velocities: dict = field(default_factory=dict)
    epoch: int = 0
    config_hash: str = '0' * 64
    phase: str = 'pretrain'
    rng_state: dict = field(default_factory=dict)
    history: object = None


def config_hash(config, arch_text=''):
    """sha256 of the canonical YAML dump of a config dict plus the architecture text."""
    text = yaml.dump(config, sort_keys=True) + arch_text
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def _pack_records(records):
    chunks = [struct.pack('<I', len(records))]
    for name in sorted(records):
        data = np.ascontiguousarray(records[name], dtype='<f8')
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)) + encoded)
        chunks.append(struct.pack(f'<I{data.ndim}I', data.ndim, *data.shape))
        chunks.append(data.tobytes())
    return b''.join(chunks)


def _unpack_records(buf, pos):
    (count,), pos = struct.unpack_from('<I', buf, pos), pos + 4
    records = {}
    for _ in range(count):
        (length,) = struct.unpack_from('<I', buf, pos)
        name = buf[pos + 4:pos + 4 + length].decode('utf-8')
        pos += 4 + length
        (ndim,) = struct.unpack_from('<I', buf, pos)
        shape = struct.unpack_from(f'<{ndim}I', buf, pos + 4)
        pos += 4 + 4 * ndim
        size = int(np.prod(shape))
        records[name] = np.frombuffer(buf, dtype='<f8', count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return records, pos


def encode_checkpoint(ckpt):
    header = MAGIC + struct.pack('<II', VERSION, ckpt.epoch) + ckpt.config_hash.encode('ascii')
    weights = {k: getattr(v, 'data', v) for k, v in ckpt.weights.items()}
    state = json.dumps({'phase': ckpt.phase, 'rng': ckpt.rng_state}, sort_keys=True).encode('utf-8')
    return (header + _pack_records(weights) + _pack_records(ckpt.velocities)
            + struct.pack('<I', len(state)) + state)


def decode_checkpoint(buf):
    if buf[:8] != MAGIC:
        raise RejectedInputError('Not a selseg checkpoint')
    version, epoch = struct.unpack_from('<II', buf, 8)
    if version != VERSION:
        raise RejectedInputError(f'Unsupported checkpoint version {version}')
    digest = buf[16:80].decode('ascii')
    weights, pos = _unpack_records(buf, 80)
    velocities, pos = _unpack_records(buf, pos)
    (length,) = struct.unpack_from('<I', buf, pos)
    state = json.loads(buf[pos + 4:pos + 4 + length].decode('utf-8'))
    return Checkpoint(weights=weights, velocities=velocities, epoch=epoch, config_hash=digest,
                      phase=state['phase'], rng_state=state['rng'])


def save_checkpoint(fname, ckpt):
    """Write a checkpoint atomically."""
    tmp = fname + '.tmp'
    with open(tmp, 'wb') as f:
        f.write(encode_checkpoint(ckpt))
    os.replace(tmp, fname)


def load_checkpoint(fname):
    if not os.path.isfile(fname):
        raise RejectedInputError(f'Checkpoint {fname} not found')
    with open(fname, 'rb') as f:
        return decode_checkpoint(f.read())
