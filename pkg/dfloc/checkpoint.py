#!/usr/bin/env python3
"""
Checkpoint - versioned, sectioned, hash-checked training snapshots

Layout (all integers little-endian):

    b"DFLOCKPT" | u32 format version | u32 section count
    per section: u16 name length | name (utf-8) | u64 payload length
                 | 32-byte sha256 of the payload | payload

Sections, in order: config (JSON), params (tensor table), optimizer (tensor
table of first/second moments), state (JSON: step counters, epoch position,
RNG state). JSON is written with sorted keys and tensor tables in sorted
name order, so saving the same snapshot twice gives identical bytes.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .errors import CheckpointError, CheckpointIntegrityError, CheckpointVersionError

logger = logging.getLogger(__name__)

MAGIC = b"DFLOCKPT"
FORMAT_VERSION = 1
SECTIONS = ('config', 'params', 'optimizer', 'state')


@dataclass
class Checkpoint:
    """Everything needed to resume training bit-exactly."""

    config: Dict
    params: Dict[str, np.ndarray]
    moments: Dict[str, np.ndarray] = field(default_factory=dict)
    state: Dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _pack_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    out = [struct.pack('<I', len(tensors))]
    for name in sorted(tensors):
        value = np.ascontiguousarray(tensors[name], dtype='<f8')
        encoded = name.encode('utf-8')
        out.append(struct.pack('<H', len(encoded)))
        out.append(encoded)
        out.append(struct.pack('<B', value.ndim))
        out.append(struct.pack(f'<{value.ndim}Q', *value.shape))
        out.append(value.tobytes())
    return b''.join(out)


class _Reader:
    def __init__(self, data: bytes, section: str):
        self.data = data
        self.pos = 0
        self.section = section

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointIntegrityError(self.section, "truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_tensors(payload: bytes, section: str) -> Dict[str, np.ndarray]:
    reader = _Reader(payload, section)
    (count,) = reader.unpack('<I')
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}Q') if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(reader.take(8 * size), dtype='<f8').reshape(shape).astype(np.float64)
    if reader.pos != len(payload):
        raise CheckpointIntegrityError(section, "trailing bytes after tensor table")
    return tensors


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(',', ':')).encode('utf-8')


def encode(ckpt: Checkpoint) -> bytes:
    payloads = {
        'config': _json_bytes(ckpt.config),
        'params': _pack_tensors(ckpt.params),
        'optimizer': _pack_tensors(ckpt.moments),
        'state': _json_bytes(ckpt.state),
    }
    out = [MAGIC, struct.pack('<II', ckpt.version, len(SECTIONS))]
    for name in SECTIONS:
        payload = payloads[name]
        encoded = name.encode('utf-8')
        out.append(struct.pack('<H', len(encoded)))
        out.append(encoded)
        out.append(struct.pack('<Q', len(payload)))
        out.append(hashlib.sha256(payload).digest())
        out.append(payload)
    return b''.join(out)


def decode(data: bytes) -> Checkpoint:
    """
    Parse checkpoint bytes.

    Raises:
        CheckpointVersionError: the file was written by another format version
        CheckpointIntegrityError: truncated, corrupted or incomplete data; names the section
    """
    header = _Reader(data, 'header')
    if header.take(len(MAGIC)) != MAGIC:
        raise CheckpointIntegrityError('header', "not a dfloc checkpoint")
    version, count = header.unpack('<II')
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")

    payloads: Dict[str, bytes] = {}
    for index in range(count):
        label = SECTIONS[index] if index < len(SECTIONS) else f"#{index}"
        reader = _Reader(data, label)
        reader.pos = header.pos
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8', errors='replace')
        reader.section = name
        (length,) = reader.unpack('<Q')
        digest = reader.take(32)
        payload = reader.take(length)
        if hashlib.sha256(payload).digest() != digest:
            raise CheckpointIntegrityError(name, "hash mismatch")
        payloads[name] = payload
        header.pos = reader.pos
    if header.pos != len(data):
        raise CheckpointIntegrityError('trailer', "unexpected bytes after last section")
    missing: List[str] = [s for s in SECTIONS if s not in payloads]
    if missing:
        raise CheckpointIntegrityError(missing[0], "section missing")

    try:
        config = json.loads(payloads['config'].decode('utf-8'))
    except ValueError as exc:
        raise CheckpointIntegrityError('config', f"invalid JSON: {exc}") from exc
    try:
        state = json.loads(payloads['state'].decode('utf-8'))
    except ValueError as exc:
        raise CheckpointIntegrityError('state', f"invalid JSON: {exc}") from exc
    return Checkpoint(
        config=config,
        params=_unpack_tensors(payloads['params'], 'params'),
        moments=_unpack_tensors(payloads['optimizer'], 'optimizer'),
        state=state,
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write atomically: a crash mid-write leaves the previous file in place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(ckpt)
    tmp = path.with_name(path.name + '.tmp')
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info("saved checkpoint %s (%d bytes, step %s)", path, len(data), ckpt.state.get('step'))
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data)
