# contextualizer/checkpoint.py
"""TCK1 checkpoint container.

Little-endian layout:
    magic "TCK1" | u16 version
    u32 header length | header (canonical JSON: sorted keys, no whitespace)
    u32 tensor count
    per tensor: u16 name length | name | u8 dtype code | u8 rank | u32 extents | u64 payload offset
    payload (tensors back to back)
    u32 CRC32 of every preceding byte

The header carries the model config plus run metadata. Dtype code 0 is
float32 (exported models), 1 is float64 (resumable training state).
"""
import hashlib
import json
import logging
import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from contextualizer.config import ModelConfig
from contextualizer.params import params_from_arrays
from ticon_lab.exceptions import FormatError

logger = logging.getLogger(__name__)

MAGIC = b'TCK1'
VERSION = 1
DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}
DTYPE_CODES = {'f32': 0, 'f64': 1}

_START = struct.Struct('<4sH')
_U32 = struct.Struct('<I')
_U16 = struct.Struct('<H')
_KIND = struct.Struct('<BB')
_U64 = struct.Struct('<Q')


def canonical_json(data):
    return json.dumps(data, sort_keys=True, separators=(',', ':'))


def encode_checkpoint(header, arrays, dtype='f32'):
    code = DTYPE_CODES[dtype]
    np_dtype = DTYPES[code]
    header_bytes = canonical_json(header).encode('utf-8')
    parts = [_START.pack(MAGIC, VERSION), _U32.pack(len(header_bytes)), header_bytes, _U32.pack(len(arrays))]
    payload = []
    offset = 0
    for name, array in arrays.items():
        array = np.ascontiguousarray(array, dtype=np_dtype)
        name_bytes = name.encode('utf-8')
        parts += [_U16.pack(len(name_bytes)), name_bytes, _KIND.pack(code, array.ndim)]
        parts.append(struct.pack(f'<{array.ndim}I', *array.shape))
        parts.append(_U64.pack(offset))
        raw = array.tobytes()
        payload.append(raw)
        offset += len(raw)
    body = b''.join(parts + payload)
    return body + _U32.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, fmt, what):
        if not isinstance(fmt, struct.Struct):
            fmt = struct.Struct(fmt)
        if self.pos + fmt.size > len(self.data):
            raise FormatError(f'checkpoint truncated in {what}', offset=self.pos)
        values = fmt.unpack_from(self.data, self.pos)
        self.pos += fmt.size
        return values

    def raw(self, size, what):
        if self.pos + size > len(self.data):
            raise FormatError(f'checkpoint truncated in {what}', offset=self.pos)
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk


def decode_checkpoint(data):
    """(header dict, OrderedDict of float64 arrays) from TCK1 bytes."""
    if len(data) < _START.size + _U32.size:
        raise FormatError('checkpoint too short', offset=0)
    body, (crc,) = data[:-4], _U32.unpack_from(data, len(data) - 4)
    reader = _Reader(body)
    magic, version = reader.take(_START, 'preamble')
    if magic != MAGIC:
        raise FormatError(f'bad checkpoint magic {magic!r}', offset=0)
    if version != VERSION:
        raise FormatError(f'unsupported checkpoint version {version}', offset=4)
    (header_len,) = reader.take(_U32, 'header length')
    header_at = reader.pos
    try:
        header = json.loads(reader.raw(header_len, 'header').decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f'unreadable checkpoint header: {exc}', offset=header_at) from exc
    (count,) = reader.take(_U32, 'tensor count')
    manifest = []
    for _ in range(count):
        (name_len,) = reader.take(_U16, 'tensor name length')
        name_at = reader.pos
        try:
            name = reader.raw(name_len, 'tensor name').decode('utf-8')
        except UnicodeDecodeError as exc:
            raise FormatError(f'unreadable tensor name: {exc}', offset=name_at) from exc
        code_at = reader.pos
        code, rank = reader.take(_KIND, 'tensor kind')
        if code not in DTYPES:
            raise FormatError(f'unknown dtype code {code} for {name}', offset=code_at)
        extents = reader.take(f'<{rank}I', 'tensor extents')
        (offset,) = reader.take(_U64, 'tensor offset')
        manifest.append((name, DTYPES[code], tuple(extents), offset))
    payload_at = reader.pos
    arrays = OrderedDict()
    expected = 0
    for name, dtype, shape, offset in manifest:
        if offset != expected:
            raise FormatError(f'tensor {name} payload offset {offset}, expected {expected}', offset=payload_at + offset)
        size = int(np.prod(shape)) * dtype.itemsize
        if payload_at + offset + size > len(body):
            raise FormatError(f'payload for {name} is short', offset=payload_at + offset)
        chunk = body[payload_at + offset:payload_at + offset + size]
        arrays[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).astype(np.float64)
        expected += size
    if payload_at + expected != len(body):
        raise FormatError('trailing bytes after checkpoint payload', offset=payload_at + expected)
    if zlib.crc32(body) != crc:
        raise FormatError('checkpoint CRC mismatch', offset=len(body))
    return header, arrays


def save_checkpoint(path, header, arrays, dtype='f32'):
    """Write atomically; returns the file's SHA-256 hex digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(header, arrays, dtype=dtype)
    tmp = path.with_suffix(path.suffix + '.tmp')
    tmp.write_bytes(data)
    os.replace(tmp, path)
    logger.info('wrote checkpoint %s (%d tensors, %d bytes)', path, len(arrays), len(data))
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FormatError(f'no checkpoint at {path}')
    return decode_checkpoint(path.read_bytes())


def content_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_model(path, params, **meta):
    """Export a contextualizer as float32; ``meta`` lands in the header."""
    header = {'kind': 'ticon', 'model': params.cfg.as_dict(), 'meta': meta}
    return save_checkpoint(path, header, params.arrays(), dtype='f32')


def model_from_checkpoint(header, arrays):
    if header.get('kind') not in ('ticon', 'ticon-train'):
        raise FormatError(f'checkpoint holds a {header.get("kind")!r}, not a contextualizer')
    cfg = ModelConfig.from_dict(header['model'])
    params = params_from_arrays(cfg, arrays)
    extra = [name for name in arrays if name not in params and not name.startswith('opt.')]
    if extra:
        raise FormatError(f'checkpoint carries tensors its config does not declare: {extra[:3]}')
    return params


def load_model(path):
    """(TiconParams, header meta) from a model or training checkpoint."""
    header, arrays = load_checkpoint(path)
    return model_from_checkpoint(header, arrays), header.get('meta', {})
