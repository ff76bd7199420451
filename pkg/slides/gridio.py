# slides/gridio.py
"""Binary embedding-grid files ("TEG1").

Layout, little-endian: magic "TEG1", u16 version, u32 M, u32 N, u32 d,
u8 encoder-id length + id bytes, i32 origin row, i32 origin col, validity
bitmap (ceil(M*N/8) bytes, row-major, LSB first), M*N*d float32 row-major,
then a u32 CRC32 of every preceding byte.
"""
import struct
import zlib
from pathlib import Path

import numpy as np

from slides.grids import EmbeddingGrid
from ticon_lab.exceptions import FormatError

MAGIC = b'TEG1'
VERSION = 1
_HEAD = struct.Struct('<4sHIII')
_ORIGIN = struct.Struct('<ii')
_CRC = struct.Struct('<I')


def encode_grid(grid):
    encoder_id = grid.encoder_id.encode('utf-8')
    if len(encoder_id) > 255:
        raise FormatError(f'encoder id {grid.encoder_id!r} longer than 255 bytes')
    parts = [
        _HEAD.pack(MAGIC, VERSION, grid.rows, grid.cols, grid.dim),
        bytes([len(encoder_id)]),
        encoder_id,
        _ORIGIN.pack(*grid.origin),
        np.packbits(grid.validity.reshape(-1), bitorder='little').tobytes(),
        grid.embeddings.astype('<f4').tobytes(order='C'),
    ]
    body = b''.join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def decode_grid(blob):
    if len(blob) < _HEAD.size:
        raise FormatError('truncated grid header', offset=len(blob))
    magic, version, rows, cols, dim = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f'bad grid magic {magic!r}', offset=0)
    if version != VERSION:
        raise FormatError(f'unsupported grid version {version}', offset=4)
    offset = _HEAD.size
    if len(blob) < offset + 1:
        raise FormatError('truncated encoder id', offset=offset)
    id_len = blob[offset]
    offset += 1
    if len(blob) < offset + id_len + _ORIGIN.size:
        raise FormatError('truncated encoder id or origin', offset=offset)
    try:
        encoder_id = blob[offset:offset + id_len].decode('utf-8')
    except UnicodeDecodeError as exc:
        raise FormatError(f'unreadable encoder id: {exc}', offset=offset) from exc
    offset += id_len
    origin = _ORIGIN.unpack_from(blob, offset)
    offset += _ORIGIN.size

    bitmap_len = -(-(rows * cols) // 8)
    payload_len = rows * cols * dim * 4
    if len(blob) < offset + bitmap_len:
        raise FormatError('truncated validity bitmap', offset=offset)
    bits = np.frombuffer(blob, dtype=np.uint8, count=bitmap_len, offset=offset)
    validity = np.unpackbits(bits, bitorder='little')[:rows * cols].astype(bool).reshape(rows, cols)
    offset += bitmap_len
    if len(blob) < offset + payload_len + _CRC.size:
        raise FormatError(
            f'payload declares {rows}x{cols}x{dim} floats but the file is too short', offset=offset
        )
    values = np.frombuffer(blob, dtype='<f4', count=rows * cols * dim, offset=offset)
    crc_offset = offset + payload_len
    if len(blob) != crc_offset + _CRC.size:
        raise FormatError('trailing bytes after checksum', offset=crc_offset + _CRC.size)
    (stored_crc,) = _CRC.unpack_from(blob, crc_offset)
    if zlib.crc32(blob[:crc_offset]) != stored_crc:
        raise FormatError('grid checksum mismatch', offset=crc_offset)
    embeddings = values.astype(np.float64).reshape(rows, cols, dim)
    return EmbeddingGrid(encoder_id, embeddings, validity, origin=origin)


def write_grid(grid, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_grid(grid))
    return path


def read_grid(path):
    return decode_grid(Path(path).read_bytes())


def grid_roundtrip(grid, path):
    write_grid(grid, path)
    return read_grid(path)
