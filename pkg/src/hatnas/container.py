"""Versioned binary container shared by checkpoints and predictor files.

Layout (all integers little-endian)::

    magic        7 ASCII bytes (e.g. b"HATCKPT")
    version      u8
    meta_len     u32, then meta_len bytes of UTF-8 JSON
    n_blocks     u32
    per block:
        name_len u16, name (UTF-8)
        kind     u8   0 = float32 values, 1 = k-means codes, 2 = float64 values
        rank     u8, then rank x u32 dims
        kind 0/2: prod(dims) raw values
        kind 1:   bits u8, codebook_len u16, codebook float32[codebook_len],
                  ceil(prod(dims) * bits / 8) bytes of packed codes (MSB first)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

VERSION = 1
RAW32, CODES, RAW64 = 0, 1, 2


class ArtifactError(ValueError):
    """Missing, truncated, or mismatched artifact file."""


@dataclass
class CodedBlock:
    bits: int
    codebook: np.ndarray
    codes: np.ndarray          # integer codes, original shape


Block = Union[np.ndarray, CodedBlock]


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    flat = np.asarray(codes, dtype=np.uint8).reshape(-1, 1)
    bitplanes = np.unpackbits(flat, axis=1)[:, 8 - bits:]
    return np.packbits(bitplanes.reshape(-1)).tobytes()


def unpack_codes(raw: bytes, bits: int, count: int) -> np.ndarray:
    allbits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:count * bits].reshape(count, bits)
    padded = np.zeros((count, 8), dtype=np.uint8)
    padded[:, 8 - bits:] = allbits
    return np.packbits(padded, axis=1).reshape(-1)


def block_header_bytes(name: str, rank: int) -> int:
    return 2 + len(name.encode()) + 1 + 1 + 4 * rank


def block_bytes(name: str, block: Block, float_bytes: int = 4) -> int:
    """Serialized size of one block."""
    if isinstance(block, CodedBlock):
        n = block.codes.size
        return (block_header_bytes(name, block.codes.ndim) + 1 + 2 + 4 * len(block.codebook)
                + (n * block.bits + 7) // 8)
    return block_header_bytes(name, block.ndim) + float_bytes * block.size


def write_container(path: str | Path, magic: bytes, meta: dict, blocks: dict[str, Block],
                    float64: bool = False) -> None:
    if len(magic) != 7:
        raise ValueError("magic must be 7 bytes")
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    out = [magic, struct.pack("<B", VERSION), struct.pack("<I", len(meta_raw)), meta_raw,
           struct.pack("<I", len(blocks))]
    for name, block in blocks.items():
        nm = name.encode()
        out.append(struct.pack("<H", len(nm)) + nm)
        if isinstance(block, CodedBlock):
            shape = block.codes.shape
            out.append(struct.pack("<BB", CODES, len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
            out.append(struct.pack("<BH", block.bits, len(block.codebook)))
            out.append(np.asarray(block.codebook, dtype="<f4").tobytes())
            out.append(pack_codes(block.codes, block.bits))
        else:
            arr = np.asarray(block)
            kind, dt = (RAW64, "<f8") if float64 else (RAW32, "<f4")
            out.append(struct.pack("<BB", kind, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(out))


def read_container(path: str | Path, magic: bytes) -> tuple[dict, dict[str, Block]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ArtifactError(f"{path}: cannot read ({exc}); expected {magic.decode()} v{VERSION}") from None
    if raw[:7] != magic or len(raw) < 8 or raw[7] != VERSION:
        raise ArtifactError(f"{path}: expected magic {magic.decode()} version {VERSION}, "
                            f"found {raw[:7]!r} version {raw[7] if len(raw) > 7 else None}")
    try:
        pos = 8
        (mlen,) = struct.unpack_from("<I", raw, pos); pos += 4
        meta = json.loads(raw[pos:pos + mlen].decode()); pos += mlen
        (nblocks,) = struct.unpack_from("<I", raw, pos); pos += 4
        blocks: dict[str, Block] = {}
        for _ in range(nblocks):
            (nlen,) = struct.unpack_from("<H", raw, pos); pos += 2
            name = raw[pos:pos + nlen].decode(); pos += nlen
            kind, rank = struct.unpack_from("<BB", raw, pos); pos += 2
            shape = struct.unpack_from(f"<{rank}I", raw, pos); pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if kind in (RAW32, RAW64):
                dt, width = ("<f4", 4) if kind == RAW32 else ("<f8", 8)
                if pos + width * count > len(raw):
                    raise ArtifactError(f"{path}: truncated block {name}")
                arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos).astype(np.float64)
                pos += width * count
                blocks[name] = arr.reshape(shape)
            elif kind == CODES:
                bits, clen = struct.unpack_from("<BH", raw, pos); pos += 3
                codebook = np.frombuffer(raw, dtype="<f4", count=clen, offset=pos).astype(np.float64)
                pos += 4 * clen
                nbytes = (count * bits + 7) // 8
                codes = unpack_codes(raw[pos:pos + nbytes], bits, count).reshape(shape)
                pos += nbytes
                blocks[name] = CodedBlock(bits, codebook, codes)
            else:
                raise ArtifactError(f"{path}: unknown block kind {kind} for {name}")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: corrupt {magic.decode()} file ({exc})") from None
    if pos != len(raw):
        raise ArtifactError(f"{path}: {len(raw) - pos} trailing bytes")
    return meta, blocks
