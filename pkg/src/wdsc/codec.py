"""Quantization, range coding against integer CDF tables, and the bitstream container.

The coder is a 32-bit carry-less range coder (Subbotin style): bytes leave
the top of ``low`` once the top byte is settled, and when the range gets too
small without the top byte settling, the range is truncated to the next
``BOT`` boundary instead of propagating a carry.

Symbols outside a table's modelled range are coded as the escape bin
followed by an Elias-gamma code of the overshoot, sent as raw binary
decisions through the same coder.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .entropy import CdfTable

TOP = 1 << 24
BOT = 1 << 16
MASK32 = 0xFFFFFFFF


class BitstreamError(ValueError):
    """Malformed, truncated or mismatched bitstream."""


def quantize(v) -> np.ndarray:
    """Round half away from zero to int64."""
    v = np.asarray(getattr(v, "data", v), dtype=np.float64)
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.out = bytearray()

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self.out.append(self.low >> 24)
            self.range = (self.range << 8) & MASK32
            self.low = (self.low << 8) & MASK32

    def encode(self, cum: int, freq: int, total_bits: int):
        r = self.range >> total_bits
        self.low = (self.low + cum * r) & MASK32
        self.range = freq * r
        self._normalize()

    def encode_bit(self, bit: int):
        self.encode(bit, 1, 1)

    def finish(self) -> bytes:
        for _ in range(4):
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & MASK32
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise BitstreamError("truncated range-coded payload")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self.code = ((self.code << 8) | self._byte()) & MASK32
            self.range = (self.range << 8) & MASK32
            self.low = (self.low << 8) & MASK32

    def target(self, total_bits: int) -> int:
        self._r = self.range >> total_bits
        value = ((self.code - self.low) & MASK32) // self._r
        if value >> total_bits:
            raise BitstreamError("corrupt payload: target outside table")
        return value

    def consume(self, cum: int, freq: int):
        self.low = (self.low + cum * self._r) & MASK32
        self.range = freq * self._r
        self._normalize()

    def decode_bit(self) -> int:
        bit = self.target(1)
        self.consume(bit, 1)
        return bit


def _encode_gamma(enc: RangeEncoder, n: int):
    # n >= 1
    nbits = n.bit_length()
    for _ in range(nbits - 1):
        enc.encode_bit(0)
    for i in range(nbits - 1, -1, -1):
        enc.encode_bit((n >> i) & 1)


def _decode_gamma(dec: RangeDecoder) -> int:
    zeros = 0
    while dec.decode_bit() == 0:
        zeros += 1
        if zeros > 62:
            raise BitstreamError("corrupt escape code")
    n = 1
    for _ in range(zeros):
        n = (n << 1) | dec.decode_bit()
    return n


def _table_arrays(tables: Sequence[CdfTable]):
    return [(t.offset, [int(c) for c in t.cdf], t.num_bins, t.precision) for t in tables]


def encode(symbols, tables: Sequence[CdfTable], table_index=None) -> bytes:
    """Range-code integer ``symbols`` (flattened in C order).

    ``table_index`` gives the table for each symbol; by default symbols are
    assumed channel-major with equal counts per table.
    """
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    index = _resolve_index(symbols.size, len(tables), table_index)
    prepared = _table_arrays(tables)
    enc = RangeEncoder()
    for s, t in zip(symbols.tolist(), index.tolist()):
        offset, cdf, nbins, prec = prepared[t]
        b = s - offset
        if 1 <= b <= nbins - 2:
            enc.encode(cdf[b], cdf[b + 1] - cdf[b], prec)
            continue
        esc = 0 if b < 1 else nbins - 1
        enc.encode(cdf[esc], cdf[esc + 1] - cdf[esc], prec)
        _encode_gamma(enc, (1 - b) if b < 1 else (b - (nbins - 2)))
    return enc.finish()


def decode(data: bytes, tables: Sequence[CdfTable], symbol_count: int, table_index=None) -> np.ndarray:
    """Inverse of :func:`encode`; returns a flat int64 array."""
    index = _resolve_index(symbol_count, len(tables), table_index)
    prepared = _table_arrays(tables)
    dec = RangeDecoder(data)
    out = np.empty(symbol_count, dtype=np.int64)
    for i, t in enumerate(index.tolist()):
        offset, cdf, nbins, prec = prepared[t]
        target = dec.target(prec)
        # binary search for the bin containing target
        lo, hi = 0, nbins
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cdf[mid] <= target:
                lo = mid
            else:
                hi = mid
        dec.consume(cdf[lo], cdf[lo + 1] - cdf[lo])
        if lo == 0:
            out[i] = offset + 1 - _decode_gamma(dec)
        elif lo == nbins - 1:
            out[i] = offset + nbins - 2 + _decode_gamma(dec)
        else:
            out[i] = offset + lo
    return out


def _resolve_index(n: int, num_tables: int, table_index) -> np.ndarray:
    if table_index is not None:
        index = np.asarray(table_index, dtype=np.int64).ravel()
        if index.size != n:
            raise ValueError(f"table_index has {index.size} entries for {n} symbols")
        if n and (index.min() < 0 or index.max() >= num_tables):
            raise ValueError("table_index out of range")
        return index
    if num_tables == 0 or n % num_tables:
        raise ValueError(f"{n} symbols cannot be split channel-major over {num_tables} tables")
    return np.repeat(np.arange(num_tables), n // num_tables)


def cross_entropy_bits(symbols, tables: Sequence[CdfTable], table_index=None) -> float:
    """Ideal code length of in-range ``symbols`` under the integer tables."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    index = _resolve_index(symbols.size, len(tables), table_index)
    bits = 0.0
    for t, table in enumerate(tables):
        sel = symbols[index == t] - table.offset
        if sel.size == 0:
            continue
        sel = np.clip(sel, 0, table.num_bins - 1)
        freq = table.cdf[sel + 1] - table.cdf[sel]
        bits += float(np.sum(table.precision - np.log2(freq)))
    return bits


# ---------------------------------------------------------------------------
# container

MAGIC = b"WDSC"
VERSION = 1
VARIANT_FACTORIZED = 0
VARIANT_HYPERPRIOR = 1
_FIXED = struct.Struct("<4sBBHHHHQ")
_CRC = struct.Struct("<I")


@dataclass
class Header:
    variant: int
    lambda_id: int
    image_h: int
    image_w: int
    channels: int
    checkpoint_id: int
    version: int = VERSION


@dataclass
class Bitstream:
    header: Header
    payloads: list[bytes] = field(default_factory=list)

    @property
    def payload_bits(self) -> int:
        return 8 * sum(len(p) for p in self.payloads)


def _payload_count(variant: int) -> int:
    if variant == VARIANT_FACTORIZED:
        return 1
    if variant == VARIANT_HYPERPRIOR:
        return 2
    raise BitstreamError(f"unknown model variant {variant}")


def pack(header: Header, payloads: Sequence[bytes]) -> bytes:
    """Serialize header + payloads.

    Layout (little-endian): magic, version u8, variant u8, lambda_id u16,
    image_h u16, image_w u16, channels u16, checkpoint_id u64, one u32 length
    per payload, CRC-32 of all preceding header bytes, then the payloads.
    """
    if header.version != VERSION:
        raise BitstreamError(f"cannot write version {header.version}")
    if len(payloads) != _payload_count(header.variant):
        raise BitstreamError(f"variant {header.variant} needs {_payload_count(header.variant)} payloads, got {len(payloads)}")
    head = _FIXED.pack(MAGIC, header.version, header.variant, header.lambda_id, header.image_h, header.image_w, header.channels, header.checkpoint_id)
    head += b"".join(struct.pack("<I", len(p)) for p in payloads)
    head += _CRC.pack(zlib.crc32(head))
    return head + b"".join(payloads)


def unpack(data: bytes) -> Bitstream:
    if len(data) < _FIXED.size:
        raise BitstreamError("stream shorter than fixed header")
    magic, version, variant, lambda_id, h, w, channels, ckpt = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise BitstreamError("bad magic")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    count = _payload_count(variant)
    pos = _FIXED.size
    if len(data) < pos + 4 * count + _CRC.size:
        raise BitstreamError("truncated header")
    lengths = struct.unpack_from(f"<{count}I", data, pos)
    pos += 4 * count
    (crc,) = _CRC.unpack_from(data, pos)
    if crc != zlib.crc32(data[:pos]):
        raise BitstreamError("header checksum mismatch")
    pos += _CRC.size
    payloads = []
    for n in lengths:
        if pos + n > len(data):
            raise BitstreamError("payload length overruns stream")
        payloads.append(bytes(data[pos : pos + n]))
        pos += n
    if pos != len(data):
        raise BitstreamError("trailing bytes after payloads")
    return Bitstream(Header(variant, lambda_id, h, w, channels, ckpt, version), payloads)
