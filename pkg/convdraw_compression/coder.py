"""Integer arithmetic coder with a 32-bit state and 16-bit frequency tables.

The coder keeps ``low``/``high`` in 32-bit registers and renormalises one bit
at a time. Straddling intervals (the middle-half case) are deferred as
pending bits and released, inverted, after the next decided bit. Bits are
packed most-significant first and the final byte is zero padded.

A finished stream is ``shifts + 2`` bits long before padding, while the
decoder consumes ``32 + shifts`` bits; it therefore reads at most 30 bits
past the end of a valid payload. Anything beyond that means the payload was
cut short.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ContractViolation, CorruptStreamError

LOGGER = logging.getLogger(__name__)

STATE_BITS = 32
FREQ_BITS = 16
FREQ_TOTAL = 1 << FREQ_BITS
FULL_RANGE = 1 << STATE_BITS
HALF_RANGE = FULL_RANGE >> 1
QUARTER_RANGE = HALF_RANGE >> 1
STATE_MASK = FULL_RANGE - 1
MAX_OVERREAD_BITS = STATE_BITS - 2


class FrequencyTable:
    """Integer frequencies of the symbols ``offset .. offset + len(freqs) - 1``."""

    __slots__ = ("freqs", "offset", "cumulative", "total")

    def __init__(self, freqs: Sequence[int] | np.ndarray, offset: int = 0) -> None:
        counts = np.asarray(freqs, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0:
            raise ContractViolation(f"frequency table must be a non-empty vector, got shape {counts.shape}")
        if np.any(counts < 0):
            raise ContractViolation("frequencies must be non-negative")
        self.freqs = counts
        self.offset = int(offset)
        self.cumulative = np.concatenate(([0], np.cumsum(counts)))
        self.total = int(self.cumulative[-1])
        if not 0 < self.total <= FREQ_TOTAL:
            raise ContractViolation(f"frequency total must lie in (0, {FREQ_TOTAL}], got {self.total}")

    def __len__(self) -> int:
        return int(self.freqs.size)

    @property
    def symbols(self) -> range:
        return range(self.offset, self.offset + len(self))

    def frequency(self, symbol: int) -> int:
        index = symbol - self.offset
        if not 0 <= index < len(self):
            return 0
        return int(self.freqs[index])

    def interval(self, symbol: int) -> tuple[int, int]:
        index = symbol - self.offset
        if not 0 <= index < len(self) or self.freqs[index] == 0:
            raise ContractViolation(
                f"symbol {symbol} is outside the table {self.offset}..{self.offset + len(self) - 1} "
                "or has zero frequency"
            )
        return int(self.cumulative[index]), int(self.cumulative[index + 1])

    def lookup(self, value: int) -> int:
        """Symbol whose cumulative interval contains ``value``."""

        index = int(np.searchsorted(self.cumulative, value, side="right")) - 1
        return index + self.offset

    def ideal_bits(self, symbol: int) -> float:
        """Information content −log₂(freq / total) of ``symbol``."""

        freq = self.frequency(symbol)
        if freq == 0:
            return math.inf
        return math.log2(self.total / freq)


PmfProvider = Callable[[int, Sequence[int]], FrequencyTable]


class _BitWriter:
    def __init__(self) -> None:
        self.buffer = bytearray()
        self.current = 0
        self.filled = 0
        self.count = 0

    def write(self, bit: int) -> None:
        self.current = (self.current << 1) | bit
        self.filled += 1
        self.count += 1
        if self.filled == 8:
            self.buffer.append(self.current)
            self.current = 0
            self.filled = 0

    def finish(self) -> bytes:
        if self.filled:
            self.buffer.append(self.current << (8 - self.filled))
            self.current = 0
            self.filled = 0
        return bytes(self.buffer)


class _BitReader:
    def __init__(self, payload: bytes) -> None:
        self.payload = payload
        self.position = 0
        self.limit = 8 * len(payload)

    def read(self) -> int:
        position = self.position
        self.position += 1
        if position >= self.limit:
            if position - self.limit >= MAX_OVERREAD_BITS:
                raise CorruptStreamError(f"payload of {len(self.payload)} bytes exhausted early")
            return 0
        return (self.payload[position >> 3] >> (7 - (position & 7))) & 1


class ArithmeticEncoder:
    def __init__(self) -> None:
        self.low = 0
        self.high = STATE_MASK
        self.pending = 0
        self._bits = _BitWriter()
        self._finished = False

    @property
    def bit_count(self) -> int:
        """Bits committed so far, counting deferred ones."""

        return self._bits.count + self.pending

    def _emit(self, bit: int) -> None:
        self._bits.write(bit)
        for _ in range(self.pending):
            self._bits.write(bit ^ 1)
        self.pending = 0

    def write(self, table: FrequencyTable, symbol: int) -> None:
        if self._finished:
            raise ContractViolation("encoder is already finished")
        sym_low, sym_high = table.interval(symbol)
        span = self.high - self.low + 1
        self.high = self.low + span * sym_high // table.total - 1
        self.low = self.low + span * sym_low // table.total
        while True:
            if self.high < HALF_RANGE:
                self._emit(0)
            elif self.low >= HALF_RANGE:
                self._emit(1)
                self.low -= HALF_RANGE
                self.high -= HALF_RANGE
            elif self.low >= QUARTER_RANGE and self.high < HALF_RANGE + QUARTER_RANGE:
                self.pending += 1
                self.low -= QUARTER_RANGE
                self.high -= QUARTER_RANGE
            else:
                break
            self.low = (self.low << 1) & STATE_MASK
            self.high = ((self.high << 1) & STATE_MASK) | 1

    def finish(self) -> bytes:
        """Two bits select a quarter inside the final interval; then zero padding."""

        if not self._finished:
            self.pending += 1
            self._emit(0 if self.low < QUARTER_RANGE else 1)
            self._finished = True
        return self._bits.finish()


class ArithmeticDecoder:
    def __init__(self, payload: bytes) -> None:
        self._bits = _BitReader(payload)
        self.low = 0
        self.high = STATE_MASK
        self.code = 0
        for _ in range(STATE_BITS):
            self.code = (self.code << 1) | self._bits.read()

    @property
    def consumed_bits(self) -> int:
        return self._bits.position

    def read(self, table: FrequencyTable) -> int:
        span = self.high - self.low + 1
        value = ((self.code - self.low + 1) * table.total - 1) // span
        symbol = table.lookup(value)
        sym_low, sym_high = table.interval(symbol)
        self.high = self.low + span * sym_high // table.total - 1
        self.low = self.low + span * sym_low // table.total
        while True:
            if self.high < HALF_RANGE:
                pass
            elif self.low >= HALF_RANGE:
                self.low -= HALF_RANGE
                self.high -= HALF_RANGE
                self.code -= HALF_RANGE
            elif self.low >= QUARTER_RANGE and self.high < HALF_RANGE + QUARTER_RANGE:
                self.low -= QUARTER_RANGE
                self.high -= QUARTER_RANGE
                self.code -= QUARTER_RANGE
            else:
                break
            self.low = (self.low << 1) & STATE_MASK
            self.high = ((self.high << 1) & STATE_MASK) | 1
            self.code = ((self.code << 1) & STATE_MASK) | self._bits.read()
        return symbol

    def check_length(self) -> None:
        """The payload must be exactly as long as the encoder would have made it."""

        emitted = self.consumed_bits - MAX_OVERREAD_BITS
        expected = (emitted + 7) // 8
        actual = len(self._bits.payload)
        if actual != expected:
            raise CorruptStreamError(f"payload has {actual} bytes but the decoded symbols account for {expected}")


def ac_encode(symbols: Sequence[int], pmf_provider: PmfProvider) -> bytes:
    """Code ``symbols``; ``pmf_provider(i, symbols[:i])`` gives the table of symbol ``i``."""

    if len(symbols) == 0:
        return b""
    encoder = ArithmeticEncoder()
    for index, symbol in enumerate(symbols):
        encoder.write(pmf_provider(index, symbols[:index]), int(symbol))
    payload = encoder.finish()
    LOGGER.debug("Coded %s symbols into %s bytes", len(symbols), len(payload))
    return payload


def ac_decode(payload: bytes, pmf_provider: PmfProvider, count: int) -> List[int]:
    if count < 0:
        raise ContractViolation(f"symbol count must be non-negative, got {count}")
    if count == 0:
        if payload:
            raise CorruptStreamError(f"{len(payload)} payload bytes for an empty symbol sequence")
        return []
    if not payload:
        raise CorruptStreamError(f"empty payload for {count} symbols")
    decoder = ArithmeticDecoder(payload)
    decoded: List[int] = []
    for index in range(count):
        decoded.append(decoder.read(pmf_provider(index, decoded)))
    decoder.check_length()
    return decoded


def ideal_length_bits(symbols: Sequence[int], tables: Sequence[FrequencyTable]) -> float:
    return float(sum(table.ideal_bits(int(symbol)) for symbol, table in zip(symbols, tables)))


def coded_length_bound(ideal_bits: float) -> float:
    return ideal_bits + STATE_BITS


def uniform_table(size: int, offset: int = 0, total: Optional[int] = None) -> FrequencyTable:
    """Equal frequencies summing to ``total`` (default 2^16); spares go to the first symbols."""

    total = FREQ_TOTAL if total is None else total
    if not 0 < size <= total:
        raise ContractViolation(f"cannot spread {total} over {size} symbols")
    freqs = np.full(size, total // size, dtype=np.int64)
    freqs[: total - int(freqs.sum())] += 1
    return FrequencyTable(freqs, offset)
