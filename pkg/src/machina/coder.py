"""Range coding with 16-bit CDF tables and the MCBS1 bitstream container.

The coder keeps a 64-bit ``low``/``range`` state, renormalizes a byte at a
time and propagates carries straight into the output buffer.  Termination
codes a fixed 16-bit check value and then emits the shortest prefix of a
value inside the final interval, so the decoder treats bytes past the end as
zeros.  The decoder mirrors the encoder's state and therefore knows the exact
stream length it should have consumed; a wrong check value or any other
length is reported as corruption.
"""
from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from . import codec as C
from . import tensor as T
from .params import ParameterSet

PRECISION = 16
TOTAL = 1 << PRECISION
_MASK = (1 << 64) - 1
_TOP = 1 << 56
RAW_BITS = 16
CHECK_VALUE = 0xA5C3

SCALE_TABLE = np.exp(np.linspace(np.log(C.SCALE_BOUND), np.log(16.0), 64))
TAIL_MASS = 1e-6
FACTORIZED_SEARCH = 512

BS_MAGIC = b"MCBS1"
BS_VERSION = 1
_HEADER = struct.Struct("<BHHBHHII")
HEADER_BYTES = len(BS_MAGIC) + _HEADER.size


class CodingError(ValueError):
    """A symbol cannot be represented by its table."""


class DecodeError(ValueError):
    """Stream is truncated, padded or inconsistent with the supplied tables."""


class FormatError(ValueError):
    """Container magic, version or header fields are invalid."""


@dataclass(frozen=True)
class CdfTable:
    """Cumulative counts over ``len(cdf) - 1`` table slots.

    Slot ``i`` codes the symbol ``offset + i``.  With ``escape`` the last slot
    is reserved: symbols outside the regular range code it followed by a raw
    16-bit two's-complement value.
    """

    cdf: tuple[int, ...]
    offset: int = 0
    escape: bool = False

    def __post_init__(self):
        c = self.cdf
        if len(c) < 2 or c[0] != 0 or c[-1] != TOTAL:
            raise ValueError(f"cdf must start at 0 and end at {TOTAL}")
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ValueError("cdf must be strictly increasing (every slot needs count >= 1)")
        if self.escape and len(c) < 3:
            raise ValueError("an escape table needs at least one regular symbol")

    @property
    def n_regular(self) -> int:
        return len(self.cdf) - 1 - int(self.escape)

    def counts(self) -> np.ndarray:
        return np.diff(np.asarray(self.cdf))

    def __contains__(self, symbol: int) -> bool:
        return 0 <= symbol - self.offset < self.n_regular


def pmf_to_cdf(pmf: Sequence[float]) -> tuple[int, ...]:
    """Quantize a probability vector to counts >= 1 summing to 2^16."""
    p = np.asarray(pmf, dtype=np.float64)
    n = p.size
    if n == 0 or n > TOTAL:
        raise ValueError(f"cannot quantize {n} symbols at {PRECISION}-bit precision")
    if (p < 0).any() or not np.isfinite(p).all():
        raise ValueError("pmf entries must be finite and non-negative")
    s = p.sum()
    p = p / s if s > 0 else np.full(n, 1.0 / n)
    budget = TOTAL - n
    scaled = p * budget
    counts = np.floor(scaled).astype(np.int64)
    rest = budget - int(counts.sum())
    if rest > 0:
        order = np.argsort(-(scaled - counts), kind="stable")
        counts[order[:rest]] += 1
    counts += 1
    return tuple(int(v) for v in np.concatenate([[0], np.cumsum(counts)]))


def _final_prefix(low: int, rng: int) -> tuple[int, int]:
    """Shortest byte count k and value V with low <= V < low + rng, V a multiple of 2^(64-8k)."""
    for k in range(9):
        unit = 1 << (64 - 8 * k)
        v = -(-low // unit) * unit
        if v < low + rng:
            return k, v
    raise AssertionError("range coder interval collapsed")


class RangeEncoder:
    def __init__(self) -> None:
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def _carry(self) -> None:
        i = len(self.out) - 1
        while self.out[i] == 0xFF:
            self.out[i] = 0
            i -= 1
        self.out[i] += 1

    def encode(self, start: int, freq: int) -> None:
        r = self.range >> PRECISION
        low = self.low + r * start
        if low > _MASK:
            self._carry()
            low &= _MASK
        rng = r * freq
        while rng < _TOP:
            self.out.append(low >> 56)
            low = (low << 8) & _MASK
            rng <<= 8
        self.low, self.range = low, rng

    def encode_symbol(self, symbol: int, table: CdfTable, position: int = 0) -> None:
        idx = symbol - table.offset
        cdf = table.cdf
        if 0 <= idx < table.n_regular:
            self.encode(cdf[idx], cdf[idx + 1] - cdf[idx])
            return
        if not table.escape:
            raise CodingError(f"symbol {symbol} at index {position} outside table support "
                              f"[{table.offset}, {table.offset + table.n_regular - 1}]")
        if not -(1 << (RAW_BITS - 1)) <= symbol < (1 << (RAW_BITS - 1)):
            raise CodingError(f"symbol {symbol} at index {position} exceeds the {RAW_BITS}-bit escape range")
        esc = len(cdf) - 2
        self.encode(cdf[esc], cdf[esc + 1] - cdf[esc])
        self.encode(symbol & ((1 << RAW_BITS) - 1), 1)

    def finish(self) -> bytes:
        self.encode(CHECK_VALUE, 1)
        k, v = _final_prefix(self.low, self.range)
        if v > _MASK:
            self._carry()
            v &= _MASK
        for i in range(k):
            self.out.append((v >> (56 - 8 * i)) & 0xFF)
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes) -> None:
        self.data = bytes(data)
        head = self.data[:8].ljust(8, b"\0")
        self.code = int.from_bytes(head, "big")
        self.pos = 8
        self.low = 0
        self.range = _MASK
        self.shifts = 0

    def _next_byte(self) -> int:
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def _target(self) -> tuple[int, int]:
        r = self.range >> PRECISION
        target = self.code // r
        if target >= TOTAL:
            raise DecodeError(f"corrupt stream near byte {self.pos - 8}")
        return r, target

    def _update(self, r: int, start: int, freq: int) -> None:
        self.code -= r * start
        self.low = (self.low + r * start) & _MASK
        rng = r * freq
        if self.code >= rng:
            raise DecodeError(f"corrupt stream near byte {self.pos - 8}")
        while rng < _TOP:
            self.code = (self.code << 8) | self._next_byte()
            self.low = (self.low << 8) & _MASK
            rng <<= 8
            self.shifts += 1
        self.range = rng

    def decode_symbol(self, table: CdfTable) -> int:
        r, target = self._target()
        cdf = table.cdf
        idx = bisect_right(cdf, target) - 1
        self._update(r, cdf[idx], cdf[idx + 1] - cdf[idx])
        if table.escape and idx == len(cdf) - 2:
            r, raw = self._target()
            self._update(r, raw, 1)
            return raw - (1 << RAW_BITS) if raw >= (1 << (RAW_BITS - 1)) else raw
        return table.offset + idx

    def finish(self) -> None:
        r, check = self._target()
        if check != CHECK_VALUE:
            raise DecodeError(f"stream check value mismatch (truncated or corrupt, {len(self.data)} bytes)")
        self._update(r, check, 1)
        k, _ = _final_prefix(self.low, self.range)
        expected = self.shifts + k
        if len(self.data) < expected:
            raise DecodeError(f"truncated stream: {len(self.data)} bytes, encoder wrote {expected}")
        if len(self.data) > expected:
            raise DecodeError(f"{len(self.data) - expected} unexpected trailing bytes")


def _tables_for(cdfs: CdfTable | Sequence[CdfTable], n: int) -> Sequence[CdfTable]:
    if isinstance(cdfs, CdfTable):
        return [cdfs] * n
    if len(cdfs) != n:
        raise ValueError(f"{len(cdfs)} tables for {n} symbols")
    return cdfs


def range_encode(symbols: Sequence[int], cdfs: CdfTable | Sequence[CdfTable]) -> bytes:
    """Encode ``symbols[i]`` with ``cdfs[i]`` (a single table is reused for all)."""
    tables = _tables_for(cdfs, len(symbols))
    enc = RangeEncoder()
    for i, (s, t) in enumerate(zip(symbols, tables)):
        enc.encode_symbol(int(s), t, i)
    return enc.finish()


def range_decode(data: bytes, cdfs: CdfTable | Sequence[CdfTable], n: int) -> list[int]:
    tables = _tables_for(cdfs, n)
    dec = RangeDecoder(data)
    out = [dec.decode_symbol(t) for t in tables]
    dec.finish()
    return out


def information_bits(symbols: Sequence[int], cdfs: CdfTable | Sequence[CdfTable]) -> float:
    """Ideal code length of ``symbols`` under the quantized tables (escape raw bits included)."""
    tables = _tables_for(cdfs, len(symbols))
    total = 0.0
    for s, t in zip(symbols, tables):
        idx = s - t.offset
        if not 0 <= idx < t.n_regular:
            idx = len(t.cdf) - 2
            total += RAW_BITS
        total -= np.log2((t.cdf[idx + 1] - t.cdf[idx]) / TOTAL)
    return float(total)


# ------------------------------------------------------------ model tables


def _gaussian_table(scale: float, tail_mass: float) -> CdfTable:
    half = int(np.ceil(scale * ndtri(1.0 - tail_mass / 2.0)))
    k = np.arange(-half, half + 1, dtype=np.float64)
    pmf = ndtr((k + 0.5) / scale) - ndtr((k - 0.5) / scale)
    escape = max(1.0 - pmf.sum(), 0.0)
    return CdfTable(pmf_to_cdf(np.append(pmf, escape)), offset=-half, escape=True)


_GAUSSIAN_CACHE: dict[tuple[int, float], list[CdfTable]] = {}


def gaussian_tables(tail_mass: float = TAIL_MASS) -> list[CdfTable]:
    key = (len(SCALE_TABLE), tail_mass)
    if key not in _GAUSSIAN_CACHE:
        _GAUSSIAN_CACHE[key] = [_gaussian_table(float(s), tail_mass) for s in SCALE_TABLE]
    return _GAUSSIAN_CACHE[key]


def scale_indexes(sigma: np.ndarray) -> np.ndarray:
    """Index of the smallest table scale >= sigma (clamped to the table)."""
    idx = np.searchsorted(SCALE_TABLE, np.asarray(sigma), side="left")
    return np.minimum(idx, len(SCALE_TABLE) - 1)


def build_gaussian_cdfs(sigma: np.ndarray, tail_mass: float = TAIL_MASS) -> tuple[list[CdfTable], np.ndarray]:
    """Shared scale tables plus, per element of ``sigma``, the table index to use."""
    return gaussian_tables(tail_mass), scale_indexes(np.maximum(sigma, C.SCALE_BOUND))


def build_factorized_cdfs(params: ParameterSet, tail_mass: float = TAIL_MASS) -> list[CdfTable]:
    """One escape table per hyper-latent channel from the learned CDF networks."""
    c = params["entropy_model.matrix0"].shape[0]
    grid = np.arange(-FACTORIZED_SEARCH, FACTORIZED_SEARCH + 1, dtype=np.float64)
    with T.no_grad():
        v = T.constant(np.broadcast_to(grid, (c, 1, grid.size)).copy())
        upper = C.factorized_cdf(T.add_scalar(v, 0.5), params).data
        pmf = C.factorized_likelihood(T.constant(np.broadcast_to(grid, (1, c, 1, grid.size)).copy()),
                                      params).data[0, :, 0, :]
    tables = []
    for ch in range(c):
        cdf_hi = upper[ch, 0]
        lo_idx = int(np.searchsorted(cdf_hi, tail_mass / 2.0, side="left"))
        hi_idx = int(np.searchsorted(cdf_hi, 1.0 - tail_mass / 2.0, side="left"))
        lo_idx = min(lo_idx, grid.size - 1)
        hi_idx = min(max(hi_idx, lo_idx), grid.size - 1)
        p = pmf[ch, lo_idx:hi_idx + 1]
        escape = max(1.0 - p.sum(), 0.0)
        tables.append(CdfTable(pmf_to_cdf(np.append(p, escape)), offset=int(grid[lo_idx]), escape=True))
    return tables


# --------------------------------------------------------------- container


@dataclass
class Bitstream:
    width: int
    height: int
    q: int
    latent_channels: int
    hyper_channels: int
    hyper_payload: bytes
    latent_payload: bytes
    version: int = BS_VERSION

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(self.version, self.width, self.height, self.q, self.latent_channels,
                            self.hyper_channels, len(self.hyper_payload), len(self.latent_payload))
        return BS_MAGIC + head + self.hyper_payload + self.latent_payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_BYTES:
            raise FormatError(f"container is {len(data)} bytes, header alone needs {HEADER_BYTES}")
        if data[:len(BS_MAGIC)] != BS_MAGIC:
            raise FormatError("bad bitstream magic")
        version, w, h, q, lc, hc, hl, ll = _HEADER.unpack_from(data, len(BS_MAGIC))
        if version != BS_VERSION:
            raise FormatError(f"unsupported bitstream version {version}")
        if len(data) != HEADER_BYTES + hl + ll:
            raise FormatError(f"payload lengths {hl}+{ll} disagree with container size {len(data)}")
        body = data[HEADER_BYTES:]
        return cls(w, h, q, lc, hc, bytes(body[:hl]), bytes(body[hl:hl + ll]), version)

    def __len__(self) -> int:
        return HEADER_BYTES + len(self.hyper_payload) + len(self.latent_payload)


def _halve(n: int) -> int:
    return (n + 1) // 2


def latent_dims(height: int, width: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Spatial sizes of (latent, hyper-latent) for an image."""
    ly, lx = height // 8, width // 8
    return (ly, lx), (_halve(_halve(ly)), _halve(_halve(lx)))


def _encode_latent(y_int: np.ndarray, sigma: np.ndarray) -> bytes:
    tables, idx = build_gaussian_cdfs(sigma)
    enc = RangeEncoder()
    for i, (s, k) in enumerate(zip(y_int.reshape(-1).tolist(), idx.reshape(-1).tolist())):
        enc.encode_symbol(int(s), tables[k], i)
    return enc.finish()


def _decode_latent(data: bytes, sigma: np.ndarray) -> np.ndarray:
    tables, idx = build_gaussian_cdfs(sigma)
    dec = RangeDecoder(data)
    out = [dec.decode_symbol(tables[k]) for k in idx.reshape(-1).tolist()]
    dec.finish()
    return np.asarray(out, dtype=np.float64).reshape(sigma.shape)


def _encode_hyper(h_int: np.ndarray, tables: list[CdfTable]) -> bytes:
    enc = RangeEncoder()
    _, c, hh, ww = h_int.shape
    flat = h_int[0].reshape(c, hh * ww)
    pos = 0
    for ch in range(c):
        t = tables[ch]
        for s in flat[ch].tolist():
            enc.encode_symbol(int(s), t, pos)
            pos += 1
    return enc.finish()


def _decode_hyper(data: bytes, tables: list[CdfTable], shape: tuple[int, int, int, int]) -> np.ndarray:
    _, c, hh, ww = shape
    dec = RangeDecoder(data)
    out = np.empty((c, hh * ww))
    for ch in range(c):
        t = tables[ch]
        out[ch] = [dec.decode_symbol(t) for _ in range(hh * ww)]
    dec.finish()
    return out.reshape(shape)


@dataclass
class EncodedImage:
    bitstream: Bitstream
    y_hat: np.ndarray
    h_hat: np.ndarray


def encode_image(x: np.ndarray, params: ParameterSet, q: int = 1) -> EncodedImage:
    """Code one [1,3,H,W] (or [3,H,W]) image in [0,1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise T.ShapeError(f"encode one image at a time, got batch of {x.shape[0]}")
    _, _, height, width = x.shape
    with T.no_grad():
        y = C.encode_analysis(T.constant(x), params)
        h = C.hyper_analysis(y, params)
        h_hat = C.round_half_away(h.data)
        sigma = C.hyper_synthesis(T.constant(h_hat), params, (y.shape[2], y.shape[3])).data
    y_hat = C.round_half_away(y.data)
    hyper_payload = _encode_hyper(h_hat, build_factorized_cdfs(params))
    latent_payload = _encode_latent(y_hat, sigma)
    bs = Bitstream(width, height, q, y.shape[1], h.shape[1], hyper_payload, latent_payload)
    return EncodedImage(bs, y_hat, h_hat)


def serialize(x: np.ndarray, params: ParameterSet, q: int = 1) -> Bitstream:
    return encode_image(x, params, q).bitstream


def decode_latents(bs: Bitstream, params: ParameterSet) -> tuple[np.ndarray, np.ndarray]:
    """Recover the integer (latent, hyper-latent) tensors using decoder-side parameters only."""
    m = params["decoder.deconv0.weight"].shape[0]
    c = params["entropy_model.matrix0"].shape[0]
    if bs.latent_channels != m or bs.hyper_channels != c:
        raise FormatError(f"stream has {bs.latent_channels}/{bs.hyper_channels} channels, "
                          f"model expects {m}/{c}")
    C.check_image_dims(bs.height, bs.width)
    (ly, lx), (hy, hx) = latent_dims(bs.height, bs.width)
    h_hat = _decode_hyper(bs.hyper_payload, build_factorized_cdfs(params), (1, c, hy, hx))
    with T.no_grad():
        sigma = C.hyper_synthesis(T.constant(h_hat), params, (ly, lx)).data
    y_hat = _decode_latent(bs.latent_payload, sigma)
    return y_hat, h_hat


def deserialize(bs: Bitstream | bytes, params: ParameterSet) -> np.ndarray:
    """Bitstream -> clamped reconstruction [1,3,H,W]."""
    if not isinstance(bs, Bitstream):
        bs = Bitstream.from_bytes(bs)
    y_hat, _ = decode_latents(bs, params)
    with T.no_grad():
        return C.decode_synthesis(T.constant(y_hat), params, clamp=True).data


def payload_bits(bs: Bitstream) -> int:
    return 8 * (len(bs.hyper_payload) + len(bs.latent_payload))
