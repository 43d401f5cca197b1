"""Gaussian-conditional range coding of integer latent volumes.

Tables are built from fixed-point (16 fractional bits) copies of the model's
``mu`` and ``sigma`` so the encoder and decoder derive identical integer
frequencies.  The range coder keeps a 32-bit ``low``/``range`` state with
byte renormalization and explicit carry propagation.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import tensor as tc
from .model import DecodeSession, ModelParams, apply_lrp, model_hash
from .tensor import Tensor

DEFAULT_SUPPORT = (-64, 63)
DEFAULT_PRECISION = 16
FIXED_POINT_BITS = 16
LIKELIHOOD_FLOOR = 1e-9

STREAM_MAGIC = b"SWAB"
STREAM_VERSION = 1
_HEADER = struct.Struct("<4sHH4HBB8s")

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class CorruptStreamError(ValueError):
    """Bitstream failed its integrity checks."""


class ModelMismatchError(ValueError):
    """Bitstream was produced with a different model file."""


# ---------------------------------------------------------------------------
# probability tables


@dataclass(frozen=True)
class CdfTable:
    s_min: int
    s_max: int
    cum: np.ndarray  # (K + 1,) int64, cum[0] = 0, cum[-1] = 2**precision

    @property
    def precision(self) -> int:
        return int(self.cum[-1]).bit_length() - 1

    def freq(self, s: int) -> int:
        i = s - self.s_min
        return int(self.cum[i + 1] - self.cum[i])

    def pmf(self) -> np.ndarray:
        return np.diff(self.cum) / float(self.cum[-1])


def quantize_params(mu, sigma, scale_min: float = 0.0):
    """Round ``mu``/``sigma`` to the fixed-point grid used for table building."""
    q = float(1 << FIXED_POINT_BITS)
    mu_q = np.round(np.asarray(mu, dtype=np.float64) * q) / q
    sigma_q = np.round(np.asarray(sigma, dtype=np.float64) * q) / q
    if scale_min > 0:
        sigma_q = np.maximum(sigma_q, scale_min)
    return mu_q, sigma_q


def interval_probs(mu, sigma, support=DEFAULT_SUPPORT) -> np.ndarray:
    """Gaussian mass of every integer bin, tails folded into the edge bins.

    Returns shape ``mu.shape + (K,)``.
    """
    s_min, s_max = support
    s = np.arange(s_min, s_max + 1, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)[..., None]
    sigma = np.asarray(sigma, dtype=np.float64)[..., None]
    v = np.abs(s - mu)
    p = ndtr((0.5 - v) / sigma) - ndtr((-0.5 - v) / sigma)
    p[..., 0] = ndtr((s_min + 0.5 - mu[..., 0]) / sigma[..., 0])
    p[..., -1] = ndtr((mu[..., 0] - s_max + 0.5) / sigma[..., 0])
    return p


def build_cdfs(
    mu,
    sigma,
    support=DEFAULT_SUPPORT,
    precision: int = DEFAULT_PRECISION,
    scale_min: float = 0.0,
) -> np.ndarray:
    """Cumulative integer counts for a batch of Gaussians, shape ``(..., K + 1)``.

    Each symbol first receives one count; the remaining ``2**P - K`` counts
    are split by largest remainder with ties resolved toward the lower symbol.
    """
    if not 8 <= precision <= 16:
        raise ValueError("precision must be in [8, 16]")
    s_min, s_max = support
    K = s_max - s_min + 1
    total = 1 << precision
    if K < 2 or K > total:
        raise ValueError(f"support of {K} symbols does not fit precision {precision}")
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma >= scale_min)) or np.any(~(sigma > 0)):
        raise ValueError("sigma below scale_min")
    mu_q, sigma_q = quantize_params(mu, sigma, scale_min)
    p = interval_probs(mu_q, sigma_q, support)
    p = p / p.sum(axis=-1, keepdims=True)
    spare = total - K
    share = p * spare
    base = np.floor(share).astype(np.int64)
    left = spare - base.sum(axis=-1)
    rem = share - base
    order = np.argsort(-rem, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(K), axis=-1)
    counts = 1 + base + (rank < left[..., None])
    cum = np.zeros(counts.shape[:-1] + (K + 1,), dtype=np.int64)
    np.cumsum(counts, axis=-1, out=cum[..., 1:])
    return cum


def build_cdf(mu: float, sigma: float, support=DEFAULT_SUPPORT, precision: int = DEFAULT_PRECISION,
              scale_min: float = 0.0) -> CdfTable:
    cum = build_cdfs(np.array([mu]), np.array([sigma]), support, precision, scale_min)[0]
    return CdfTable(support[0], support[1], cum)


def table_bits(symbols, cums: np.ndarray, s_min: int) -> float:
    """Cross-entropy of ``symbols`` under integer tables ``cums`` (same leading shape)."""
    idx = np.asarray(symbols, dtype=np.int64)[..., None] - s_min
    lo = np.take_along_axis(cums, idx, axis=-1)[..., 0]
    hi = np.take_along_axis(cums, idx + 1, axis=-1)[..., 0]
    total = cums[..., -1]
    return float(np.sum(np.log2(total / (hi - lo))))


# ---------------------------------------------------------------------------
# range coder


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.out = bytearray()

    def _carry(self):
        i = len(self.out) - 1
        while self.out[i] == 0xFF:
            self.out[i] = 0
            i -= 1
        self.out[i] += 1

    def encode(self, cum_lo: int, freq: int, total_bits: int) -> None:
        r = self.range >> total_bits
        self.low += r * cum_lo
        if cum_lo + freq < (1 << total_bits):
            self.range = r * freq
        else:
            self.range -= r * cum_lo
        if self.low > _MASK32:
            self.low &= _MASK32
            self._carry()
        while self.range < _TOP:
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & _MASK32
            self.range <<= 8

    def finish(self) -> bytes:
        # shortest value in [low, low + range) given implicit zero padding
        for nbytes in range(5):
            g = 1 << (32 - 8 * nbytes)
            v = -(-self.low // g) * g
            if v < self.low + self.range:
                break
        if v > _MASK32:
            v &= _MASK32
            self._carry()
        for i in range(nbytes):
            self.out.append((v >> (24 - 8 * i)) & 0xFF)
        out = bytes(self.out).rstrip(b"\x00")
        self.out = bytearray()
        return out


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def decode(self, cum: np.ndarray, total_bits: int) -> int:
        """Decode one symbol index from cumulative counts ``cum``."""
        total = 1 << total_bits
        r = self.range >> total_bits
        target = min(self.code // r, total - 1)
        i = int(np.searchsorted(cum, target, side="right")) - 1
        lo = int(cum[i])
        hi = int(cum[i + 1])
        self.code -= r * lo
        if hi < total:
            self.range = r * (hi - lo)
        else:
            self.range -= r * lo
        while self.range < _TOP:
            self.code = (self.code << 8) | self._byte()
            self.range <<= 8
        return i


def range_encode(symbols, cums: np.ndarray, s_min: int = DEFAULT_SUPPORT[0],
                 precision: int = DEFAULT_PRECISION) -> bytes:
    """Encode a 1-D symbol sequence; ``cums[i]`` is the table of symbol ``i``."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    cums = np.asarray(cums)
    cums = cums.reshape(len(symbols), cums.shape[-1])
    enc = RangeEncoder()
    for s, cum in zip(symbols.tolist(), cums):
        i = s - s_min
        if not 0 <= i < cum.shape[0] - 1:
            raise ValueError(f"symbol {s} outside support")
        lo = int(cum[i])
        enc.encode(lo, int(cum[i + 1]) - lo, precision)
    return enc.finish()


def range_decode(data: bytes, cums: np.ndarray, s_min: int = DEFAULT_SUPPORT[0],
                 precision: int = DEFAULT_PRECISION) -> np.ndarray:
    cums = np.asarray(cums)
    cums = cums.reshape(-1, cums.shape[-1]) if cums.size else cums.reshape(0, 1)
    dec = RangeDecoder(data)
    return np.array([dec.decode(cum, precision) + s_min for cum in cums], dtype=np.int64)


# ---------------------------------------------------------------------------
# rate estimation


def estimate_rate_bits(symbols, mu: Tensor, sigma: Tensor, support=DEFAULT_SUPPORT) -> Tensor:
    """Differentiable total bits of integer ``symbols`` under Gaussian ``(mu, sigma)``.

    Uses the same edge folding as :func:`build_cdfs` in continuous form.
    ``symbols`` may be a Tensor (e.g. straight-through rounded latents); its
    gradient flows through ``symbols - mu``.
    """
    s_min, s_max = support
    sym = symbols if isinstance(symbols, Tensor) else Tensor(np.asarray(symbols, dtype=np.float64))
    if sym.shape != mu.shape or mu.shape != sigma.shape:
        raise tc.ShapeError(f"shape mismatch {sym.shape}, {mu.shape}, {sigma.shape}")
    s = sym.data
    v = tc.sub(sym, mu)
    av = tc.absolute(v)
    upper = tc.ndtr(tc.div(tc.sub(0.5, av), sigma))
    lower = tc.ndtr(tc.div(tc.sub(-0.5, av), sigma))
    p = tc.sub(upper, lower)
    lo_edge = tc.ndtr(tc.div(tc.add(v, 0.5), sigma))  # P(Y < s_min + 0.5)
    hi_edge = tc.ndtr(tc.div(tc.sub(0.5, v), sigma))  # P(Y > s_max - 0.5)
    p = tc.where(s <= s_min, lo_edge, p)
    p = tc.where(s >= s_max, hi_edge, p)
    bits = tc.neg(tc.log2(tc.clamp_min(p, LIKELIHOOD_FLOOR)))
    return tc.tensor_sum(bits)


def estimate_rate_bits_np(symbols, mu, sigma, support=DEFAULT_SUPPORT) -> float:
    """Non-differentiable counterpart of :func:`estimate_rate_bits`."""
    p = interval_probs(mu, sigma, support)
    idx = np.asarray(symbols, dtype=np.int64)[..., None] - support[0]
    ps = np.take_along_axis(p, idx, axis=-1)[..., 0]
    return float(-np.log2(np.maximum(ps, LIKELIHOOD_FLOOR)).sum())


# ---------------------------------------------------------------------------
# GOP bitstream


def quantize_latents(volume, support=DEFAULT_SUPPORT) -> np.ndarray:
    """Round half to even and clamp into the coded support."""
    return np.clip(np.round(np.asarray(volume, dtype=np.float64)), support[0], support[1]).astype(np.int64)


def _support_flags(support, precision: int) -> int:
    s_min, s_max = support
    K = s_max - s_min + 1
    log_k = K.bit_length() - 1
    if (1 << log_k) != K or s_min != -(K // 2):
        raise ValueError("support must be [-2^(n-1), 2^(n-1) - 1]")
    return log_k | (precision << 8)


def _flags_support(flags: int) -> tuple[tuple[int, int], int]:
    log_k = flags & 0xFF
    precision = (flags >> 8) & 0x1F
    if not 1 <= log_k <= 15 or not 8 <= precision <= 16 or flags >> 13:
        raise CorruptStreamError(f"invalid flags 0x{flags:04x}")
    K = 1 << log_k
    return (-(K // 2), K // 2 - 1), precision


@dataclass
class GopHeader:
    dims: tuple[int, int, int, int]
    rate_idx: int
    k: int
    model_hash: bytes
    support: tuple[int, int] = DEFAULT_SUPPORT
    precision: int = DEFAULT_PRECISION

    def pack(self) -> bytes:
        return _HEADER.pack(
            STREAM_MAGIC,
            STREAM_VERSION,
            _support_flags(self.support, self.precision),
            *self.dims,
            self.rate_idx,
            self.k,
            self.model_hash,
        )

    @classmethod
    def unpack(cls, blob: bytes) -> GopHeader:
        if len(blob) < _HEADER.size:
            raise CorruptStreamError("stream shorter than header")
        magic, version, flags, L, H, W, C, rate_idx, k, h = _HEADER.unpack_from(blob)
        if magic != STREAM_MAGIC:
            raise CorruptStreamError("bad magic; not a SWAB stream")
        if version != STREAM_VERSION:
            raise CorruptStreamError(f"unsupported stream version {version}")
        support, precision = _flags_support(flags)
        return cls((L, H, W, C), rate_idx, k, h, support, precision)


@dataclass
class GopResult:
    """Committed symbols plus per-frame accounting for one coded GOP."""

    symbols: np.ndarray
    refined: np.ndarray
    stream: bytes = b""
    frame_bytes: list[int] = field(default_factory=list)
    table_bits: list[float] = field(default_factory=list)
    estimated_bits: list[float] = field(default_factory=list)
    header_bytes: int = _HEADER.size

    @property
    def payload_bits(self) -> list[int]:
        return [8 * n for n in self.frame_bytes]


def _frame_tables(session: DecodeSession, header: GopHeader):
    mu, sigma, lrp = session.decode_step()
    cum = build_cdfs(mu, sigma, header.support, header.precision, session.config.scale_min)
    return mu, sigma, lrp, cum


def encode_gop(
    volume,
    params: ModelParams,
    k: int,
    rate_idx: int = 0,
    support=DEFAULT_SUPPORT,
    precision: int = DEFAULT_PRECISION,
) -> GopResult:
    """Code an ``(L, H, W, C)`` latent volume frame by frame."""
    vol = np.asarray(volume)
    if vol.ndim != 4 or vol.shape[3] != params.config.channels:
        raise tc.ShapeError(f"volume must be (L, H, W, {params.config.channels}), got {vol.shape}")
    if not 0 <= k <= 255:
        raise ValueError("k must fit in one byte")
    L, H, W, C = vol.shape
    header = GopHeader((L, H, W, C), rate_idx, k, model_hash(params), tuple(support), precision)
    symbols = quantize_latents(vol, support)
    refined = np.empty(symbols.shape)
    session = DecodeSession(params, (H, W), rate_idx, reference_frames=k)
    parts = [header.pack()]
    result = GopResult(symbols, refined)
    s_min = support[0]
    for f in range(L):
        session.begin_frame()
        enc = RangeEncoder()
        est = tab = 0.0
        for j in range(H * W):
            y, x = divmod(j, W)
            mu, sigma, lrp, cum = _frame_tables(session, header)
            sym = symbols[f, y, x]
            for c in range(C):
                i = int(sym[c]) - s_min
                lo = int(cum[c, i])
                enc.encode(lo, int(cum[c, i + 1]) - lo, precision)
            tab += table_bits(sym, cum, s_min)
            est += estimate_rate_bits_np(sym, mu, sigma, support)
            refined[f, y, x] = apply_lrp(sym, lrp)
            session.commit(sym.astype(np.float64))
        payload = enc.finish()
        parts.append(struct.pack("<I", len(payload)) + payload)
        result.frame_bytes.append(len(payload))
        result.table_bits.append(tab)
        result.estimated_bits.append(est)
    body = b"".join(parts)
    result.stream = body + struct.pack("<I", zlib.crc32(body))
    return result


def read_stream(stream: bytes) -> tuple[GopHeader, list[bytes]]:
    """Validate CRC and framing; return the header and frame payloads."""
    if len(stream) < _HEADER.size + 4:
        raise CorruptStreamError("stream truncated")
    body, (crc,) = stream[:-4], struct.unpack("<I", stream[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptStreamError("CRC mismatch; stream corrupted")
    header = GopHeader.unpack(body)
    pos = _HEADER.size
    payloads = []
    for _ in range(header.dims[0]):
        if pos + 4 > len(body):
            raise CorruptStreamError("missing frame length")
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        if pos + n > len(body):
            raise CorruptStreamError("frame payload truncated")
        payloads.append(body[pos : pos + n])
        pos += n
    if pos != len(body):
        raise CorruptStreamError("trailing bytes after last frame")
    return header, payloads


def decode_gop(stream: bytes, params: ModelParams) -> GopResult:
    header, payloads = read_stream(stream)
    if header.model_hash != model_hash(params):
        raise ModelMismatchError("stream was encoded with a different model")
    L, H, W, C = header.dims
    if C != params.config.channels:
        raise ModelMismatchError(f"stream has {C} channels, model expects {params.config.channels}")
    symbols = np.empty((L, H, W, C), dtype=np.int64)
    refined = np.empty((L, H, W, C))
    session = DecodeSession(params, (H, W), header.rate_idx, reference_frames=header.k)
    s_min = header.support[0]
    result = GopResult(symbols, refined, stream)
    for f in range(L):
        session.begin_frame()
        dec = RangeDecoder(payloads[f])
        for j in range(H * W):
            y, x = divmod(j, W)
            mu, sigma, lrp, cum = _frame_tables(session, header)
            sym = np.array([dec.decode(cum[c], header.precision) + s_min for c in range(C)])
            symbols[f, y, x] = sym
            refined[f, y, x] = apply_lrp(sym, lrp)
            session.commit(sym.astype(np.float64))
        result.frame_bytes.append(len(payloads[f]))
    return result
