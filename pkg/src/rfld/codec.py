"""Reference-frame residual codec and compression-savings accounting.

A frame is coded against a reference image rendered from the shared scene
model: residual = frame - reference (signed), uniformly quantized with step q
(round to nearest, ties away from zero; q = 1 is lossless), zero runs
collapsed into run tokens in row-major order, and the token stream entropy
coded with a canonical Huffman code.  Intra mode is the same coder with an
all-zero reference, which makes intra and predicted sizes directly
comparable for the savings formula 100 * I / (I + P).

Stream layout (little-endian): magic "NRES", version u16, width u16,
height u16, q u8, channels u8, payload length u32, Huffman table
(symbol count u16, then (symbol i16, code length u8) pairs), payload
bitstream (MSB-first), CRC32 of the payload.
"""

from __future__ import annotations

import heapq
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .images import area_resample, to_u8

STREAM_MAGIC = b"NRES"
STREAM_VERSION = 1

# Token values: nonzero quantized residuals occupy [-255, 255]; a run of n
# zeros becomes token RUN_BASE + n, capped so tokens stay within int16.
RUN_BASE = 256
RUN_MAX = 32767 - RUN_BASE

_HEADER_FMT = "<4sHHHBBI"

MAX_CODE_LEN = 48  # worst-case Huffman depth tolerated by the 64-bit packer
_LUT_BITS = 12     # primary decode table width


class DecodeError(ValueError):
    """A residual stream is malformed; byte_offset points at the failure."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (at byte {byte_offset})")
        self.byte_offset = byte_offset


@dataclass(frozen=True)
class ResidualPacket:
    """One wire unit: pose bytes plus the entropy-coded residual."""

    frame_idx: int
    pose_bytes: bytes
    residual_bytes: bytes
    quality: int

    def __post_init__(self):
        if self.quality < 1:
            raise ValueError("quantization step must be >= 1")
        if len(self.pose_bytes) >= 1024:
            raise ValueError("pose bytes must stay under 1 kB")


@dataclass(frozen=True)
class SavingsReport:
    frame_idx: int
    resolution: tuple[int, int]
    i_size: int
    p_size: int

    @property
    def savings_percent(self) -> float:
        return compression_savings(self.i_size, self.p_size)


def quantize_residual(residual: np.ndarray, q: int) -> np.ndarray:
    """Round-to-nearest quantization with ties away from zero."""
    r = np.asarray(residual, dtype=np.int64)
    mag = (2 * np.abs(r) + q) // (2 * q)
    return (np.sign(r) * mag).astype(np.int64)


def dequantize_residual(symbols: np.ndarray, q: int) -> np.ndarray:
    return np.asarray(symbols, dtype=np.int64) * q


# ---------------------------------------------------------------------- #
# zero-run tokenization


def _tokenize(symbols: np.ndarray) -> np.ndarray:
    """Collapses zero runs: nonzero symbols stay, runs become RUN_BASE + n."""
    s = symbols.ravel()
    if s.size == 0:
        return np.empty(0, dtype=np.int64)
    nz = s != 0
    # run-length segments of the zero/nonzero indicator
    change = np.flatnonzero(np.diff(nz))
    starts = np.concatenate([[0], change + 1])
    ends = np.concatenate([change + 1, [s.size]])
    out = []
    for a, b in zip(starts, ends):
        if nz[a]:
            out.append(s[a:b])
        else:
            n = b - a
            full, rem = divmod(n, RUN_MAX)
            runs = [RUN_MAX] * full + ([rem] if rem else [])
            out.append(np.asarray([RUN_BASE + r for r in runs], dtype=np.int64))
    return np.concatenate(out)


def _detokenize(tokens: np.ndarray, expected: int, offset_hint: int) -> np.ndarray:
    is_run = tokens >= RUN_BASE
    lengths = np.where(is_run, tokens - RUN_BASE, 1)
    total = int(lengths.sum())
    if total != expected:
        raise DecodeError(
            f"stream decodes to {total} samples, expected {expected}", offset_hint
        )
    values = np.where(is_run, 0, tokens)
    return np.repeat(values, lengths)


# ---------------------------------------------------------------------- #
# canonical Huffman


def _code_lengths(symbols: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Huffman code lengths per symbol (deterministic tie-breaking).

    Identifiers < n are leaves; identifier n + k refers to internal node k.
    Ties in count break on the identifier, so the tree is reproducible.
    """
    n = symbols.size
    if n == 1:
        return np.array([1], dtype=np.int64)
    heap = [(int(c), i) for i, c in enumerate(counts)]
    heapq.heapify(heap)
    children: list[tuple[int, int]] = []
    while len(heap) > 1:
        ca, ia = heapq.heappop(heap)
        cb, ib = heapq.heappop(heap)
        children.append((ia, ib))
        heapq.heappush(heap, (ca + cb, n + len(children) - 1))
    depths = np.zeros(n, dtype=np.int64)
    stack = [(heap[0][1], 0)]
    while stack:
        ident, depth = stack.pop()
        if ident < n:
            depths[ident] = depth
        else:
            left, right = children[ident - n]
            stack.append((left, depth + 1))
            stack.append((right, depth + 1))
    return depths


def _canonical_codes(symbols: np.ndarray, lengths: np.ndarray):
    """Canonical codeword assignment ordered by (length, symbol)."""
    order = np.lexsort((symbols, lengths))
    codes = np.zeros(symbols.size, dtype=np.uint64)
    code = 0
    prev_len = int(lengths[order[0]])
    for pos, idx in enumerate(order):
        ln = int(lengths[idx])
        if pos:
            code = (code + 1) << (ln - prev_len)
        codes[idx] = code
        prev_len = ln
    return codes


def _pack_bits(codes: np.ndarray, lengths: np.ndarray) -> bytes:
    """Concatenates variable-length MSB-first codewords into bytes."""
    total = int(lengths.sum())
    if total == 0:
        return b""
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    bit_sym = np.repeat(np.arange(codes.size), lengths)
    within = np.arange(total) - np.repeat(starts, lengths)
    shifts = (lengths[bit_sym] - 1 - within).astype(np.uint64)
    bits = (codes[bit_sym] >> shifts) & np.uint64(1)
    return np.packbits(bits.astype(np.uint8)).tobytes()


class _Decoder:
    """Canonical-Huffman decode tables: primary LUT plus long-code fallback."""

    def __init__(self, symbols: np.ndarray, lengths: np.ndarray):
        codes = _canonical_codes(symbols, lengths)
        self.max_len = int(lengths.max())
        if self.max_len > MAX_CODE_LEN:
            raise DecodeError(f"code length {self.max_len} exceeds limit", 0)
        lut_bits = min(self.max_len, _LUT_BITS)
        self.lut_bits = lut_bits
        lut_sym = np.zeros(1 << lut_bits, dtype=np.int64)
        lut_len = np.zeros(1 << lut_bits, dtype=np.int64)
        long_codes = []
        for sym, ln, code in zip(symbols, lengths, codes):
            ln = int(ln)
            if ln <= lut_bits:
                base = int(code) << (lut_bits - ln)
                span = 1 << (lut_bits - ln)
                lut_sym[base : base + span] = sym
                lut_len[base : base + span] = ln
            else:
                # align to max_len for linear fallback comparison
                long_codes.append((int(code) << (self.max_len - ln), ln, int(sym)))
        long_codes.sort()
        self.lut_sym = lut_sym.tolist()
        self.lut_len = lut_len.tolist()
        self.long_codes = long_codes


# ---------------------------------------------------------------------- #
# frame encode / decode


def _check_frames(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"frame dimensions differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return 1
    if a.ndim == 3 and a.shape[-1] in (1, 3):
        return a.shape[-1]
    raise ValueError(f"frames must be (H, W) or (H, W, C in {{1,3}}), got {a.shape}")


def encode_frame(real: np.ndarray, reference: np.ndarray, q: int = 1) -> bytes:
    """Encodes an 8-bit frame as a quantized residual against a reference."""
    if q < 1:
        raise ValueError(f"quantization step must be >= 1, got {q}")
    real8 = to_u8(real)
    ref8 = to_u8(reference)
    channels = _check_frames(real8, ref8)
    h, w = real8.shape[:2]
    residual = real8.astype(np.int64) - ref8.astype(np.int64)
    symbols = quantize_residual(residual, q)
    tokens = _tokenize(symbols)
    if tokens.size:
        alphabet, inverse = np.unique(tokens, return_inverse=True)
        counts = np.bincount(inverse)
        lengths = _code_lengths(alphabet, counts)
        codes = _canonical_codes(alphabet, lengths)
        payload = _pack_bits(codes[inverse], lengths[inverse])
    else:
        alphabet = np.empty(0, dtype=np.int64)
        lengths = np.empty(0, dtype=np.int64)
        payload = b""
    header = struct.pack(_HEADER_FMT, STREAM_MAGIC, STREAM_VERSION, w, h, q,
                         channels, len(payload))
    table = struct.pack("<H", alphabet.size)
    if alphabet.size:
        entries = np.empty(alphabet.size, dtype=[("sym", "<i2"), ("len", "u1")])
        entries["sym"] = alphabet.astype(np.int16)
        entries["len"] = lengths.astype(np.uint8)
        table += entries.tobytes()
    return header + table + payload + struct.pack("<I", zlib.crc32(payload))


def decode_frame(stream: bytes, reference: np.ndarray, q: int) -> np.ndarray:
    """Inverts encode_frame; output is clamped to [0, 255] uint8."""
    ref8 = to_u8(reference)
    head_len = struct.calcsize(_HEADER_FMT)
    if len(stream) < head_len:
        raise DecodeError("stream shorter than its header", len(stream))
    magic, version, w, h, q_stream, channels, payload_len = struct.unpack(
        _HEADER_FMT, stream[:head_len]
    )
    if magic != STREAM_MAGIC:
        raise DecodeError(f"bad stream magic {magic!r}", 0)
    if version != STREAM_VERSION:
        raise DecodeError(f"unsupported stream version {version}", 4)
    if q_stream != q:
        raise DecodeError(f"stream was coded with q={q_stream}, not q={q}", 10)
    exp_channels = 1 if ref8.ndim == 2 else ref8.shape[-1]
    if (h, w) != ref8.shape[:2] or channels != exp_channels:
        raise DecodeError(
            f"stream geometry {w}x{h}x{channels} does not match the reference", 6
        )
    pos = head_len
    if len(stream) < pos + 2:
        raise DecodeError("truncated symbol table header", len(stream))
    (n_syms,) = struct.unpack("<H", stream[pos : pos + 2])
    pos += 2
    table_bytes = n_syms * 3
    if len(stream) < pos + table_bytes:
        raise DecodeError("truncated symbol table", len(stream))
    entries = np.frombuffer(stream[pos : pos + table_bytes],
                            dtype=[("sym", "<i2"), ("len", "u1")])
    pos += table_bytes
    if len(stream) < pos + payload_len + 4:
        raise DecodeError("truncated payload", len(stream))
    payload = stream[pos : pos + payload_len]
    (crc,) = struct.unpack("<I", stream[pos + payload_len : pos + payload_len + 4])
    if zlib.crc32(payload) != crc:
        raise DecodeError("payload CRC mismatch", pos + payload_len)
    count = int(h) * int(w) * int(channels)
    if count == 0:
        symbols = np.empty(0, dtype=np.int64)
    elif n_syms == 0:
        raise DecodeError("empty symbol table for a nonempty frame", head_len)
    else:
        lengths = entries["len"].astype(np.int64)
        if np.any(lengths == 0):
            raise DecodeError("zero-length Huffman code in table", head_len)
        decoder = _Decoder(entries["sym"].astype(np.int64), lengths)
        # token count is unknown up front: decode incrementally to sample count
        tokens = _decode_tokens(decoder, payload, count, pos)
        symbols = _detokenize(tokens, count, pos)
    values = dequantize_residual(symbols, q).reshape(ref8.shape)
    return np.clip(ref8.astype(np.int64) + values, 0, 255).astype(np.uint8)


def _decode_tokens(decoder: _Decoder, payload: bytes, expected_samples: int,
                   base_offset: int) -> np.ndarray:
    tokens: list[int] = []
    produced = 0
    # decode token-by-token until the sample budget is met
    buf = 0
    nbits = 0
    pos = 0
    total_bits = len(payload) * 8
    consumed = 0
    max_len = decoder.max_len
    lut_bits = decoder.lut_bits
    lut_sym = decoder.lut_sym
    lut_len = decoder.lut_len
    while produced < expected_samples:
        while nbits < max_len and pos < len(payload):
            buf = (buf << 8) | payload[pos]
            pos += 1
            nbits += 8
        window = ((buf << (max_len - nbits)) if nbits < max_len
                  else (buf >> (nbits - max_len))) & ((1 << max_len) - 1)
        key = window >> (max_len - lut_bits)
        ln = lut_len[key]
        if ln:
            sym = lut_sym[key]
        else:
            sym = None
            for code_hi, code_len, code_sym in decoder.long_codes:
                if (window >> (max_len - code_len)) == (code_hi >> (max_len - code_len)):
                    sym, ln = code_sym, code_len
                    break
            if sym is None:
                raise DecodeError("invalid Huffman codeword", base_offset + pos)
        consumed += ln
        if consumed > total_bits:
            raise DecodeError("bitstream exhausted mid-codeword", base_offset + pos)
        nbits -= ln
        buf &= (1 << nbits) - 1
        tokens.append(sym)
        step = (sym - RUN_BASE) if sym >= RUN_BASE else 1
        if step <= 0:
            raise DecodeError("degenerate zero-length run token", base_offset + pos)
        produced += step
    return np.asarray(tokens, dtype=np.int64)


def compression_savings(i_size: int, p_size: int) -> float:
    """Percent of bytes avoided by substituting rendered reference frames."""
    if i_size < 0 or p_size < 0:
        raise ValueError("sizes must be non-negative")
    if i_size + p_size == 0:
        raise ValueError("at least one of i_size/p_size must be positive")
    return 100.0 * i_size / (i_size + p_size)


def run_compression_experiment(fieldlike, trajectory, real_frames,
                               resolutions, q: int,
                               n_samples: int = 48,
                               threads: int | None = None) -> list[SavingsReport]:
    """Per-frame intra/predicted byte accounting across output resolutions.

    `real_frames` are uint8 frames at a base resolution shared with the
    rendered references; both are area-downsampled to each requested
    resolution before coding, matching a capture-once/evaluate-downscaled
    pipeline.  Intra size codes the frame against an all-zero reference.
    """
    from .render import render_frame

    if len(trajectory) != len(real_frames):
        raise ValueError("trajectory and frame list lengths differ")
    if q < 1:
        raise ValueError("quantization step must be >= 1")
    reports: list[SavingsReport] = []
    for idx, (pose, real) in enumerate(zip(trajectory, real_frames)):
        real8 = to_u8(real)
        base_h, base_w = real8.shape[:2]
        maps = render_frame(fieldlike, pose, base_w, base_h,
                            n_samples=n_samples, threads=threads)
        ref8 = to_u8(maps.rgb)
        for (w, h) in resolutions:
            real_r = real8 if (w, h) == (base_w, base_h) else area_resample(real8, w, h)
            ref_r = ref8 if (w, h) == (base_w, base_h) else area_resample(ref8, w, h)
            i_size = len(encode_frame(real_r, np.zeros_like(real_r), q))
            p_size = len(encode_frame(real_r, ref_r, q))
            reports.append(SavingsReport(idx, (w, h), i_size, p_size))
    return reports


def write_savings_csv(path, reports: list[SavingsReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# intra/predicted sizes from the in-package residual codec\n")
        fh.write("frame_idx,resolution,i_size,p_size,savings_percent\n")
        for r in reports:
            fh.write(f"{r.frame_idx},{r.resolution[0]}x{r.resolution[1]},"
                     f"{r.i_size},{r.p_size},{r.savings_percent!r}\n")
