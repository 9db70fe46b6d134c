"""Lossy tensor codecs and the bit-exact serialized payload format.

Three schemes are supported for a named set of matrices:

* ``dense``: raw 64-bit values.
* ``quantized``: sign bit plus an r-bit magnitude level per element, scaled
  by the tensor's L2 norm.
* ``lowrank_quantized``: singular-value truncation first, then quantized
  left/right factors plus the retained singular values.

Wire format (little-endian): magic ``CFP1``, version u16, scheme u8, tensor
count u16; per tensor: name length u16 + UTF-8 name, rows u32, cols u32,
then the scheme-specific body.  A body consisting of the single flag byte
0xFF marks an all-zero tensor (quantized schemes only; a zero tensor has no
L2 norm to quantize against).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import linalg
from .errors import BadBits, MalformedPayload, NonFiniteInput, ZeroVector

MAGIC = b"CFP1"
WIRE_VERSION = 1

SCHEME_DENSE = "dense"
SCHEME_QUANTIZED = "quantized"
SCHEME_LOWRANK = "lowrank_quantized"
_SCHEME_CODES = {SCHEME_DENSE: 0, SCHEME_QUANTIZED: 1, SCHEME_LOWRANK: 2}
_SCHEME_NAMES = {v: k for k, v in _SCHEME_CODES.items()}

_ZERO_BODY = 0xFF
# Keeps the 0xFF zero-tensor marker distinguishable from the low byte of the
# rank field in low-rank bodies.
_MAX_WIRE_RANK = 0xFE


@dataclass
class QuantizedVector:
    """Norm-scaled fixed-point encoding of a real vector.

    Levels are clamped to ``2**r - 1`` so each fits in exactly r bits on the
    wire; a coordinate whose magnitude nearly equals the full norm therefore
    carries a saturation bias of at most ``norm / 2**r``.
    """

    r: int
    norm: float
    signs: np.ndarray  # uint8, 1 for negative coordinates
    levels: np.ndarray  # uint64 in [0, 2**r - 1]

    def __len__(self) -> int:
        return len(self.levels)


def quantize(
    x,
    r: int,
    mode: str = "deterministic",
    rng: Optional[np.random.Generator] = None,
) -> QuantizedVector:
    """Quantize a nonzero vector to sign bits and r-bit magnitude levels.

    Deterministic mode rounds ``2**r * |x_i| / ||x||`` to the nearest level;
    stochastic mode rounds up or down with probabilities that make the
    dequantized value unbiased.  The stochastic path draws from ``rng``.
    """
    if not 1 <= int(r) <= 32:
        raise BadBits(f"r must be in [1, 32], got {r}")
    r = int(r)
    vec = np.asarray(x, dtype=np.float64).ravel()
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ZeroVector("cannot quantize a zero (or empty) vector")
    scaled = (float(2**r) * np.abs(vec)) / norm
    if mode == "deterministic":
        levels = np.rint(scaled)
    elif mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic quantization requires an rng stream")
        low = np.floor(scaled)
        levels = low + (rng.random(len(vec)) < (scaled - low))
    else:
        raise ValueError(f"unknown quantization mode {mode!r}")
    levels = np.minimum(levels, float(2**r - 1)).astype(np.uint64)
    signs = (vec < 0).astype(np.uint8)  # exact zeros get sign bit 0
    return QuantizedVector(r=r, norm=norm, signs=signs, levels=levels)


def dequantize(q: QuantizedVector) -> np.ndarray:
    """Reconstruct ``norm * sign_i * level_i / 2**r`` for each coordinate."""
    magnitudes = q.norm * q.levels.astype(np.float64) / float(2**q.r)
    return np.where(q.signs == 1, -magnitudes, magnitudes)


@dataclass
class SparseTensor:
    """COO-style view of a matrix: strictly increasing flat indices, nonzero values."""

    shape: Tuple[int, int]
    indices: np.ndarray  # int64, strictly increasing flat (row-major) indices
    values: np.ndarray  # float64, all nonzero

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape[0] * self.shape[1])
        out[self.indices] = self.values
        return out.reshape(self.shape)


def sparsify_threshold(m, cut: float) -> SparseTensor:
    """Keep entries with ``|value| >= cut``; zeros are never stored."""
    if cut < 0:
        raise ValueError("cut must be >= 0")
    mat = linalg.as_matrix(m)
    flat = mat.ravel()
    mask = (np.abs(flat) >= cut) & (flat != 0.0)
    idx = np.nonzero(mask)[0].astype(np.int64)
    return SparseTensor(shape=mat.shape, indices=idx, values=flat[idx].copy())


def sparsify_topk(m, k: int) -> SparseTensor:
    """Keep the k entries of largest magnitude, smaller flat index winning ties."""
    mat = linalg.as_matrix(m)
    flat = mat.ravel()
    if not 0 <= k <= flat.size:
        raise ValueError(f"k must be in [0, {flat.size}], got {k}")
    nonzero = np.nonzero(flat)[0]
    # Sort by descending magnitude, then ascending flat index.
    order = nonzero[np.lexsort((nonzero, -np.abs(flat[nonzero])))]
    chosen = np.sort(order[:k]).astype(np.int64)
    return SparseTensor(shape=mat.shape, indices=chosen, values=flat[chosen].copy())


def _pack_levels(levels: np.ndarray, r: int) -> bytes:
    bits = ((levels[:, None] >> np.arange(r, dtype=np.uint64)) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def _unpack_levels(buf: bytes, n: int, r: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little", count=n * r)
    weights = np.uint64(1) << np.arange(r, dtype=np.uint64)
    return (bits.reshape(n, r).astype(np.uint64) * weights).sum(axis=1)


def _quant_segment(vec: np.ndarray, r: int, mode: str, rng) -> bytes:
    """Quantized body for one flattened tensor, or the zero marker.

    ZeroVector covers both genuinely zero tensors and tensors so small that
    their norm underflows; both are legal model states and travel as the
    marker byte.
    """
    try:
        q = quantize(vec, r, mode=mode, rng=rng)
    except ZeroVector:
        return bytes([_ZERO_BODY])
    sign_bytes = np.packbits(q.signs, bitorder="little").tobytes()
    return struct.pack("<Bd", q.r, q.norm) + sign_bytes + _pack_levels(q.levels, q.r)


class _Reader:
    """Cursor over a byte string that raises MalformedPayload on shortage."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise MalformedPayload(
                f"truncated payload: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.blob) - self.pos}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def peek(self) -> int:
        if self.pos >= len(self.blob):
            raise MalformedPayload("truncated payload: expected a tensor body")
        return self.blob[self.pos]

    def done(self) -> bool:
        return self.pos == len(self.blob)


def _read_quant_segment(rd: _Reader, n: int) -> np.ndarray:
    if rd.peek() == _ZERO_BODY:
        rd.take(1)
        return np.zeros(n)
    (r, norm) = rd.unpack("<Bd")
    if not 1 <= r <= 32:
        raise MalformedPayload(f"quantized segment has invalid bit width {r}")
    signs = np.unpackbits(
        np.frombuffer(rd.take((n + 7) // 8), dtype=np.uint8), bitorder="little", count=n
    )
    levels = _unpack_levels(rd.take((n * r + 7) // 8), n, r)
    return dequantize(QuantizedVector(r=r, norm=norm, signs=signs, levels=levels))


@dataclass
class CompressedPayload:
    """One serialized set of named tensors; ``blob`` is the wire image."""

    kind: str
    blob: bytes

    def to_bytes(self) -> bytes:
        return self.blob

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedPayload":
        """Validate a wire image and wrap it; raises MalformedPayload."""
        kind = _validate_blob(blob)
        return cls(kind=kind, blob=blob)


def payload_bits(p: CompressedPayload) -> int:
    """Exact serialized size in bits."""
    return len(p.blob) * 8


def encode_payload(
    tensors: Dict[str, np.ndarray],
    scheme: str,
    r: int = 4,
    tau_lowrank: float = 0.0,
    mode: str = "deterministic",
    rng: Optional[np.random.Generator] = None,
) -> CompressedPayload:
    """Serialize named matrices under one compression scheme.

    ``lowrank_quantized`` truncates each matrix with a relative singular
    value cutoff of ``tau_lowrank`` and ships quantized factors; matrices
    with a unit dimension (bias rows) skip the factorization and travel as a
    plain quantized segment.
    """
    if scheme not in _SCHEME_CODES:
        raise ValueError(f"unknown scheme {scheme!r}")
    parts = [MAGIC, struct.pack("<HBH", WIRE_VERSION, _SCHEME_CODES[scheme], len(tensors))]
    for name, tensor in tensors.items():
        mat = linalg.as_matrix(tensor)
        if not np.isfinite(mat).all():
            raise NonFiniteInput(f"tensor {name!r} contains NaN or Inf entries")
        encoded_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded_name)))
        parts.append(encoded_name)
        parts.append(struct.pack("<II", mat.shape[0], mat.shape[1]))
        if scheme == SCHEME_DENSE:
            parts.append(mat.astype("<f8").tobytes())
        elif scheme == SCHEME_QUANTIZED:
            parts.append(_quant_segment(mat.ravel(), r, mode, rng))
        else:
            parts.append(_lowrank_body(mat, r, tau_lowrank, mode, rng))
    return CompressedPayload(kind=scheme, blob=b"".join(parts))


def _lowrank_body(mat: np.ndarray, r: int, tau: float, mode: str, rng) -> bytes:
    if min(mat.shape) == 1:
        return _quant_segment(mat.ravel(), r, mode, rng)
    if not np.any(mat):
        return bytes([_ZERO_BODY])
    dec = linalg.svd(mat)
    _, rank = linalg.lowrank_truncate(dec, "relative", tau)
    if rank == 0:
        return bytes([_ZERO_BODY])
    if rank > _MAX_WIRE_RANK:
        raise ValueError(f"retained rank {rank} exceeds the wire format limit")
    left = dec.u[:, :rank] * dec.sigma[:rank]
    right = dec.v[:, :rank]
    return b"".join(
        [
            struct.pack("<H", rank),
            _quant_segment(left.ravel(), r, mode, rng),
            _quant_segment(right.ravel(), r, mode, rng),
            dec.sigma[:rank].astype("<f8").tobytes(),
        ]
    )


def _walk(blob: bytes) -> Iterator[Tuple[str, np.ndarray]]:
    rd = _Reader(blob)
    if rd.take(4) != MAGIC:
        raise MalformedPayload("bad magic")
    version, scheme_code, count = rd.unpack("<HBH")
    if version != WIRE_VERSION:
        raise MalformedPayload(f"unsupported payload version {version}")
    if scheme_code not in _SCHEME_NAMES:
        raise MalformedPayload(f"unknown scheme code {scheme_code}")
    scheme = _SCHEME_NAMES[scheme_code]
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        try:
            name = rd.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayload("tensor name is not valid UTF-8") from exc
        rows, cols = rd.unpack("<II")
        n = rows * cols
        if scheme == SCHEME_DENSE:
            values = np.frombuffer(rd.take(8 * n), dtype="<f8").astype(np.float64)
        elif scheme == SCHEME_QUANTIZED:
            values = _read_quant_segment(rd, n)
        else:
            values = _read_lowrank_body(rd, rows, cols)
        yield name, values.reshape(rows, cols)
    if not rd.done():
        raise MalformedPayload(f"{len(blob) - rd.pos} trailing bytes after last tensor")


def _read_lowrank_body(rd: _Reader, rows: int, cols: int) -> np.ndarray:
    if min(rows, cols) == 1:
        return _read_quant_segment(rd, rows * cols)
    if rd.peek() == _ZERO_BODY:
        rd.take(1)
        return np.zeros(rows * cols)
    (rank,) = rd.unpack("<H")
    if rank == 0 or rank > min(rows, cols):
        raise MalformedPayload(f"invalid retained rank {rank} for {rows}x{cols}")
    left = _read_quant_segment(rd, rows * rank).reshape(rows, rank)
    right = _read_quant_segment(rd, cols * rank).reshape(cols, rank)
    rd.take(8 * rank)  # singular values: informational, factors carry them
    return (left @ right.T).ravel()


def decode_payload(payload) -> Dict[str, np.ndarray]:
    """Reconstruct named matrices from a payload or raw wire bytes."""
    blob = payload.blob if isinstance(payload, CompressedPayload) else bytes(payload)
    return dict(_walk(blob))


def _validate_blob(blob: bytes) -> str:
    for _ in _walk(blob):
        pass
    return _SCHEME_NAMES[blob[6]]
