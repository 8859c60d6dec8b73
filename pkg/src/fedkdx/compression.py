"""Energy-thresholded low-rank gradient compression and its wire codec.

Each gradient tensor is treated as a matrix (conv kernels flatten to
filters x rest), factored with the in-house thin SVD, and truncated at the
smallest rank whose retained squared-singular-value energy strictly exceeds
the threshold.  A layer is only sent factored when the factor payload is
strictly smaller than the raw matrix; everything else, including SVD
non-convergence, falls back to a raw entry so a round never aborts.

The byte format is fixed and bit-exact: magic ``FKDG0001``, u32 entry
count, then per entry a u16-length-prefixed UTF-8 name, u8 mode, u8
precision, u32 dim count + u32 dims (original tensor shape), and the
payload in little-endian row-major order (low-rank payloads carry u32 R,
then U, sigma, V).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .linalg import SvdNonConvergence, thin_svd
from .nn import LayerParam, ModelParams

PACKET_MAGIC = b"FKDG0001"

MODE_RAW = 0
MODE_LOWRANK = 1
MODE_LOWRANK_T = 2

_PRECISION_CODE = {"f32": 0, "f64": 1}
_PRECISION_NAME = {v: k for k, v in _PRECISION_CODE.items()}
_WIRE_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}

RHO_ROUND_FRACTION = "round_fraction"


class CodecError(ValueError):
    """Packet bytes are malformed."""


@dataclass(frozen=True)
class CompressionPolicy:
    eps_start: float = 0.9
    eps_end: float = 0.9
    rho_source: str = RHO_ROUND_FRACTION
    wire_precision: str = "f32"

    def __post_init__(self):
        for label, v in (("eps_start", self.eps_start), ("eps_end", self.eps_end)):
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{label} must lie in (0, 1], got {v}")
        if self.rho_source != RHO_ROUND_FRACTION:
            raise ValueError(f"unknown rho_source {self.rho_source!r}")
        if self.wire_precision not in _WIRE_DTYPE:
            raise ValueError(f"wire_precision must be f32 or f64, got {self.wire_precision!r}")


def dynamic_threshold(rho: float, policy: CompressionPolicy) -> float:
    """Linear schedule between the endpoint thresholds as training advances."""
    if not (0.0 <= rho <= 1.0):
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    return policy.eps_start + (policy.eps_end - policy.eps_start) * rho


def select_rank(sigma: np.ndarray, eps: float) -> int:
    """Smallest rank whose cumulative squared energy strictly exceeds eps.

    Returns 0 for an all-zero spectrum (the caller sends the layer raw); a
    threshold no prefix can strictly exceed keeps every component.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 1 or sigma.size == 0:
        raise ValueError("sigma must be a non-empty vector")
    if np.any(sigma < 0) or np.any(sigma[:-1] < sigma[1:]):
        raise ValueError("sigma must be non-negative and non-increasing")
    if not (0.0 < eps <= 1.0):
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    energy = sigma * sigma
    total = energy.sum()
    if total == 0.0:
        return 0
    satisfied = np.nonzero(np.cumsum(energy) / total > eps)[0]
    return int(satisfied[0]) + 1 if satisfied.size else sigma.size


@dataclass
class PacketEntry:
    """One layer of a gradient packet; arrays live in the wire dtype so
    encoding is a plain byte copy."""

    name: str
    shape: tuple[int, ...]
    mode: int
    precision: str
    raw: np.ndarray | None = None     # MODE_RAW: values in the original shape
    rank: int = 0
    u: np.ndarray | None = None       # (P, R) of the working matrix
    sigma: np.ndarray | None = None   # (R,)
    vt: np.ndarray | None = None      # (R, Q) of the working matrix


@dataclass
class GradientPacket:
    entries: list[PacketEntry] = field(default_factory=list)


@dataclass
class CompressionStats:
    layers_total: int = 0
    layers_lowrank: int = 0
    svd_fallbacks: int = 0


def _working_matrix(values: np.ndarray) -> np.ndarray:
    # conv kernels and anything higher-dimensional: first axis vs the rest
    return values.reshape(values.shape[0], -1)


def _raw_entry(name: str, values: np.ndarray, precision: str) -> PacketEntry:
    wire = np.ascontiguousarray(values, dtype=_WIRE_DTYPE[precision])
    return PacketEntry(name, tuple(values.shape), MODE_RAW, precision, raw=wire)


def compress_layer(name: str, values: np.ndarray, eps: float,
                   precision: str) -> tuple[PacketEntry, bool]:
    """Build the packet entry for one tensor.

    Returns (entry, svd_failed).  Vectors and scalars always go raw; a
    factored form is emitted only when it strictly beats the raw payload
    in value count.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.isfinite(values).all():
        raise ValueError(f"layer {name!r} has non-finite values")
    if values.ndim < 2:
        return _raw_entry(name, values, precision), False

    work = _working_matrix(values)
    transposed = work.shape[0] < work.shape[1]
    if transposed:
        work = work.T
    p, q = work.shape

    try:
        u, sigma, v = thin_svd(work)
    except SvdNonConvergence:
        return _raw_entry(name, values, precision), True

    r = select_rank(sigma, eps)
    if r == 0 or p * r + r * r + r * q >= p * q:
        return _raw_entry(name, values, precision), False

    dtype = _WIRE_DTYPE[precision]
    return PacketEntry(
        name, tuple(values.shape),
        MODE_LOWRANK_T if transposed else MODE_LOWRANK, precision,
        rank=r,
        u=np.ascontiguousarray(u[:, :r], dtype=dtype),
        sigma=np.ascontiguousarray(sigma[:r], dtype=dtype),
        vt=np.ascontiguousarray(v[:, :r].T, dtype=dtype),
    ), False


def compress_gradient(grads: ModelParams, eps: float,
                      policy: CompressionPolicy) -> tuple[GradientPacket, CompressionStats]:
    """Compress every layer of a gradient under one threshold."""
    pkt = GradientPacket()
    stats = CompressionStats()
    for layer in grads.layers:
        entry, failed = compress_layer(layer.name, layer.values, eps, policy.wire_precision)
        pkt.entries.append(entry)
        stats.layers_total += 1
        if entry.mode != MODE_RAW:
            stats.layers_lowrank += 1
        if failed:
            stats.svd_fallbacks += 1
    return pkt, stats


def raw_packet(grads: ModelParams, policy: CompressionPolicy) -> GradientPacket:
    """Uncompressed packet: every layer as raw values at the wire precision."""
    return GradientPacket([_raw_entry(l.name, l.values, policy.wire_precision)
                           for l in grads.layers])


def decompress(pkt: GradientPacket, template: ModelParams) -> ModelParams:
    """Reconstruct a float64 gradient with the template's layer structure."""
    if [e.name for e in pkt.entries] != template.names():
        raise ValueError(
            f"packet layers {[e.name for e in pkt.entries]} do not match "
            f"template {template.names()}")
    out = []
    for entry, layer in zip(pkt.entries, template.layers):
        if entry.shape != layer.values.shape:
            raise ValueError(
                f"layer {entry.name!r}: packet shape {entry.shape} != "
                f"expected {layer.values.shape}")
        if entry.mode == MODE_RAW:
            rec = entry.raw.astype(np.float64).reshape(entry.shape)
        else:
            u = entry.u.astype(np.float64)
            s = entry.sigma.astype(np.float64)
            vt = entry.vt.astype(np.float64)
            rec = (u * s) @ vt
            if entry.mode == MODE_LOWRANK_T:
                rec = rec.T
            rec = rec.reshape(entry.shape)
        out.append(LayerParam(entry.name, rec))
    return ModelParams(template.arch, out, dict(template.meta))


# ------------------------------------------------------------------ codec

def _entry_payload_bytes(entry: PacketEntry) -> int:
    item = _WIRE_DTYPE[entry.precision].itemsize
    if entry.mode == MODE_RAW:
        return entry.raw.size * item
    return 4 + (entry.u.size + entry.sigma.size + entry.vt.size) * item


def packet_size_bytes(pkt: GradientPacket) -> int:
    """Exact length of encode_packet(pkt) without materializing it."""
    n = len(PACKET_MAGIC) + 4
    for e in pkt.entries:
        n += 2 + len(e.name.encode("utf-8")) + 1 + 1 + 4 + 4 * len(e.shape)
        n += _entry_payload_bytes(e)
    return n


def encode_packet(pkt: GradientPacket) -> bytes:
    out = [PACKET_MAGIC, struct.pack("<I", len(pkt.entries))]
    for e in pkt.entries:
        nb = e.name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", e.mode, _PRECISION_CODE[e.precision]))
        out.append(struct.pack("<I", len(e.shape)))
        out.append(struct.pack(f"<{len(e.shape)}I", *e.shape))
        if e.mode == MODE_RAW:
            out.append(np.ascontiguousarray(e.raw).tobytes())
        else:
            out.append(struct.pack("<I", e.rank))
            for arr in (e.u, e.sigma, e.vt):
                out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_packet(buf: bytes) -> GradientPacket:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CodecError(f"truncated packet: wanted {n} bytes for {what} "
                             f"at offset {pos}, have {len(buf) - pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(len(PACKET_MAGIC), "magic") != PACKET_MAGIC:
        raise CodecError(f"bad magic, expected {PACKET_MAGIC!r}")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    entries = []
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        name = take(name_len, f"entry {i} name").decode("utf-8")
        mode, prec_code = struct.unpack("<BB", take(2, f"layer {name!r} header"))
        if mode not in (MODE_RAW, MODE_LOWRANK, MODE_LOWRANK_T):
            raise CodecError(f"layer {name!r}: unknown mode {mode}")
        if prec_code not in _PRECISION_NAME:
            raise CodecError(f"layer {name!r}: unknown precision code {prec_code}")
        precision = _PRECISION_NAME[prec_code]
        dtype = _WIRE_DTYPE[precision]
        (ndim,) = struct.unpack("<I", take(4, f"layer {name!r} dim count"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"layer {name!r} dims")) \
            if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1

        if mode == MODE_RAW:
            values = np.frombuffer(take(size * dtype.itemsize, f"layer {name!r} values"),
                                   dtype=dtype).reshape(shape).copy()
            entries.append(PacketEntry(name, shape, mode, precision, raw=values))
            continue

        if not shape:
            raise CodecError(f"layer {name!r}: low-rank entry cannot be a scalar")
        p = shape[0]
        q = size // p if p else 0
        if mode == MODE_LOWRANK_T:
            p, q = q, p
        (rank,) = struct.unpack("<I", take(4, f"layer {name!r} rank"))
        if rank < 1 or rank > min(p, q):
            raise CodecError(f"layer {name!r}: rank {rank} invalid for {p}x{q}")
        u = np.frombuffer(take(p * rank * dtype.itemsize, f"layer {name!r} U"),
                          dtype=dtype).reshape(p, rank).copy()
        sigma = np.frombuffer(take(rank * dtype.itemsize, f"layer {name!r} sigma"),
                              dtype=dtype).copy()
        vt = np.frombuffer(take(rank * q * dtype.itemsize, f"layer {name!r} V"),
                           dtype=dtype).reshape(rank, q).copy()
        entries.append(PacketEntry(name, shape, mode, precision,
                                   rank=rank, u=u, sigma=sigma, vt=vt))
    if pos != len(buf):
        raise CodecError(f"{len(buf) - pos} trailing bytes after last entry")
    return GradientPacket(entries)
