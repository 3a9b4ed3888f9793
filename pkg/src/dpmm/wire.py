"""Length-prefixed binary message framing.

Used verbatim on TCP sockets and as the serialization for in-process
queues so byte accounting is identical across transports.  All fields are
little-endian.  Frame layout::

    magic u16 (0xD1B3) | proto-version u8 (=1) | tag u8 | payload-len u64 | payload

Temporary component ids are negative; fields documented as unsigned carry
them two's-complement via signed packing of the same width.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .families import SuffStats
from .sampler import Delta

MAGIC = 0xD1B3
PROTO_VERSION = 1
HEADER = struct.Struct("<HBBQ")

TAG_PULL = 0
TAG_SNAPSHOT = 1
TAG_DELTA = 2
TAG_ACK = 3
TAG_SHUTDOWN = 4

MAX_PAYLOAD = 1 << 32  # sanity bound against corrupt length prefixes


class WireError(ValueError):
    """Malformed frame: bad magic, truncation, unknown tag, bad length."""


@dataclass
class PullRequest:
    worker_id: int
    last_version: int


@dataclass
class SnapshotMsg:
    version: int
    remap: list[tuple[int, int]] = field(default_factory=list)
    components: list[tuple[int, float, int, bool, np.ndarray]] = field(
        default_factory=list
    )  # (id, kappa, n, atomic, beta)


@dataclass
class DeltaPush:
    delta: Delta


@dataclass
class Ack:
    version: int


@dataclass
class Shutdown:
    pass


Message = PullRequest | SnapshotMsg | DeltaPush | Ack | Shutdown


def _frame(tag: int, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, PROTO_VERSION, tag, len(payload)) + payload


def encode(msg: Message) -> bytes:
    if isinstance(msg, PullRequest):
        return _frame(TAG_PULL, struct.pack("<IQ", msg.worker_id, msg.last_version))
    if isinstance(msg, SnapshotMsg):
        parts = [struct.pack("<QI", msg.version, len(msg.remap))]
        for old, new in msg.remap:
            parts.append(struct.pack("<qQ", old, new))
        parts.append(struct.pack("<I", len(msg.components)))
        for cid, kappa, n, atomic, beta in msg.components:
            beta = np.asarray(beta, dtype="<f8")
            parts.append(
                struct.pack("<QdqBI", cid, kappa, n, 1 if atomic else 0, beta.size)
            )
            parts.append(beta.tobytes())
        return _frame(TAG_SNAPSHOT, b"".join(parts))
    if isinstance(msg, DeltaPush):
        d = msg.delta
        parts = [
            struct.pack(
                "<IQI", d.worker_id, d.based_on_version, len(d.entries)
            )
        ]
        for cid, dbeta, dkappa, dn in d.entries:
            dbeta = np.asarray(dbeta, dtype="<f8")
            parts.append(struct.pack("<Qdq", cid, dkappa, dn))
            parts.append(dbeta.tobytes())
        parts.append(struct.pack("<I", len(d.new_components)))
        for temp_id, stats in d.new_components:
            psi = np.asarray(stats.psi, dtype="<f8")
            parts.append(struct.pack("<qq", temp_id, stats.count))
            parts.append(psi.tobytes())
        return _frame(TAG_DELTA, b"".join(parts))
    if isinstance(msg, Ack):
        return _frame(TAG_ACK, struct.pack("<Q", msg.version))
    if isinstance(msg, Shutdown):
        return _frame(TAG_SHUTDOWN, b"")
    raise TypeError(f"not a wire message: {type(msg)!r}")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        st = struct.Struct("<" + fmt)
        if self.pos + st.size > len(self.buf):
            raise WireError("truncated payload")
        vals = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return vals

    def take_f64(self, count: int) -> np.ndarray:
        nbytes = 8 * count
        if self.pos + nbytes > len(self.buf):
            raise WireError("truncated payload")
        out = np.frombuffer(self.buf, dtype="<f8", count=count, offset=self.pos).copy()
        self.pos += nbytes
        return out

    def done(self):
        if self.pos != len(self.buf):
            raise WireError("trailing bytes in payload")


def decode(data: bytes, dim: int | None = None) -> Message:
    """Decode one frame.  ``dim`` is the family dimension, required for
    DeltaPush payloads (their records do not carry it)."""
    if len(data) < HEADER.size:
        raise WireError("truncated header")
    magic, ver, tag, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise WireError(f"bad magic 0x{magic:04X}")
    if ver != PROTO_VERSION:
        raise WireError(f"unsupported protocol version {ver}")
    if length > MAX_PAYLOAD:
        raise WireError("payload length overflow")
    if len(data) != HEADER.size + length:
        raise WireError("frame length mismatch")
    payload = data[HEADER.size :]
    rd = _Reader(payload)
    if tag == TAG_PULL:
        worker_id, last_version = rd.take("IQ")
        rd.done()
        return PullRequest(worker_id, last_version)
    if tag == TAG_SNAPSHOT:
        version, n_remap = rd.take("QI")
        _check_count(n_remap, len(payload))
        remap = [rd.take("qQ") for _ in range(n_remap)]
        (n_comp,) = rd.take("I")
        _check_count(n_comp, len(payload))
        comps = []
        for _ in range(n_comp):
            cid, kappa, n, atomic, d = rd.take("QdqBI")
            _check_count(d, len(payload))
            comps.append((cid, kappa, n, bool(atomic), rd.take_f64(d)))
        rd.done()
        return SnapshotMsg(version, remap, comps)
    if tag == TAG_DELTA:
        if dim is None:
            raise WireError("decoding a DeltaPush requires the family dimension")
        worker_id, based_on, n_entries = rd.take("IQI")
        _check_count(n_entries, len(payload))
        entries = []
        for _ in range(n_entries):
            cid, dkappa, dn = rd.take("Qdq")
            entries.append((cid, rd.take_f64(dim), dkappa, dn))
        (n_new,) = rd.take("I")
        _check_count(n_new, len(payload))
        new = []
        for _ in range(n_new):
            temp_id, count = rd.take("qq")
            new.append((temp_id, SuffStats(rd.take_f64(dim), count)))
        rd.done()
        return DeltaPush(Delta(entries, new, worker_id, based_on))
    if tag == TAG_ACK:
        (version,) = rd.take("Q")
        rd.done()
        return Ack(version)
    if tag == TAG_SHUTDOWN:
        rd.done()
        return Shutdown()
    raise WireError(f"unknown tag {tag}")


def _check_count(count: int, payload_len: int):
    # each record is at least 8 bytes; reject counts a valid payload of
    # this size could never hold
    if count > payload_len:
        raise WireError("record count exceeds payload capacity")


def read_frame(sock) -> bytes:
    """Read one full frame from a socket-like object (blocking)."""
    head = _read_exact(sock, HEADER.size)
    magic, ver, tag, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise WireError(f"bad magic 0x{magic:04X}")
    if length > MAX_PAYLOAD:
        raise WireError("payload length overflow")
    return head + _read_exact(sock, length)


def _read_exact(sock, nbytes: int) -> bytes:
    chunks = []
    got = 0
    while got < nbytes:
        chunk = sock.recv(nbytes - got)
        if not chunk:
            raise WireError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)
