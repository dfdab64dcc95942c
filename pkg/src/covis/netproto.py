"""Wire-frame codec and the shared-slot TDMA scheduler with loss-driven backoff.

Frame layout (all multi-byte fields little-endian)::

    magic      2 bytes   0x43 0x56
    version    1 byte    currently 1
    msg_type   1 byte    0 = embedding, 1 = heartbeat
    node_id    uint16
    seq        uint32    increments per transmitted frame
    superframe uint32    superframe index of the transmission
    payload_len uint16   <= 8192
    payload    payload_len bytes
    crc        uint32    IEEE CRC-32 over all preceding bytes

Scheduling: the superframe repeats at 15 Hz and is divided into n_slots
equal slots; a node owns slot ``node_id % n_slots``. Nodes sharing a slot are
allowed to collide; the backoff exists to resolve exactly that. A node
transmits in superframes ``k % tx_divisor == tx_phase``. The divisor doubles
(up to a cap) while measured peer loss sits above the high watermark and
decays by one below the low watermark; the band between holds. Each increase
re-draws the phase so same-slot contenders with equal divisors eventually
land on disjoint superframes instead of colliding forever.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MAGIC = b"CV"
VERSION = 1
MSG_EMBEDDING = 0
MSG_HEARTBEAT = 1
HEADER_LEN = 16
CRC_LEN = 4
MAX_PAYLOAD = 8192

DEFAULT_SUPERFRAME_HZ = 15.0
DEFAULT_HIGH_WATERMARK = 0.10
DEFAULT_LOW_WATERMARK = 0.05
DEFAULT_LOSS_WINDOW = 2.0
DEFAULT_MAX_DIVISOR = 8


class FrameError(Exception):
    """Base class for frame decode failures."""


class BadMagic(FrameError):
    pass


class BadVersion(FrameError):
    pass


class BadCrc(FrameError):
    pass


class Truncated(FrameError):
    """Byte string shorter or longer than the declared frame length."""


class OverlongPayload(FrameError):
    pass


@dataclass(frozen=True)
class Frame:
    node_id: int
    seq: int
    superframe_idx: int
    payload: bytes = b""
    msg_type: int = MSG_EMBEDDING
    version: int = VERSION

    def __post_init__(self):
        if not 0 <= self.node_id < 1 << 16:
            raise ValueError("node_id out of uint16 range")
        if not 0 <= self.seq < 1 << 32:
            raise ValueError("seq out of uint32 range")
        if not 0 <= self.superframe_idx < 1 << 32:
            raise ValueError("superframe_idx out of uint32 range")
        if not 0 <= self.msg_type < 1 << 8:
            raise ValueError("msg_type out of uint8 range")

    def wire_length(self) -> int:
        return HEADER_LEN + len(self.payload) + CRC_LEN


def encode(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise OverlongPayload(f"payload {len(frame.payload)} exceeds {MAX_PAYLOAD}")
    header = (
        MAGIC
        + bytes((frame.version, frame.msg_type))
        + frame.node_id.to_bytes(2, "little")
        + frame.seq.to_bytes(4, "little")
        + frame.superframe_idx.to_bytes(4, "little")
        + len(frame.payload).to_bytes(2, "little")
    )
    body = header + frame.payload
    return body + zlib.crc32(body).to_bytes(4, "little")


def decode(data: bytes) -> Frame:
    """Parse one frame; raises a typed FrameError for any malformed input."""
    if len(data) < HEADER_LEN + CRC_LEN:
        raise Truncated(f"{len(data)} bytes, need at least {HEADER_LEN + CRC_LEN}")
    if data[:2] != MAGIC:
        raise BadMagic(f"magic {data[:2]!r}")
    version = data[2]
    if version != VERSION:
        raise BadVersion(f"version {version}")
    msg_type = data[3]
    node_id = int.from_bytes(data[4:6], "little")
    seq = int.from_bytes(data[6:10], "little")
    superframe_idx = int.from_bytes(data[10:14], "little")
    payload_len = int.from_bytes(data[14:16], "little")
    if payload_len > MAX_PAYLOAD:
        raise OverlongPayload(f"declared payload {payload_len}")
    total = HEADER_LEN + payload_len + CRC_LEN
    if len(data) != total:
        raise Truncated(f"{len(data)} bytes, declared frame is {total}")
    crc = int.from_bytes(data[-4:], "little")
    if zlib.crc32(data[:-4]) != crc:
        raise BadCrc("crc mismatch")
    return Frame(
        node_id=node_id,
        seq=seq,
        superframe_idx=superframe_idx,
        payload=data[HEADER_LEN:-4],
        msg_type=msg_type,
        version=version,
    )


@dataclass
class PeerTracker:
    """Received (time, seq) pairs for one peer over a sliding window."""

    window: float
    entries: list[tuple[float, int]] = field(default_factory=list)
    registered_at: float = 0.0
    last_seen: Optional[float] = None

    def record(self, now: float, seq: int) -> None:
        self.entries.append((now, seq))
        self.last_seen = now
        self._evict(now)

    def _evict(self, now: float) -> None:
        cutoff = now - self.window
        self.entries = [(t, s) for t, s in self.entries if t >= cutoff]

    def loss_estimate(self, now: float) -> float:
        """Gap fraction over the window; silence from a known peer counts as 1."""
        self._evict(now)
        if not self.entries:
            reference = self.last_seen if self.last_seen is not None else self.registered_at
            return 1.0 if now - reference >= self.window else 0.0
        seqs = [s for _, s in self.entries]
        expected = max(seqs) - min(seqs) + 1
        return (expected - len(seqs)) / expected


@dataclass
class SchedulerState:
    """Per-node TDMA transmit schedule plus backoff state."""

    node_id: int
    n_slots: int = 4
    superframe_period: float = 1.0 / DEFAULT_SUPERFRAME_HZ
    tx_divisor: int = 1
    tx_phase: int = 0
    max_divisor: int = DEFAULT_MAX_DIVISOR
    high_watermark: float = DEFAULT_HIGH_WATERMARK
    low_watermark: float = DEFAULT_LOW_WATERMARK
    loss_window: float = DEFAULT_LOSS_WINDOW
    loss_aggregate: str = "max"  # or "mean"
    seq_counter: int = 0
    peers: dict[int, PeerTracker] = field(default_factory=dict)
    rng: Optional[np.random.Generator] = None
    last_adapt_action: float = -math.inf

    def __post_init__(self):
        if self.n_slots < 1:
            raise ValueError("n_slots must be >= 1")
        if not 1 <= self.tx_divisor <= self.max_divisor:
            raise ValueError("tx_divisor out of range")
        if self.rng is None:
            self.rng = np.random.default_rng(self.node_id)

    @property
    def slot_index(self) -> int:
        return self.node_id % self.n_slots

    @property
    def slot_width(self) -> float:
        return self.superframe_period / self.n_slots

    def register_peer(self, peer_id: int, now: float) -> None:
        """Pre-register an expected peer so its silence counts as loss."""
        if peer_id not in self.peers:
            self.peers[peer_id] = PeerTracker(window=self.loss_window, registered_at=now)

    def superframe_of(self, t: float) -> int:
        return int(math.floor(t / self.superframe_period + 1e-9))

    def eligible(self, superframe_idx: int) -> bool:
        return superframe_idx % self.tx_divisor == self.tx_phase

    def next_seq(self) -> int:
        seq = self.seq_counter
        self.seq_counter += 1
        return seq

    def max_peer_loss(self, now: float) -> float:
        losses = [tr.loss_estimate(now) for tr in self.peers.values()]
        if not losses:
            return 0.0
        return max(losses) if self.loss_aggregate == "max" else sum(losses) / len(losses)


def next_tx_time(state: SchedulerState, now: float) -> float:
    """Earliest t >= now in the node's slot on an eligible superframe."""
    offset = state.slot_index * state.slot_width
    k = math.ceil((now - offset) / state.superframe_period - 1e-9)
    k = max(k, 0)
    delta = (state.tx_phase - k) % state.tx_divisor
    k += delta
    return k * state.superframe_period + offset


def on_frame_received(state: SchedulerState, frame: Frame, now: float) -> SchedulerState:
    """Feed the per-peer loss estimator from sequence gaps."""
    tracker = state.peers.get(frame.node_id)
    if tracker is None:
        tracker = PeerTracker(window=state.loss_window, registered_at=now)
        state.peers[frame.node_id] = tracker
    tracker.record(now, frame.seq)
    return state


def adapt_rate(state: SchedulerState, now: float) -> SchedulerState:
    """Backoff step, intended to run once per superframe.

    Above the high watermark the divisor doubles (capped) and the transmit
    phase is re-drawn; below the low watermark it decays by one (phase kept,
    reduced modulo the new divisor); inside the band it holds. Increases are
    rate-limited to one per loss window, decreases to one per two windows so
    the estimator can catch up with the new schedule.
    """
    loss = state.max_peer_loss(now)
    since = now - state.last_adapt_action
    if loss > state.high_watermark:
        if since >= state.loss_window:
            state.tx_divisor = min(state.tx_divisor * 2, state.max_divisor)
            state.tx_phase = (
                int(state.rng.integers(state.tx_divisor)) if state.tx_divisor > 1 else 0
            )
            state.last_adapt_action = now
    elif loss < state.low_watermark:
        if state.tx_divisor > 1 and since >= 2.0 * state.loss_window:
            state.tx_divisor -= 1
            state.tx_phase %= state.tx_divisor
            state.last_adapt_action = now
    return state
