"""Deterministic discrete-event simulation of a lossy shared broadcast medium.

Single-threaded event loop over a heap ordered by (time, kind rank, insertion
counter); identical (world, duration, seed) inputs replay byte-identically.
Two transmissions whose airtime intervals overlap destroy each other at every
receiver; otherwise each receiver independently drops the frame with the
medium's loss probability. Transmission intervals are half-open, so a frame
ending exactly when another starts does not collide.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .netproto import Frame, SchedulerState, adapt_rate, encode, on_frame_received

KIND_TX_START = "tx_start"
KIND_TX_END = "tx_end"
KIND_DELIVER = "deliver"
KIND_TICK = "tick"

# Heap rank: transmissions must leave the active set before anything that
# starts at the same instant is checked against them.
_RANK = {KIND_TX_END: 0, KIND_DELIVER: 1, KIND_TICK: 2, "callback": 3}


@dataclass(frozen=True)
class Medium:
    bitrate: float = 6e6  # bits/second
    base_loss: float = 0.03
    loss_slope: float = 0.01  # extra loss per node beyond two
    propagation: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.base_loss < 1.0:
            raise ValueError("base_loss must be in [0, 1)")
        if self.loss_slope < 0.0 or self.bitrate <= 0.0:
            raise ValueError("invalid medium parameters")


def loss_probability(medium: Medium, n_nodes: int) -> float:
    """Per-receiver drop probability; grows with node count, capped at 0.5."""
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    return min(0.5, medium.base_loss + medium.loss_slope * max(0, n_nodes - 2))


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str
    node_id: int = -1
    peer_id: int = -1
    seq: int = -1
    superframe: int = -1
    collided: bool = False

    def to_dict(self) -> dict:
        return {
            "t": self.time,
            "kind": self.kind,
            "node": self.node_id,
            "peer": self.peer_id,
            "seq": self.seq,
            "superframe": self.superframe,
            "collided": self.collided,
        }


@dataclass
class _Transmission:
    frame: Frame
    tx_node: int
    t_start: float
    t_end: float
    collided: bool = False


class Simulator:
    """Event loop plus broadcast medium shared by all registered behaviors."""

    def __init__(self, medium: Medium, seed: int, superframe_hz: float = 15.0):
        self.medium = medium
        self.seed = seed
        self.superframe_period = 1.0 / superframe_hz
        self.now = 0.0
        self.events: list[SimEvent] = []
        self.behaviors: dict[int, "BroadcastNode"] = {}
        self.capture_sink: Optional[Callable[[float, bytes], None]] = None
        self._heap: list = []
        self._counter = 0
        self._active: list[_Transmission] = []
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0515]))

    # -- behaviors ---------------------------------------------------------

    def add_node(self, behavior: "BroadcastNode") -> None:
        if behavior.node_id in self.behaviors:
            raise ValueError(f"duplicate node id {behavior.node_id}")
        self.behaviors[behavior.node_id] = behavior

    def node_rng_seed(self, node_id: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, node_id]))

    # -- scheduling --------------------------------------------------------

    def schedule(self, t: float, fn: Callable[[float], None]) -> None:
        heapq.heappush(self._heap, (t, _RANK["callback"], self._counter, fn, None))
        self._counter += 1

    def _push_event(self, t: float, kind: str, payload) -> None:
        heapq.heappush(self._heap, (t, _RANK[kind], self._counter, None, (kind, payload)))
        self._counter += 1

    # -- medium ------------------------------------------------------------

    def transmit(self, frame: Frame, tx_node: int) -> None:
        wire = encode(frame)
        if self.capture_sink is not None:
            self.capture_sink(self.now, wire)
        airtime = len(wire) * 8.0 / self.medium.bitrate
        tx = _Transmission(frame, tx_node, self.now, self.now + airtime)
        for other in self._active:
            if self.now < other.t_end and other.t_start < tx.t_end:
                other.collided = True
                tx.collided = True
        self._active.append(tx)
        self.events.append(
            SimEvent(self.now, KIND_TX_START, tx_node, -1, frame.seq, frame.superframe_idx)
        )
        self._push_event(tx.t_end, KIND_TX_END, tx)

    def _finish_transmission(self, tx: _Transmission) -> None:
        self._active.remove(tx)
        self.events.append(
            SimEvent(
                tx.t_end,
                KIND_TX_END,
                tx.tx_node,
                -1,
                tx.frame.seq,
                tx.frame.superframe_idx,
                collided=tx.collided,
            )
        )
        if tx.collided:
            return
        p = loss_probability(self.medium, len(self.behaviors))
        for peer_id in sorted(self.behaviors):
            if peer_id == tx.tx_node:
                continue
            if self._rng.random() < p:
                continue
            self._push_event(
                tx.t_end + self.medium.propagation, KIND_DELIVER, (peer_id, tx.frame)
            )

    def _deliver(self, peer_id: int, frame: Frame) -> None:
        self.events.append(
            SimEvent(self.now, KIND_DELIVER, peer_id, frame.node_id, frame.seq, frame.superframe_idx)
        )
        self.behaviors[peer_id].on_receive(self, frame, self.now)

    # -- run loop ----------------------------------------------------------

    def run(self, duration: float) -> list[SimEvent]:
        if duration <= 0.0:
            raise ValueError("duration must be positive")
        n_ticks = int(math.floor(duration / self.superframe_period + 1e-9))
        for k in range(n_ticks + 1):
            self._push_event(k * self.superframe_period, KIND_TICK, k)
        for behavior in [self.behaviors[i] for i in sorted(self.behaviors)]:
            behavior.on_start(self, 0.0)
        while self._heap:
            t, _rank, _c, fn, ev = heapq.heappop(self._heap)
            if t > duration + 1e-12:
                break
            self.now = t
            if fn is not None:
                fn(t)
            else:
                kind, payload = ev
                if kind == KIND_TX_END:
                    self._finish_transmission(payload)
                elif kind == KIND_DELIVER:
                    self._deliver(*payload)
                elif kind == KIND_TICK:
                    self.events.append(SimEvent(t, KIND_TICK, superframe=payload))
                    for node_id in sorted(self.behaviors):
                        self.behaviors[node_id].on_tick(self, payload, t)
        return self.events


class BroadcastNode:
    """TDMA broadcast participant: wakes every superframe in its own slot,
    adapts its rate from measured peer loss, and transmits when eligible.

    Subclass hooks: ``payload_for(superframe)`` supplies the broadcast bytes,
    ``handle_frame`` consumes deliveries, ``on_tick`` runs at superframe
    boundaries.
    """

    def __init__(
        self,
        node_id: int,
        n_slots: int = 4,
        payload_bytes: int = 6144,
        roster: Iterable[int] = (),
        scheduler: Optional[SchedulerState] = None,
        superframe_hz: float = 15.0,
    ):
        self.node_id = node_id
        self.scheduler = scheduler or SchedulerState(
            node_id=node_id, n_slots=n_slots, superframe_period=1.0 / superframe_hz
        )
        self.payload_bytes = payload_bytes
        self.roster = tuple(roster)
        self.trace: list[dict] = []  # per-superframe (t, divisor, loss) samples
        self._payload = b""
        self._sim: Optional[Simulator] = None

    # -- hooks ---------------------------------------------------------------

    def payload_for(self, superframe_idx: int, seq: int) -> bytes:
        return self._payload

    def handle_frame(self, sim: Simulator, frame: Frame, now: float) -> None:
        pass

    def on_tick(self, sim: Simulator, superframe_idx: int, now: float) -> None:
        pass

    # -- wiring --------------------------------------------------------------

    def on_start(self, sim: Simulator, now: float) -> None:
        self._sim = sim
        self.scheduler.rng = sim.node_rng_seed(self.node_id)
        self._payload = bytes(sim.node_rng_seed(self.node_id ^ 0xE0B).bytes(self.payload_bytes))
        for peer in self.roster:
            if peer != self.node_id:
                self.scheduler.register_peer(peer, now)
        sim.schedule(next_tx_time_first(self.scheduler, now), self._slot_callback)

    def _slot_callback(self, now: float) -> None:
        sim = self._sim
        state = self.scheduler
        k = state.superframe_of(now)
        adapt_rate(state, now)
        self.trace.append(
            {"t": now, "divisor": state.tx_divisor, "loss": state.max_peer_loss(now)}
        )
        if state.eligible(k):
            seq = state.next_seq()
            frame = Frame(
                node_id=self.node_id,
                seq=seq,
                superframe_idx=k,
                payload=self.payload_for(k, seq),
            )
            sim.transmit(frame, self.node_id)
        sim.schedule((k + 1) * state.superframe_period + state.slot_index * state.slot_width,
                     self._slot_callback)

    def on_receive(self, sim: Simulator, frame: Frame, now: float) -> None:
        on_frame_received(self.scheduler, frame, now)
        self.handle_frame(sim, frame, now)


def next_tx_time_first(state: SchedulerState, now: float) -> float:
    """First slot wakeup: every superframe, regardless of divisor."""
    offset = state.slot_index * state.slot_width
    k = max(0, math.ceil((now - offset) / state.superframe_period - 1e-9))
    return k * state.superframe_period + offset


def run(
    behaviors: Iterable[BroadcastNode],
    duration: float,
    seed: int,
    medium: Optional[Medium] = None,
    superframe_hz: float = 15.0,
) -> list[SimEvent]:
    """Build a simulator around the behaviors and run it."""
    sim = Simulator(medium or Medium(), seed=seed, superframe_hz=superframe_hz)
    for b in behaviors:
        sim.add_node(b)
    return sim.run(duration)


def events_to_jsonl(events: Iterable[SimEvent]) -> str:
    return "\n".join(json.dumps(e.to_dict(), sort_keys=True) for e in events) + "\n"


def summarize(events: Iterable[SimEvent], divisor_by_node: Optional[dict[int, float]] = None) -> list[dict]:
    """Per-node counters: frames_tx, frames_rx, collisions, loss_rate."""
    tx: dict[int, int] = {}
    rx: dict[int, int] = {}
    collided: dict[int, int] = {}
    received_of: dict[int, int] = {}  # deliveries of this sender's frames
    for e in events:
        if e.kind == KIND_TX_START:
            tx[e.node_id] = tx.get(e.node_id, 0) + 1
        elif e.kind == KIND_TX_END and e.collided:
            collided[e.node_id] = collided.get(e.node_id, 0) + 1
        elif e.kind == KIND_DELIVER:
            rx[e.node_id] = rx.get(e.node_id, 0) + 1
            received_of[e.peer_id] = received_of.get(e.peer_id, 0) + 1
    nodes = sorted(set(tx) | set(rx) | set(collided))
    n = len(nodes)
    rows = []
    for node in nodes:
        sent = tx.get(node, 0)
        # Copies that could have been delivered vs copies actually delivered.
        potential = sent * max(0, n - 1)
        delivered = received_of.get(node, 0)
        rows.append(
            {
                "node_id": node,
                "frames_tx": sent,
                "frames_rx": rx.get(node, 0),
                "collisions": collided.get(node, 0),
                "loss_rate": 1.0 - delivered / potential if potential else 0.0,
                "mean_divisor": (divisor_by_node or {}).get(node, float("nan")),
            }
        )
    return rows
