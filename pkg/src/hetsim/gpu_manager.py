"""FIFO arbitration of the shared GPU.

Pure state machines for the manager partition and its clients, plus the
three-byte wire encoding used on hypervisor ports.  The engine in
:mod:`hetsim.hypervisor` supplies all interleaving.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Tuple

REQUEST, GRANT, RELEASE = "request", "grant", "release"
_KIND_CODES = {REQUEST: 0, GRANT: 1, RELEASE: 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}
_WIRE = struct.Struct("<BH")

IDLE, REQUESTED, HELD = "idle", "requested", "held"
WANT_GPU, GRANT_RECEIVED, DONE = "want_gpu", "grant_received", "done"


class ProtocolViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class ProtocolMsg:
    kind: str
    partition: str

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown protocol message kind {self.kind!r}")


@dataclass(frozen=True)
class ManagerState:
    owner: Optional[str] = None
    queue: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.owner is not None and self.owner in self.queue:
            raise ValueError("owner must not also be queued")
        if len(set(self.queue)) != len(self.queue):
            raise ValueError("queue holds duplicates")

    @property
    def quiescent(self) -> bool:
        return self.owner is None and not self.queue


def manager_handle(state: ManagerState, msg: ProtocolMsg):
    """Apply one client message; returns ``(new_state, outgoing)``."""
    p = msg.partition
    if msg.kind == REQUEST:
        if p == state.owner or p in state.queue:
            raise ProtocolViolation(f"duplicate request from {p}")
        if state.owner is None:
            return ManagerState(p, state.queue), [ProtocolMsg(GRANT, p)]
        return ManagerState(state.owner, state.queue + (p,)), []
    if msg.kind == RELEASE:
        if p != state.owner:
            raise ProtocolViolation(f"release from {p}, but the GPU is held by {state.owner}")
        if state.queue:
            nxt = state.queue[0]
            return ManagerState(nxt, state.queue[1:]), [ProtocolMsg(GRANT, nxt)]
        return ManagerState(None, ()), []
    raise ProtocolViolation(f"manager cannot handle {msg.kind} messages")


_CLIENT_TRANSITIONS = {
    (IDLE, WANT_GPU): (REQUESTED, REQUEST),
    (REQUESTED, GRANT_RECEIVED): (HELD, None),
    (HELD, DONE): (IDLE, RELEASE),
}


def client_step(phase: str, event: str, partition: str = ""):
    """Advance a client; returns ``(new_phase, outgoing)``."""
    try:
        nxt, emit = _CLIENT_TRANSITIONS[(phase, event)]
    except KeyError:
        raise ProtocolViolation(f"event {event!r} illegal in phase {phase!r}") from None
    return nxt, ([ProtocolMsg(emit, partition)] if emit else [])


def encode(msg: ProtocolMsg, index_of) -> bytes:
    """Wire form: kind byte then little-endian u16 partition index."""
    return _WIRE.pack(_KIND_CODES[msg.kind], index_of[msg.partition])


def decode(data: bytes, id_of) -> ProtocolMsg:
    if len(data) != _WIRE.size:
        raise ProtocolViolation(f"protocol message must be {_WIRE.size} bytes, got {len(data)}")
    code, idx = _WIRE.unpack(data)
    if code not in _CODE_KINDS:
        raise ProtocolViolation(f"unknown message kind code {code}")
    return ProtocolMsg(_CODE_KINDS[code], id_of[idx])
