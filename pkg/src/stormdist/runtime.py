"""Deterministic worker-server message fabric with exact cost accounting.

Workers and server run in one process; "communication" moves numpy payloads
through a Transport that validates protocol discipline (every worker speaks
exactly once per exchange, tags match the round) and charges bytes as if
each message crossed a wire: a 16-byte header (kind u32, worker_id u32,
iteration u64, little-endian) plus 8 bytes per float64 payload entry.
Broadcasts are charged per link. Reductions always fold payloads in
ascending worker-id order, which is what makes reruns and thread-parallel
execution bitwise identical.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ContractViolation, ProtocolError

HEADER = struct.Struct("<IIQ")
HEADER_BYTES = HEADER.size  # 16
FLOAT_BYTES = 8

THREADS_ENV_VAR = "STORMDIST_THREADS"


class MessageKind(IntEnum):
    GRAD_NORM_UP = 0
    GBAR_DOWN = 1
    DIRECTION_UP = 2
    DIRECTION_DOWN = 3
    ETA_DOWN = 4


@dataclass(frozen=True)
class Message:
    """One simulated wire message; payload is a 1-D float64 array."""

    kind: MessageKind
    worker_id: int
    iteration: int
    payload: np.ndarray

    def nbytes(self) -> int:
        return HEADER_BYTES + FLOAT_BYTES * self.payload.shape[0]


def scalar_message(kind: MessageKind, worker_id: int, iteration: int, value: float) -> Message:
    return Message(kind, worker_id, iteration, np.array([value], dtype=np.float64))


def encode_message(msg: Message) -> bytes:
    """Exact wire form: little-endian header and payload."""
    return HEADER.pack(int(msg.kind), msg.worker_id, msg.iteration) + msg.payload.astype(
        "<f8", copy=False
    ).tobytes()


def decode_message(buf: bytes) -> Message:
    kind, worker_id, iteration = HEADER.unpack_from(buf, 0)
    payload = np.frombuffer(buf, dtype="<f8", offset=HEADER_BYTES).astype(np.float64)
    return Message(MessageKind(kind), worker_id, iteration, payload)


@dataclass
class RoundAccounting:
    """Cumulative cost counters; ifo_per_worker counts oracle calls of one worker."""

    rounds: int = 0
    ifo_per_worker: int = 0
    bytes_up: int = 0
    bytes_down: int = 0


class TraceWriter:
    """Appends encoded messages to a binary trace file (length-prefixed)."""

    def __init__(self, path):
        self._fh = open(path, "wb")

    def write(self, msg: Message):
        raw = encode_message(msg)
        self._fh.write(struct.pack("<I", len(raw)))
        self._fh.write(raw)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path) -> list[Message]:
    out = []
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                return out
            (n,) = struct.unpack("<I", head)
            out.append(decode_message(fh.read(n)))


def mean_reducer(payloads: list[np.ndarray]) -> np.ndarray:
    """Ascending-order sequential mean; the only reduction used in exchanges."""
    acc = payloads[0].copy()
    for p in payloads[1:]:
        acc += p
    acc /= len(payloads)
    return acc


class Transport:
    """Server-side endpoint: gathers, reduces, broadcasts, and counts bytes."""

    def __init__(self, num_workers: int, accounting: RoundAccounting | None = None, trace: TraceWriter | None = None):
        self.num_workers = num_workers
        self.accounting = accounting if accounting is not None else RoundAccounting()
        self.trace = trace

    def _validate(self, messages: list[Message], kind: MessageKind, iteration: int) -> list[np.ndarray]:
        if len(messages) != self.num_workers:
            raise ProtocolError(
                f"round {iteration}: expected {self.num_workers} messages of kind "
                f"{kind.name}, got {len(messages)}"
            )
        ordered = True
        for i, m in enumerate(messages):
            if m.kind != kind:
                raise ProtocolError(
                    f"round {iteration}: worker {m.worker_id} sent {m.kind.name}, expected {kind.name}"
                )
            if m.iteration != iteration:
                raise ProtocolError(
                    f"round {iteration}: worker {m.worker_id} sent a message tagged {m.iteration}"
                )
            if m.worker_id != i:
                ordered = False
        if ordered:
            return [m.payload for m in messages]
        by_id: dict[int, Message] = {}
        for m in messages:
            if m.worker_id in by_id:
                raise ProtocolError(f"round {iteration}: duplicate message from worker {m.worker_id}")
            by_id[m.worker_id] = m
        missing = set(range(self.num_workers)) - set(by_id)
        if missing:
            raise ProtocolError(f"round {iteration}: no message from worker {min(missing)}")
        return [by_id[k].payload for k in range(self.num_workers)]

    def gather(self, messages: list[Message], kind: MessageKind, iteration: int) -> list[np.ndarray]:
        """Collect one message per worker; returns payloads in ascending id order."""
        payloads = self._validate(messages, kind, iteration)
        for m in messages:
            self.accounting.bytes_up += m.nbytes()
            if self.trace:
                self.trace.write(m)
        return payloads

    def gather_reduce(self, messages: list[Message], reducer, kind: MessageKind, iteration: int):
        return reducer(self.gather(messages, kind, iteration))

    def broadcast(self, kind: MessageKind, iteration: int, payload: np.ndarray) -> np.ndarray:
        """Send one identical message per worker; charged per link."""
        payload = np.atleast_1d(np.asarray(payload, dtype=np.float64))
        per_link = HEADER_BYTES + FLOAT_BYTES * payload.shape[0]
        self.accounting.bytes_down += per_link * self.num_workers
        if self.trace:
            for worker_id in range(self.num_workers):
                self.trace.write(Message(kind, worker_id, iteration, payload))
        return payload


class WorkerPool:
    """Maps a function over workers, serially or with a thread pool.

    Results come back in worker order either way, and worker closures touch
    disjoint state, so the execution mode cannot change any result bit.
    The STORMDIST_THREADS environment variable caps the pool size.
    """

    def __init__(self, threads: int = 1):
        cap = os.environ.get(THREADS_ENV_VAR)
        if cap is not None:
            threads = min(threads, max(1, int(cap)))
        self.threads = max(1, threads)
        self._pool = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None

    def map(self, fn, items):
        if self._pool is None:
            return [fn(item) for item in items]
        return list(self._pool.map(fn, items))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _bitwise_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.tobytes() == b.tobytes()


def run_round(workers, server_state, hooks):
    """Execute one synchronized round and validate its contract.

    ``hooks`` supplies the algorithm body via ``execute(workers,
    server_state) -> (server_state', record)``; this wrapper enforces the
    barrier (all workers enter at the same iteration) and the postcondition
    that every worker leaves with bitwise-identical iterate and direction.
    Worker objects are updated in place.
    """
    iterations = {w.iteration for w in workers}
    if len(iterations) != 1:
        raise ProtocolError(f"barrier violated: workers at iterations {sorted(iterations)}")
    server_state, record = hooks.execute(workers, server_state)
    first = workers[0]
    for w in workers[1:]:
        if w.iteration != first.iteration or not _bitwise_equal(w.x, first.x):
            raise ProtocolError(f"worker {w.worker_id} left round {first.iteration} inconsistent")
        # broadcast hands every worker the same array; anything else must match bitwise
        if w.direction.d is not first.direction.d and not _bitwise_equal(w.direction.d, first.direction.d):
            raise ProtocolError(f"worker {w.worker_id} holds a divergent direction")
    return workers, server_state, record
