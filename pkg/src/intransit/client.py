"""Simulation-side API: ``initialize``, ``send`` and ``finalize``.

A session holds one blocking TCP connection per server rank that owns any
of the simulation's cells.  Sends are fire-and-forget; the kernel socket
buffers on both ends provide the bounded buffering, so ``send`` only blocks
when they are full.
"""
from __future__ import annotations

import socket
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConnectError, ProtocolViolationError, SessionClosedError, StudyMismatchError
from .protocol import (
    Ack,
    Data,
    Goodbye,
    Hello,
    PartitionMap,
    Welcome,
    build_partition_map,
    recv_message,
    route,
    send_message,
)


def _connect(endpoint: tuple[str, int], attempts: int, backoff: float) -> socket.socket:
    delay = backoff
    last: OSError | None = None
    for _ in range(attempts):
        try:
            sock = socket.create_connection(endpoint, timeout=10.0)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError as exc:
            last = exc
            time.sleep(delay)
            delay = min(delay * 2, 1.0)
    raise ConnectError(f"cannot reach server rank at {endpoint[0]}:{endpoint[1]}: {last}")


@dataclass
class ClientSession:
    simulation_id: int
    study_id: str
    fields: dict[str, tuple[int, int]]
    pmap: PartitionMap
    connections: dict[int, socket.socket]
    routes: dict[str, list[tuple[int, tuple[int, int]]]]
    n_timesteps: int = 0
    closed: bool = False
    sent_messages: int = field(default=0)

    @classmethod
    def initialize(
        cls,
        simulation_id: int,
        study_id: str,
        fields: Mapping[str, tuple[int, int]],
        endpoints: Sequence[tuple[str, int]],
        *,
        connect_attempts: int = 8,
        backoff: float = 0.05,
    ) -> "ClientSession":
        """Handshake with every rank owning part of ``fields``' cell intervals.

        The first Welcome tells the client the mesh size, from which it
        rebuilds the server's partition map.  Connection refusal is retried
        with exponential backoff before raising :class:`ConnectError`.
        """
        if not fields:
            raise ValueError("a session needs at least one field")
        endpoints = [(str(h), int(p)) for h, p in endpoints]
        hello = Hello(study_id, simulation_id, tuple((n, int(a), int(b)) for n, (a, b) in fields.items()))
        conns: dict[int, socket.socket] = {}

        def handshake(rank: int) -> Welcome:
            sock = _connect(endpoints[rank], connect_attempts, backoff)
            send_message(sock, hello)
            reply = recv_message(sock)
            if isinstance(reply, Ack) and reply.status:
                sock.close()
                raise StudyMismatchError(reply.detail)
            if not isinstance(reply, Welcome):
                sock.close()
                raise ProtocolViolationError(f"expected Welcome from rank {rank}, got {reply!r}")
            if reply.study_id != study_id:
                sock.close()
                raise StudyMismatchError(f"rank {rank} serves study {reply.study_id!r}, not {study_id!r}")
            conns[rank] = sock
            return reply

        try:
            first = handshake(0)
            if first.n_ranks != len(endpoints):
                raise ProtocolViolationError(f"server has {first.n_ranks} ranks, {len(endpoints)} endpoints given")
            pmap = build_partition_map(first.n_cells, first.n_ranks)
            routes = {name: route((int(a), int(b)), pmap) for name, (a, b) in fields.items()}
            needed = {r for pieces in routes.values() for r, _ in pieces}
            for rank in sorted(needed - {0}):
                handshake(rank)
            if 0 not in needed:
                send_message(conns[0], Goodbye(study_id, simulation_id))
                conns.pop(0).close()
        except BaseException:
            for s in conns.values():
                s.close()
            raise
        return cls(simulation_id, study_id, dict(fields), pmap, conns, routes, first.n_timesteps)

    def send(self, timestep: int, field_name: str, values: Sequence[float] | np.ndarray) -> None:
        """Ship one timestep of a field, split into one Data message per owning rank."""
        if self.closed:
            raise SessionClosedError("send after finalize")
        if field_name not in self.routes:
            raise ValueError(f"field {field_name!r} was not declared at initialize")
        vals = np.ascontiguousarray(values, dtype="<f8").ravel()
        start, stop = self.fields[field_name]
        if vals.size == 0 or vals.size != stop - start:
            raise ValueError(f"field {field_name!r} expects {stop - start} values, got {vals.size}")
        for rank, (a, b) in self.routes[field_name]:
            msg = Data(self.study_id, self.simulation_id, field_name, int(timestep), a, vals[a - start : b - start])
            send_message(self.connections[rank], msg)
            self.sent_messages += 1

    def finalize(self) -> None:
        """Say goodbye on every connection and close it; repeated calls are no-ops."""
        if self.closed:
            return
        self.closed = True
        for sock in self.connections.values():
            try:
                send_message(sock, Goodbye(self.study_id, self.simulation_id))
                sock.shutdown(socket.SHUT_WR)
                # wait for the server to close its side so every byte is consumed
                sock.settimeout(30.0)
                while sock.recv(4096):
                    pass
            except OSError:
                pass
            finally:
                sock.close()
        self.connections = {}
