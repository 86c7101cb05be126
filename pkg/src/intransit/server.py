"""Partitioned statistics server.

Each rank owns one contiguous block of cells and a private
:class:`RankState` (field statistics plus the processed-message ledger).
:class:`ServerState` is the deterministic core and can be driven message by
message from a test; :class:`ServerRuntime` puts it behind TCP listeners,
one worker thread per rank, periodic checkpoints and heartbeats.

Checkpoint file, one per rank per epoch (little-endian)::

    magic b"ITCK" | u16 version | u16 rank | u64 epoch | 32-byte config hash
    u32 section count, then per section:
        u16 name length, name | u8 dtype length, dtype | u8 ndim | u64 * ndim shape
        u64 byte count, raw bytes
    32-byte SHA-256 of everything above

Files are written to a temporary name and renamed; the ``LATEST`` file is
replaced only after every rank finished writing, which makes an epoch
atomic across ranks.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import queue
import socket
import struct
import sys
import threading
import time
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .config import StudyConfig
from .errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DataQualityError,
    IntransitError,
    ProtocolError,
    ProtocolViolationError,
)
from .export import write_export
from .field_stats import FieldStatistics, statistic_names
from .protocol import (
    Ack,
    Data,
    FrameBuffer,
    Goodbye,
    Heartbeat,
    Hello,
    PartitionMap,
    Welcome,
    build_partition_map,
    encode_message,
    recv_message,
    send_message,
)

log = logging.getLogger(__name__)

ENDPOINTS_FILE = "endpoints.json"
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_IDLE = 3

CKPT_MAGIC = b"ITCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHHQ32sI")
_DIGEST = 32


def checkpoint_dir(cfg: StudyConfig) -> Path:
    return cfg.output_path / "checkpoint"


def export_dir(cfg: StudyConfig) -> Path:
    return cfg.output_path / "export"


def raw_path(cfg: StudyConfig, field: str) -> Path:
    return cfg.output_path / "raw" / f"{field}.npy"


def log_path(cfg: StudyConfig, rank: int) -> Path:
    return cfg.output_path / "msglog" / f"rank{rank}.log"


# -- per-rank state ------------------------------------------------------------------


class RankState:
    """Everything one rank owns; never touched by another rank."""

    def __init__(self, cfg: StudyConfig, rank: int, cell_range: tuple[int, int]) -> None:
        self.cfg = cfg
        self.rank = rank
        self.cell_range = cell_range
        stats_cfg = cfg.statistics()
        self.fields = {f: FieldStatistics(f, cell_range, cfg.n_timesteps, stats_cfg) for f in cfg.fields}
        # ledger: one mark per (sim, field, timestep); its size is fixed by the study
        self.marks = {f: np.zeros((cfg.n_sims, cfg.n_timesteps), dtype=bool) for f in cfg.fields}
        self.applied = 0
        self.duplicates = 0
        self.rejected = 0
        self.raw: dict[str, np.memmap] = {}
        self.msglog = None
        self.msglog_offset = 0

    def attach_raw(self, arrays: dict[str, np.memmap]) -> None:
        self.raw = arrays

    def attach_log(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(path, "r+b" if path.exists() else "w+b")
        fh.truncate(self.msglog_offset)
        fh.seek(self.msglog_offset)
        self.msglog = fh

    def check(self, msg: Data) -> None:
        if msg.study_id != self.cfg.study_id:
            raise ProtocolViolationError(f"study {msg.study_id!r} is not {self.cfg.study_id!r}")
        if msg.field_name not in self.fields:
            raise ProtocolViolationError(f"unknown field {msg.field_name!r}")
        if not 0 <= msg.simulation_id < self.cfg.n_sims:
            raise ProtocolViolationError(f"simulation id {msg.simulation_id} outside [0, {self.cfg.n_sims})")
        if not 0 <= msg.timestep < self.cfg.n_timesteps:
            raise ProtocolViolationError(f"timestep {msg.timestep} outside [0, {self.cfg.n_timesteps})")

    def apply(self, msg: Data) -> bool:
        """Fold a Data message in unless its ledger key is already marked."""
        self.check(msg)
        sim, name, t = msg.key
        if self.marks[name][sim, t]:
            self.duplicates += 1
            return False
        self.fields[name].ingest_chunk(t, msg.offset, msg.payload)
        self.marks[name][sim, t] = True
        self.applied += 1
        if name in self.raw:
            lo = msg.offset
            self.raw[name][sim, t, lo : lo + msg.value_count] = msg.payload
        if self.msglog is not None:
            frame = encode_message(msg)
            self.msglog.write(frame)
            self.msglog_offset += len(frame)
        return True

    def complete(self) -> bool:
        return all(m.all() for m in self.marks.values()) and all(
            int(fs.count.min()) >= self.cfg.n_sims for fs in self.fields.values()
        )

    def completed_sims(self) -> set[int]:
        done = np.logical_and.reduce([m.all(axis=1) for m in self.marks.values()])
        return set(np.flatnonzero(done).tolist())

    def flush(self) -> None:
        for arr in self.raw.values():
            arr.flush()
        if self.msglog is not None:
            self.msglog.flush()
            os.fsync(self.msglog.fileno())

    # -- checkpoint sections ------------------------------------------------------------

    def sections(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "counters", np.array([self.applied, self.duplicates, self.rejected, self.msglog_offset], dtype="<i8")
        for name in self.cfg.fields:
            yield f"{name}/ledger", self.marks[name]
            for arr_name, arr in self.fields[name].arrays():
                yield f"{name}/{arr_name}", arr

    def load_sections(self, sections: dict[str, np.ndarray]) -> None:
        try:
            self.applied, self.duplicates, self.rejected, self.msglog_offset = map(int, sections["counters"])
            for name in self.cfg.fields:
                ledger = sections[f"{name}/ledger"]
                if ledger.shape != self.marks[name].shape:
                    raise CheckpointError(f"ledger shape {ledger.shape} does not match the study")
                self.marks[name][...] = ledger
                prefix = f"{name}/"
                self.fields[name].load_arrays(
                    {k[len(prefix):]: v for k, v in sections.items() if k.startswith(prefix)}
                )
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint content does not match the study: {exc}") from None


# -- checkpoint files ------------------------------------------------------------------


def _dtype_code(arr: np.ndarray) -> bytes:
    return (arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|" else arr.dtype).str.encode()


def write_checkpoint_file(path: Path, rank: int, epoch: int, config_hash: bytes,
                          sections: Iterable[tuple[str, np.ndarray]]) -> None:
    secs = list(sections)
    h = hashlib.sha256()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:

        def put(b: bytes) -> None:
            h.update(b)
            fh.write(b)

        put(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, rank, epoch, config_hash, len(secs)))
        for name, arr in secs:
            code = _dtype_code(arr)
            data = np.ascontiguousarray(arr, dtype=np.dtype(code.decode())).tobytes()
            nb = name.encode()
            put(struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(code)) + code)
            put(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            put(struct.pack("<Q", len(data)))
            put(data)
        fh.write(h.digest())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_checkpoint_file(path: Path, *, rank: int | None = None, config_hash: bytes | None = None
                         ) -> tuple[int, dict[str, np.ndarray]]:
    """Validate and parse one rank file, returning ``(epoch, sections)``.

    Nothing is returned unless the whole file checks out.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size + _DIGEST:
        raise CheckpointTruncatedError(f"{path}: {len(raw)} bytes is shorter than any checkpoint")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError(f"{path}: checksum mismatch (truncated or corrupt)")
    magic, version, file_rank, epoch, chash, n = _CKPT_HEAD.unpack_from(body)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if rank is not None and file_rank != rank:
        raise CheckpointError(f"{path}: holds rank {file_rank}, expected {rank}")
    if config_hash is not None and chash != config_hash:
        raise CheckpointError(f"{path}: written for a different study configuration")
    pos = _CKPT_HEAD.size
    out = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2 : pos + 2 + ln].decode()
            pos += 2 + ln
            (lc,) = struct.unpack_from("<B", body, pos)
            dtype = np.dtype(body[pos + 1 : pos + 1 + lc].decode())
            pos += 1 + lc
            (ndim,) = struct.unpack_from("<B", body, pos)
            shape = struct.unpack_from(f"<{ndim}Q", body, pos + 1)
            pos += 1 + 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            out[name] = np.frombuffer(body[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
            pos += nbytes
    except (struct.error, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed section table: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} unparsed bytes")
    return epoch, out


def _rank_file(directory: Path, rank: int, epoch: int) -> Path:
    return directory / f"rank{rank}.e{epoch}.ckpt"


def latest_epoch(directory: Path) -> int | None:
    try:
        return int((directory / "LATEST").read_text())
    except FileNotFoundError:
        return None


# -- whole-server core -------------------------------------------------------------------


class ServerState:
    """Deterministic core: one :class:`RankState` per rank over a static partition."""

    def __init__(self, cfg: StudyConfig) -> None:
        self.cfg = cfg
        self.pmap: PartitionMap = build_partition_map(cfg.n_cells, cfg.n_ranks)
        self.ranks = [RankState(cfg, r, self.pmap.cell_range(r)) for r in range(cfg.n_ranks)]
        self.epoch = 0

    def rank_of(self, msg: Data) -> int:
        try:
            rank = self.pmap.owner(msg.offset)
        except ValueError as exc:
            raise ProtocolViolationError(str(exc)) from None
        return rank

    def deliver(self, msg: Data) -> bool:
        return self.ranks[self.rank_of(msg)].apply(msg)

    def complete(self) -> bool:
        return all(r.complete() for r in self.ranks)

    def completed_sims(self) -> set[int]:
        sets = [r.completed_sims() for r in self.ranks]
        return set.intersection(*sets)

    @property
    def applied(self) -> int:
        return sum(r.applied for r in self.ranks)

    @property
    def duplicates(self) -> int:
        return sum(r.duplicates for r in self.ranks)

    def equals(self, other: "ServerState") -> bool:
        return all(
            np.array_equal(a.marks[f], b.marks[f]) and a.fields[f].equals(b.fields[f])
            for a, b in zip(self.ranks, other.ranks)
            for f in self.cfg.fields
        )

    # -- assembled views ----------------------------------------------------------------

    def global_statistic(self, field: str, stat: str) -> np.ndarray:
        """``[timestep, cell]`` array over the whole mesh."""
        return np.concatenate([r.fields[field].snapshot_statistic(stat) for r in self.ranks], axis=1)

    def global_counts(self, field: str) -> np.ndarray:
        return np.concatenate([r.fields[field].count for r in self.ranks], axis=1)

    def export(self, directory: Path | None = None) -> Path:
        names = statistic_names(self.cfg.statistics())
        fields = {f: {s: self.global_statistic(f, s) for s in names} for f in self.cfg.fields}
        counts = {f: self.global_counts(f) for f in self.cfg.fields}
        manifest = {
            "study_id": self.cfg.study_id,
            "n_sims": self.cfg.n_sims,
            "n_cells": self.cfg.n_cells,
            "n_timesteps": self.cfg.n_timesteps,
            "n_ranks": self.cfg.n_ranks,
            "applied": self.applied,
            "duplicates": self.duplicates,
            "epoch": self.epoch,
            "complete": self.complete(),
        }
        return write_export(directory or export_dir(self.cfg), fields, counts, manifest)

    # -- checkpointing ------------------------------------------------------------------

    def checkpoint_rank(self, rank: int, epoch: int, directory: Path | None = None) -> Path:
        directory = directory or checkpoint_dir(self.cfg)
        directory.mkdir(parents=True, exist_ok=True)
        rs = self.ranks[rank]
        rs.flush()
        path = _rank_file(directory, rank, epoch)
        write_checkpoint_file(path, rank, epoch, self.cfg.config_hash(), rs.sections())
        return path

    def commit_epoch(self, epoch: int, directory: Path | None = None) -> None:
        directory = directory or checkpoint_dir(self.cfg)
        tmp = directory / "LATEST.tmp"
        tmp.write_text(str(epoch))
        os.replace(tmp, directory / "LATEST")
        self.epoch = epoch
        for old in directory.glob("rank*.e*.ckpt"):
            if int(old.name.split(".e")[1].split(".")[0]) < epoch:
                old.unlink(missing_ok=True)

    def checkpoint(self, directory: Path | None = None) -> int:
        """Checkpoint every rank from a quiescent caller (tests, shutdown)."""
        epoch = self.epoch + 1
        for r in range(len(self.ranks)):
            self.checkpoint_rank(r, epoch, directory)
        self.commit_epoch(epoch, directory)
        return epoch

    @classmethod
    def restore(cls, cfg: StudyConfig, directory: Path | None = None) -> "ServerState":
        """State at the latest committed epoch; a fresh state when none exists."""
        directory = directory or checkpoint_dir(cfg)
        state = cls(cfg)
        epoch = latest_epoch(directory)
        if epoch is None:
            return state
        parsed = []
        for r in range(cfg.n_ranks):
            path = _rank_file(directory, r, epoch)
            if not path.exists():
                raise CheckpointTruncatedError(f"{path} missing from committed epoch {epoch}")
            file_epoch, sections = read_checkpoint_file(path, rank=r, config_hash=cfg.config_hash())
            if file_epoch != epoch:
                raise CheckpointError(f"{path}: epoch {file_epoch}, expected {epoch}")
            parsed.append(sections)
        for rs, sections in zip(state.ranks, parsed):
            rs.load_sections(sections)
        state.epoch = epoch
        return state

    # -- optional persistence -------------------------------------------------------------

    def attach_storage(self) -> None:
        """Open raw-sample stores and message logs as the config asks."""
        if self.cfg.store_raw:
            maps = {}
            for f in self.cfg.fields:
                path = raw_path(self.cfg, f)
                path.parent.mkdir(parents=True, exist_ok=True)
                shape = (self.cfg.n_sims, self.cfg.n_timesteps, self.cfg.n_cells)
                if path.exists():
                    arr = np.load(path, mmap_mode="r+")
                    if arr.shape != shape:
                        raise ConfigError(f"{path} has shape {arr.shape}, study needs {shape}")
                else:
                    arr = np.lib.format.open_memmap(path, mode="w+", dtype="<f8", shape=shape)
                    arr[...] = np.nan
                maps[f] = arr
            for rs in self.ranks:
                rs.attach_raw(maps)
        if self.cfg.log_messages:
            for rs in self.ranks:
                rs.attach_log(log_path(self.cfg, rs.rank))

    def close_storage(self) -> None:
        for rs in self.ranks:
            rs.flush()
            if rs.msglog is not None:
                rs.msglog.close()
                rs.msglog = None


def completed_simulations(cfg: StudyConfig) -> set[int]:
    """Simulations whose every timestep is in the latest committed checkpoint."""
    return ServerState.restore(cfg).completed_sims()


def read_message_log(path: str | os.PathLike) -> Iterator[Data]:
    fb = FrameBuffer()
    with open(path, "rb") as fh:
        while chunk := fh.read(1 << 20):
            for msg in fb.feed(chunk):
                yield msg
    if fb.pending:
        raise ProtocolError(f"{path}: {fb.pending} bytes of incomplete frame at end of log")


def replay_logs(cfg: StudyConfig, paths: Iterable[str | os.PathLike] | None = None) -> ServerState:
    """Rebuild a state by applying logged messages in their logged order."""
    state = ServerState(cfg.replace(log_messages=False, store_raw=False))
    if paths is None:
        paths = [log_path(cfg, r) for r in range(cfg.n_ranks)]
    for p in paths:
        for msg in read_message_log(p):
            state.deliver(msg)
    return state


# -- runtime ------------------------------------------------------------------------------


class ServerRuntime:
    """Sockets, worker threads, checkpoint timer and heartbeats around a :class:`ServerState`."""

    def __init__(self, cfg: StudyConfig, state: ServerState, launcher: tuple[str, int] | None = None,
                 host: str = "127.0.0.1", ports: list[int] | None = None) -> None:
        self.cfg = cfg
        self.ports = ports or [0] * len(state.ranks)
        self.state = state
        self.launcher = launcher
        self.host = host
        self.queues = [queue.Queue(maxsize=cfg.queue_size) for _ in state.ranks]
        self.rank_done = [threading.Event() for _ in state.ranks]
        self.stop_requested = threading.Event()
        self.last_activity = time.monotonic()
        self.listeners: list[socket.socket] = []
        self.endpoints: list[tuple[str, int]] = []
        self.workers: list[threading.Thread] = []
        self.heartbeats_sent = 0
        self.errors: list[str] = []
        self._epoch_lock = threading.Lock()

    # -- setup --------------------------------------------------------------------------

    def start(self) -> list[tuple[str, int]]:
        for rank, rs in enumerate(self.state.ranks):
            sock = socket.create_server((self.host, self.ports[rank]), backlog=128)
            self.listeners.append(sock)
            self.endpoints.append(sock.getsockname()[:2])
            threading.Thread(target=self._accept, args=(rank, sock), daemon=True, name=f"accept{rank}").start()
            w = threading.Thread(target=self._work, args=(rank,), daemon=True, name=f"rank{rank}")
            w.start()
            self.workers.append(w)
            if rs.complete():
                self.rank_done[rank].set()
        threading.Thread(target=self._heartbeat, daemon=True, name="heartbeat").start()
        out = self.cfg.output_path
        out.mkdir(parents=True, exist_ok=True)
        tmp = out / (ENDPOINTS_FILE + ".tmp")
        tmp.write_text(json.dumps({"endpoints": self.endpoints, "pid": os.getpid()}))
        os.replace(tmp, out / ENDPOINTS_FILE)
        return self.endpoints

    # -- connection handling -----------------------------------------------------------------

    def _accept(self, rank: int, sock: socket.socket) -> None:
        while True:
            try:
                conn, _ = sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(rank, conn), daemon=True).start()

    def _welcome(self, rank: int, hello: Hello) -> Ack | Welcome:
        cfg = self.cfg
        if hello.study_id != cfg.study_id:
            return Ack(cfg.study_id, hello.simulation_id, 1, f"this server runs study {cfg.study_id!r}")
        for name, start, stop in hello.fields:
            if name not in cfg.fields or not 0 <= start < stop <= cfg.n_cells:
                return Ack(cfg.study_id, hello.simulation_id, 1, f"bad field declaration {name} [{start}, {stop})")
        return Welcome(cfg.study_id, hello.simulation_id, rank, cfg.n_ranks, cfg.n_cells,
                       self.state.pmap.cell_range(rank), cfg.n_timesteps, cfg.fields)

    def _serve(self, rank: int, conn: socket.socket) -> None:
        with conn:
            try:
                hello = recv_message(conn)
                if not isinstance(hello, Hello):
                    return
                reply = self._welcome(rank, hello)
                send_message(conn, reply)
                if isinstance(reply, Ack):
                    return
                while not self.stop_requested.is_set():
                    msg = recv_message(conn)
                    self.last_activity = time.monotonic()
                    if msg is None or isinstance(msg, Goodbye):
                        return
                    if isinstance(msg, Data):
                        # blocks when the rank queue is full: backpressure to the client
                        self.queues[rank].put(("data", msg, conn))
            except (ProtocolError, OSError) as exc:
                # a dying client leaves at most one partial frame; it is simply dropped
                log.info("rank %d: connection ended: %s", rank, exc)

    def _work(self, rank: int) -> None:
        rs = self.state.ranks[rank]
        q = self.queues[rank]
        while True:
            item = q.get()
            kind = item[0]
            if kind == "stop":
                return
            if kind == "ckpt":
                _, epoch, done = item
                try:
                    self.state.checkpoint_rank(rank, epoch)
                except Exception as exc:  # pragma: no cover - disk trouble
                    self.errors.append(f"rank {rank} checkpoint failed: {exc}")
                done.set()
                continue
            _, msg, conn = item
            try:
                rs.apply(msg)
            except (DataQualityError, ProtocolViolationError) as exc:
                rs.rejected += 1
                log.warning("rank %d rejected %s: %s", rank, msg.key, exc)
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
            if rs.complete():
                self.rank_done[rank].set()

    def _heartbeat(self) -> None:
        if self.launcher is None:
            return
        sock = None
        seq = 0
        while not self.stop_requested.is_set():
            try:
                if sock is None:
                    sock = socket.create_connection(self.launcher, timeout=1.0)
                send_message(sock, Heartbeat(self.cfg.study_id, -1, seq, self.state.epoch, self.state.applied,
                                             time.time()))
                self.heartbeats_sent += 1
                seq += 1
            except OSError:
                if sock is not None:
                    sock.close()
                sock = None
            self.stop_requested.wait(self.cfg.heartbeat_period)
        if sock is not None:
            sock.close()

    # -- control ------------------------------------------------------------------------------

    def checkpoint_all(self) -> int:
        """Quiescent per-rank checkpoint: each worker writes its file between two messages."""
        with self._epoch_lock:
            epoch = self.state.epoch + 1
            events = []
            for q in self.queues:
                ev = threading.Event()
                q.put(("ckpt", epoch, ev))
                events.append(ev)
            for ev in events:
                ev.wait()
            self.state.commit_epoch(epoch)
            return epoch

    def _stop_workers(self) -> None:
        for q in self.queues:
            q.put(("stop",))
        for w in self.workers:
            w.join()

    def _close_listeners(self) -> None:
        for s in self.listeners:
            try:
                s.close()
            except OSError:
                pass

    def run(self, tick: float = 0.02) -> int:
        """Serve until complete, idle, or stopped; returns the process exit code."""
        next_ckpt = time.monotonic() + self.cfg.checkpoint_period
        code = EXIT_OK
        while True:
            if all(ev.is_set() for ev in self.rank_done):
                break
            now = time.monotonic()
            busy = any(q.qsize() for q in self.queues)
            if busy:
                self.last_activity = now
            if now - self.last_activity > self.cfg.idle_timeout:
                log.info("no message for %.1fs, stopping", self.cfg.idle_timeout)
                code = EXIT_IDLE
                break
            if self.stop_requested.is_set():
                code = EXIT_IDLE
                break
            if now >= next_ckpt:
                self.checkpoint_all()
                next_ckpt = time.monotonic() + self.cfg.checkpoint_period
            time.sleep(tick)
        self._close_listeners()
        self._stop_workers()
        self.stop_requested.set()
        self.state.checkpoint()
        if code == EXIT_OK:
            self.state.export()
        self.state.close_storage()
        return code


def run_server(cfg: StudyConfig, *, restore: bool = False, launcher: tuple[str, int] | None = None) -> int:
    state = ServerState.restore(cfg) if restore else ServerState(cfg)
    if not restore:
        _clear_previous(cfg)
    state.attach_storage()
    rt = ServerRuntime(cfg, state, launcher)
    rt.start()
    log.info("serving study %s on %s (epoch %d)", cfg.study_id, rt.endpoints, state.epoch)
    return rt.run()


def _clear_previous(cfg: StudyConfig) -> None:
    """A fresh server must not inherit checkpoints, logs or raw data of an earlier run."""
    import shutil

    for d in (checkpoint_dir(cfg), cfg.output_path / "msglog", cfg.output_path / "raw", export_dir(cfg)):
        shutil.rmtree(d, ignore_errors=True)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="intransit-server")
    ap.add_argument("--config", required=True)
    ap.add_argument("--launcher", default=None, help="host:port receiving heartbeats")
    ap.add_argument("--restore", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s server %(levelname)s %(message)s")
    try:
        cfg = StudyConfig.load(args.config)
        launcher = None
        if args.launcher:
            host, port = args.launcher.rsplit(":", 1)
            launcher = (host, int(port))
        return run_server(cfg, restore=args.restore, launcher=launcher)
    except IntransitError as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
