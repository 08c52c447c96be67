"""Bulk-synchronous all-to-all exchange over pluggable transports.

Every stage of the pipeline moves data through the same tiny surface: a
`RankWorld` gives each of P ranks `all_to_all_v` (lists of opaque byte
items per destination), `all_to_all_counts` (one integer per
destination) and `barrier`.  Two transports implement it: an in-process
backend that drives P ranks as threads over a shared buffer matrix, and
a socket backend where each rank is a separate process on a full TCP
mesh.  Results never depend on message arrival order because received
data is always handed back indexed by source rank.

`staged_stream` splits an arbitrarily large item stream into rounds so
that no rank ever buffers more than a configured number of outgoing
bytes per round.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

_HEADER = struct.Struct("<IIQ")  # round, dst rank, payload byte count
_ITEM_PREFIX = struct.Struct("<I")
_U64 = struct.Struct("<Q")

# round number 0 is reserved for connection setup and barriers
_CTRL_ROUND = 0
_CTRL_HELLO = 1
_CTRL_READY = 2
_CTRL_GO = 3


class ExchangeError(RuntimeError):
    pass


class ExchangeAbort(ExchangeError):
    """Another rank failed; the collective was torn down."""


class ProtocolError(ExchangeError):
    """A peer violated the wire protocol (bad header, wrong round)."""


class RoundCapError(ExchangeError):
    """A single item cannot fit inside the per-round byte budget."""


def frame_items(items: Sequence[bytes]) -> bytes:
    """Length-prefix each item and concatenate."""
    parts = []
    for item in items:
        parts.append(_ITEM_PREFIX.pack(len(item)))
        parts.append(item)
    return b"".join(parts)


def unframe_payload(payload: bytes) -> list[bytes]:
    items = []
    off = 0
    end = len(payload)
    while off < end:
        if off + 4 > end:
            raise ProtocolError("truncated item prefix")
        (n,) = _ITEM_PREFIX.unpack_from(payload, off)
        off += 4
        if off + n > end:
            raise ProtocolError("item runs past payload end")
        items.append(payload[off : off + n])
        off += n
    return items


def framed_size(item: bytes) -> int:
    return _ITEM_PREFIX.size + len(item)


@dataclass
class ExchangeRound:
    """One staged round's outgoing batch: per-destination item lists."""

    index: int
    buffers: list[list[bytes]]
    out_bytes: int = 0

    def add(self, dst: int, item: bytes) -> None:
        self.buffers[dst].append(item)
        self.out_bytes += framed_size(item)


class RankWorld:
    """One rank's view of the P-rank collective. Subclasses supply transport."""

    def __init__(self, nranks: int, rank: int):
        if not 0 <= rank < nranks:
            raise ValueError(f"rank {rank} outside [0, {nranks})")
        self.nranks = nranks
        self.rank = rank
        self.bytes_sent = 0
        self.bytes_received = 0
        self.collectives = 0
        self.peak_round_sent = 0
        self.peak_round_received = 0

    # -- transport interface -------------------------------------------

    def all_to_all_v(self, out_items: Sequence[Sequence[bytes]]) -> list[list[bytes]]:
        """Send out_items[j] to rank j; return items received, indexed by source."""
        raise NotImplementedError

    def all_to_all_counts(self, counts: Sequence[int]) -> list[int]:
        """Exchange one non-negative integer with every rank."""
        raise NotImplementedError

    def barrier(self) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    # -- shared bookkeeping --------------------------------------------

    def _check_vector(self, vec: Sequence) -> None:
        if len(vec) != self.nranks:
            raise ValueError(
                f"per-destination vector has {len(vec)} entries, expected {self.nranks}"
            )

    def _account(self, sent: int, received: int) -> None:
        self.bytes_sent += sent
        self.bytes_received += received
        self.collectives += 1
        self.peak_round_sent = max(self.peak_round_sent, sent)
        self.peak_round_received = max(self.peak_round_received, received)


# ---------------------------------------------------------------------
# in-process backend: P ranks as threads over a shared cell matrix
# ---------------------------------------------------------------------


class _Hub:
    def __init__(self, nranks: int):
        self.nranks = nranks
        self.barrier = threading.Barrier(nranks)
        # cells[src][dst] holds the payload for one collective
        self.cells: list[list[object]] = [[None] * nranks for _ in range(nranks)]
        self.failure: tuple[int, BaseException] | None = None
        self.lock = threading.Lock()

    def abort(self, rank: int, exc: BaseException) -> None:
        with self.lock:
            if self.failure is None:
                self.failure = (rank, exc)
        self.barrier.abort()

    def wait(self) -> None:
        try:
            self.barrier.wait()
        except threading.BrokenBarrierError:
            failure = self.failure
            if failure is None:
                raise ExchangeAbort("collective aborted") from None
            raise ExchangeAbort(
                f"collective aborted by rank {failure[0]}: {failure[1]!r}"
            ) from None


class InProcessWorld(RankWorld):
    """Thread-backed rank. Build a full set with `in_process_worlds`."""

    def __init__(self, hub: _Hub, rank: int):
        super().__init__(hub.nranks, rank)
        self._hub = hub

    def _swap(self, per_dst: Sequence[object]) -> list[object]:
        cells = self._hub.cells
        for dst in range(self.nranks):
            cells[self.rank][dst] = per_dst[dst]
        self._hub.wait()
        received = [cells[src][self.rank] for src in range(self.nranks)]
        # second rendezvous so nobody overwrites cells a slow rank
        # has not read yet
        self._hub.wait()
        return received

    def all_to_all_v(self, out_items: Sequence[Sequence[bytes]]) -> list[list[bytes]]:
        self._check_vector(out_items)
        payloads = [frame_items(items) for items in out_items]
        received = self._swap(payloads)
        self._account(sum(map(len, payloads)), sum(map(len, received)))
        return [unframe_payload(p) for p in received]

    def all_to_all_counts(self, counts: Sequence[int]) -> list[int]:
        self._check_vector(counts)
        received = self._swap([int(c) for c in counts])
        self.bytes_sent += 8 * self.nranks
        self.bytes_received += 8 * self.nranks
        return [int(c) for c in received]

    def barrier(self) -> None:
        self._hub.wait()

    def abort(self, exc: BaseException) -> None:
        self._hub.abort(self.rank, exc)


def in_process_worlds(nranks: int) -> list[InProcessWorld]:
    hub = _Hub(nranks)
    return [InProcessWorld(hub, r) for r in range(nranks)]


def run_spmd(nranks: int, fn: Callable[[InProcessWorld], object]) -> list[object]:
    """Run fn(world) on every rank in threads; return per-rank results.

    If any rank raises, the shared barrier is aborted so the others
    unblock, and the first failure (by rank index) is re-raised.
    """
    worlds = in_process_worlds(nranks)
    results: list[object] = [None] * nranks
    errors: list[BaseException | None] = [None] * nranks

    def body(world: InProcessWorld) -> None:
        try:
            results[world.rank] = fn(world)
        except BaseException as exc:  # noqa: BLE001 - must reach the driver
            errors[world.rank] = exc
            world.abort(exc)

    threads = [
        threading.Thread(target=body, args=(w,), name=f"rank{w.rank}")
        for w in worlds
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for exc in errors:
        if exc is not None and not isinstance(exc, ExchangeAbort):
            raise exc
    for exc in errors:
        if exc is not None:
            raise exc
    return results


# ---------------------------------------------------------------------
# socket backend: one process per rank, full TCP mesh
# ---------------------------------------------------------------------


def parse_hostfile(text: str) -> list[tuple[str, int]]:
    """One `host:port` per line, rank = line order; '#' starts a comment."""
    hosts = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        host, sep, port = line.rpartition(":")
        if not sep or not port.isdigit():
            raise ValueError(f"hostfile line {lineno}: expected host:port, got {raw!r}")
        hosts.append((host, int(port)))
    return hosts


def load_hostfile(path: str) -> list[tuple[str, int]]:
    with open(path, "r", encoding="ascii") as fh:
        return parse_hostfile(fh.read())


class _PeerConn:
    """Blocking reader/writer for one mesh socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send_message(self, round_no: int, dst: int, payload: bytes) -> None:
        self.sock.sendall(_HEADER.pack(round_no, dst, len(payload)) + payload)

    def recv_exact(self, n: int) -> bytes:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            chunk = self.sock.recv_into(view[got:], n - got)
            if chunk == 0:
                raise ExchangeAbort("peer closed connection mid-message")
            got += chunk
        return bytes(buf)

    def recv_message(self) -> tuple[int, int, bytes]:
        round_no, dst, nbytes = _HEADER.unpack(self.recv_exact(_HEADER.size))
        return round_no, dst, self.recv_exact(nbytes)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class SocketWorld(RankWorld):
    """One rank running in its own process, wired to peers over TCP.

    Construction blocks until the full mesh is up: this rank listens on
    its own hostfile port, dials every lower rank, accepts every higher
    rank, then takes part in a rank-0-led ready/go handshake that also
    warms each link.  Message headers carry (round, destination, size)
    and both fields are validated on receipt, so a missed or reordered
    collective surfaces as ProtocolError instead of silent corruption.
    """

    def __init__(
        self,
        rank: int,
        hosts: Sequence[tuple[str, int]],
        connect_timeout: float = 30.0,
    ):
        super().__init__(len(hosts), rank)
        self._hosts = list(hosts)
        self._round = _CTRL_ROUND
        self._barrier_seq = 0
        self._peers: dict[int, _PeerConn] = {}
        self._send_exc: BaseException | None = None
        if self.nranks > 1:
            self._build_mesh(connect_timeout)
            self._startup_handshake()

    # -- mesh construction ---------------------------------------------

    def _build_mesh(self, timeout: float) -> None:
        host, port = self._hosts[self.rank]
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(("", port))
        listener.listen(self.nranks)
        listener.settimeout(timeout)
        try:
            for peer in range(self.rank):
                conn = self._dial(peer, timeout)
                conn.send_message(
                    _CTRL_ROUND, peer, _U64.pack(_CTRL_HELLO << 32 | self.rank)
                )
                self._peers[peer] = conn
            expected = self.nranks - 1 - self.rank
            for _ in range(expected):
                sock, _addr = listener.accept()
                conn = _PeerConn(sock)
                round_no, dst, payload = conn.recv_message()
                if round_no != _CTRL_ROUND or dst != self.rank:
                    raise ProtocolError("bad hello header")
                word = _U64.unpack(payload)[0]
                if word >> 32 != _CTRL_HELLO:
                    raise ProtocolError("expected hello")
                src = word & 0xFFFFFFFF
                if not self.rank < src < self.nranks or src in self._peers:
                    raise ProtocolError(f"unexpected hello from rank {src}")
                self._peers[src] = conn
        finally:
            listener.close()

    def _dial(self, peer: int, timeout: float) -> _PeerConn:
        host, port = self._hosts[peer]
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
                sock.settimeout(None)
                return _PeerConn(sock)
            except OSError:
                if time.monotonic() >= deadline:
                    raise ExchangeAbort(
                        f"rank {self.rank} could not reach rank {peer} "
                        f"at {host}:{port} within {timeout:.0f}s"
                    ) from None
                time.sleep(0.05)

    def _ctrl(self, peer: int, code: int) -> None:
        self._peers[peer].send_message(
            _CTRL_ROUND, peer, _U64.pack(code << 32 | self._barrier_seq)
        )

    def _expect_ctrl(self, peer: int, code: int) -> None:
        round_no, dst, payload = self._peers[peer].recv_message()
        if round_no != _CTRL_ROUND or dst != self.rank:
            raise ProtocolError(f"expected control message from rank {peer}")
        word = _U64.unpack(payload)[0]
        if word >> 32 != code or word & 0xFFFFFFFF != self._barrier_seq:
            raise ProtocolError(
                f"control mismatch from rank {peer}: got {word >> 32}, "
                f"seq {word & 0xFFFFFFFF}, expected {code}/{self._barrier_seq}"
            )

    def _startup_handshake(self) -> None:
        # doubles as a pre-warm: every link carries traffic before the
        # first data round
        self.barrier()

    # -- collectives ----------------------------------------------------

    def barrier(self) -> None:
        if self.nranks == 1:
            return
        self._barrier_seq += 1
        if self.rank == 0:
            for peer in range(1, self.nranks):
                self._expect_ctrl(peer, _CTRL_READY)
            for peer in range(1, self.nranks):
                self._ctrl(peer, _CTRL_GO)
        else:
            self._ctrl(0, _CTRL_READY)
            self._expect_ctrl(0, _CTRL_GO)

    def _exchange_payloads(self, per_dst: Sequence[bytes]) -> list[bytes]:
        self._round += 1
        round_no = self._round
        received: list[bytes | None] = [None] * self.nranks
        received[self.rank] = per_dst[self.rank]

        def send_all() -> None:
            try:
                for dst in range(self.nranks):
                    if dst != self.rank:
                        self._peers[dst].send_message(round_no, dst, per_dst[dst])
            except BaseException as exc:  # noqa: BLE001 - joined below
                self._send_exc = exc

        self._send_exc = None
        sender = threading.Thread(target=send_all, name=f"send-r{round_no}")
        sender.start()
        try:
            # read peers in fixed source order; TCP keeps per-link FIFO
            # and the sender thread above keeps our own writes moving,
            # which rules out send/recv deadlock
            for src in range(self.nranks):
                if src == self.rank:
                    continue
                got_round, dst, payload = self._peers[src].recv_message()
                if got_round != round_no or dst != self.rank:
                    raise ProtocolError(
                        f"rank {src} sent round {got_round} dst {dst}, "
                        f"expected round {round_no} dst {self.rank}"
                    )
                received[src] = payload
        finally:
            sender.join()
        if self._send_exc is not None:
            raise ExchangeAbort(f"send failed: {self._send_exc!r}")
        return received  # type: ignore[return-value]

    def all_to_all_v(self, out_items: Sequence[Sequence[bytes]]) -> list[list[bytes]]:
        self._check_vector(out_items)
        payloads = [frame_items(items) for items in out_items]
        received = self._exchange_payloads(payloads)
        self._account(sum(map(len, payloads)), sum(map(len, received)))
        return [unframe_payload(p) for p in received]

    def all_to_all_counts(self, counts: Sequence[int]) -> list[int]:
        self._check_vector(counts)
        received = self._exchange_payloads([_U64.pack(int(c)) for c in counts])
        self.bytes_sent += 8 * self.nranks
        self.bytes_received += 8 * self.nranks
        return [_U64.unpack(p)[0] for p in received]

    def close(self) -> None:
        if self._peers:
            try:
                self.barrier()
            except (ExchangeError, OSError):
                pass
            for conn in self._peers.values():
                conn.close()
            self._peers.clear()


# ---------------------------------------------------------------------
# small reductions built from the count exchange
# ---------------------------------------------------------------------


def allreduce_sum(world: RankWorld, value: int) -> int:
    """Sum one integer contribution from every rank; all ranks get the total."""
    return sum(world.all_to_all_counts([int(value)] * world.nranks))


def allreduce_max(world: RankWorld, value: int) -> int:
    return max(world.all_to_all_counts([int(value)] * world.nranks))


def gather_counts(world: RankWorld, value: int) -> list[int]:
    """Every rank learns every rank's value, indexed by rank."""
    return world.all_to_all_counts([int(value)] * world.nranks)


# ---------------------------------------------------------------------
# staged streaming on top of either backend
# ---------------------------------------------------------------------


def staged_stream(
    world: RankWorld,
    items: Iterable[tuple[int, bytes]],
    bytes_per_round: int,
    deliver: Callable[[int, bytes], None],
) -> int:
    """Stream (dst, item) pairs through bounded all-to-all rounds.

    Each round this rank batches items until their framed size would
    pass `bytes_per_round`, then all ranks exchange counts, a "more
    data" flag and the payload batch.  Everyone keeps taking part until
    no rank has anything left, so ranks never desynchronize.  `deliver`
    is invoked for every received item in source-rank order, making the
    outcome independent of the transport and of arrival timing.
    Returns the number of rounds taken.
    """
    if bytes_per_round < 16:
        raise ValueError("bytes_per_round must be at least 16")
    it: Iterator[tuple[int, bytes]] = iter(items)
    pending: tuple[int, bytes] | None = None
    rounds = 0
    while True:
        batch = ExchangeRound(
            index=rounds, buffers=[[] for _ in range(world.nranks)]
        )
        while True:
            if pending is None:
                nxt = next(it, None)
                if nxt is None:
                    break
                pending = nxt
            dst, item = pending
            if not 0 <= dst < world.nranks:
                raise ValueError(f"destination {dst} outside [0, {world.nranks})")
            cost = framed_size(item)
            if cost > bytes_per_round:
                raise RoundCapError(
                    f"item of framed size {cost} exceeds round budget "
                    f"{bytes_per_round}"
                )
            if batch.out_bytes + cost > bytes_per_round:
                break
            batch.add(dst, item)
            pending = None
        more_local = 0 if pending is None else 1

        sent_counts = [len(b) for b in batch.buffers]
        recv_counts = world.all_to_all_counts(sent_counts)
        recv_more = world.all_to_all_counts([more_local] * world.nranks)
        received = world.all_to_all_v(batch.buffers)
        rounds += 1
        for src in range(world.nranks):
            if len(received[src]) != recv_counts[src]:
                raise ProtocolError(
                    f"rank {src} announced {recv_counts[src]} items "
                    f"but sent {len(received[src])}"
                )
            for item in received[src]:
                deliver(src, item)
        if more_local == 0 and not any(recv_more):
            return rounds
