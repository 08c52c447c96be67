"""Exchange layer: framing, collectives, staging, wire format."""

import multiprocessing
import socket
import struct
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lroverlap.exchange import (
    ExchangeAbort,
    ProtocolError,
    RoundCapError,
    SocketWorld,
    allreduce_max,
    allreduce_sum,
    frame_items,
    framed_size,
    gather_counts,
    in_process_worlds,
    parse_hostfile,
    run_spmd,
    staged_stream,
    unframe_payload,
)

from conftest import free_port

_HEADER = struct.Struct("<IIQ")
_U64 = struct.Struct("<Q")
_HELLO, _READY, _GO = 1, 2, 3


def test_frame_round_trip():
    items = [b"", b"a", b"hello world", bytes(range(256))]
    assert unframe_payload(frame_items(items)) == items
    assert framed_size(b"abc") == 4 + 3


def test_unframe_rejects_truncation():
    payload = frame_items([b"abcd"])
    with pytest.raises(ProtocolError):
        unframe_payload(payload[:-1])
    with pytest.raises(ProtocolError):
        unframe_payload(payload + b"\x01")


# -- in-process collectives --------------------------------------------


def test_counts_loopback():
    (world,) = in_process_worlds(1)
    assert world.all_to_all_counts([5]) == [5]


def test_counts_two_rank_transpose():
    def fn(world):
        out = [0, 3] if world.rank == 0 else [7, 0]
        return world.all_to_all_counts(out)

    got = run_spmd(2, fn)
    assert got[0] == [0, 7]
    assert got[1] == [3, 0]


def test_counts_matrix_transpose_oracle():
    rng = np.random.default_rng(5)
    matrix = rng.integers(0, 1000, size=(4, 4))

    got = run_spmd(4, lambda w: w.all_to_all_counts(list(matrix[w.rank])))
    assert np.array_equal(np.array(got), matrix.T)


def test_v_loopback_identity():
    (world,) = in_process_worlds(1)
    items = [b"one", b"two"]
    assert world.all_to_all_v([items]) == [items]


def test_v_two_rank_swap():
    def fn(world):
        out = [[], []]
        out[1 - world.rank] = [b"A" if world.rank == 0 else b"B"]
        return world.all_to_all_v(out)

    got = run_spmd(2, fn)
    assert got[0] == [[], [b"B"]]
    assert got[1] == [[b"A"], []]


def test_v_random_items_reach_destinations():
    rng = np.random.default_rng(9)
    nranks = 4
    # out[src][dst] = items src sends dst, payload tags its origin
    out = [
        [
            [bytes([src, dst, int(x)]) for x in rng.integers(0, 256, size=n)]
            for dst, n in enumerate(rng.integers(0, 50, size=nranks))
        ]
        for src in range(nranks)
    ]
    total = sum(len(items) for row in out for items in row)
    assert total > 0

    got = run_spmd(nranks, lambda w: w.all_to_all_v(out[w.rank]))
    for dst in range(nranks):
        for src in range(nranks):
            assert got[dst][src] == out[src][dst]  # FIFO per (src, dst)
            for item in got[dst][src]:
                assert item[0] == src and item[1] == dst


def test_v_conservation_counters():
    def fn(world):
        out = [[b"x" * (world.rank + dst + 1)] for dst in range(3)]
        world.all_to_all_v(out)
        return world.bytes_sent, world.bytes_received, world.collectives

    got = run_spmd(3, fn)
    assert sum(sent for sent, _, _ in got) == sum(recv for _, recv, _ in got)
    assert all(n == 1 for _, _, n in got)


def test_reductions():
    assert run_spmd(4, lambda w: allreduce_sum(w, w.rank + 1)) == [10] * 4
    assert run_spmd(4, lambda w: allreduce_max(w, w.rank * 2)) == [6] * 4
    assert run_spmd(3, lambda w: gather_counts(w, w.rank + 10)) == [
        [10, 11, 12]
    ] * 3


def test_abort_propagates_original_error():
    class Boom(RuntimeError):
        pass

    def fn(world):
        if world.rank == 2:
            raise Boom("rank 2 on fire")
        world.barrier()  # would deadlock without abort propagation

    with pytest.raises(Boom):
        run_spmd(4, fn)


# -- staged streaming --------------------------------------------------


def test_staged_rounds_ceiling():
    # framed item = 12 bytes, cap 48 -> 4 items per round, 10 items -> 3 rounds
    (world,) = in_process_worlds(1)
    items = [(0, bytes([i]) * 8) for i in range(10)]
    got = []
    rounds = staged_stream(world, iter(items), 48, lambda s, b: got.append(b))
    assert rounds == 3
    assert got == [b for _, b in items]


def test_staged_idle_rank_participates():
    def fn(world):
        items = [(1, bytes([i])) for i in range(100)] if world.rank == 0 else []
        got = []
        rounds = staged_stream(
            world, iter(items), 64, lambda s, b: got.append((s, b))
        )
        return rounds, got

    got = run_spmd(2, fn)
    assert got[0][0] == got[1][0] > 1  # same round count on both ranks
    assert got[0][1] == []
    assert got[1][1] == [(0, bytes([i])) for i in range(100)]


def test_staged_multiset_oracle():
    rng = np.random.default_rng(13)
    nranks = 4
    sent = [
        [(int(d), bytes([src, int(d), int(x)])) for d, x in
         zip(rng.integers(0, nranks, size=200), rng.integers(0, 256, size=200))]
        for src in range(nranks)
    ]

    def fn(world):
        got = []
        staged_stream(
            world, iter(sent[world.rank]), 256, lambda s, b: got.append((s, b))
        )
        return got

    got = run_spmd(nranks, fn)
    for dst in range(nranks):
        want = sorted(
            (src, item)
            for src in range(nranks)
            for d, item in sent[src]
            if d == dst
        )
        assert sorted(got[dst]) == want


def test_staged_delivery_in_source_order():
    def fn(world):
        items = [(dst, bytes([world.rank, seq]))
                 for seq in range(5) for dst in range(4)]
        got = []
        staged_stream(world, iter(items), 1 << 20, lambda s, b: got.append((s, b)))
        return got

    got = run_spmd(4, fn)
    for received in got:
        # single round: sources strictly grouped in ascending order,
        # items of one source in its send order
        srcs = [s for s, _ in received]
        assert srcs == sorted(srcs)
        for src in range(4):
            seqs = [b[1] for s, b in received if s == src]
            assert seqs == sorted(seqs)


def test_staged_oversized_item_rejected():
    (world,) = in_process_worlds(1)
    with pytest.raises(RoundCapError):
        staged_stream(world, iter([(0, b"x" * 100)]), 64, lambda s, b: None)


def test_staged_bad_destination_rejected():
    (world,) = in_process_worlds(1)
    with pytest.raises(ValueError):
        staged_stream(world, iter([(3, b"x")]), 64, lambda s, b: None)


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.integers(0, 2), max_size=40),
    st.integers(16, 64),
)
def test_staged_property_multiset(destinations, cap):
    nranks = 3
    items = [(d, bytes([i % 256, d])) for i, d in enumerate(destinations)]

    def fn(world):
        got = []
        mine = items if world.rank == 0 else []
        staged_stream(world, iter(mine), cap, lambda s, b: got.append(b))
        return got

    got = run_spmd(nranks, fn)
    for dst in range(nranks):
        assert got[dst] == [b for d, b in items if d == dst]


# -- hostfile ----------------------------------------------------------


def test_parse_hostfile():
    text = "# cluster\nnode0:4000\n\n  node1:4001  # second\n127.0.0.1:9\n"
    assert parse_hostfile(text) == [
        ("node0", 4000), ("node1", 4001), ("127.0.0.1", 9)
    ]


def test_parse_hostfile_rejects_garbage():
    with pytest.raises(ValueError):
        parse_hostfile("node0\n")
    with pytest.raises(ValueError):
        parse_hostfile("node0:port\n")


# -- socket backend ----------------------------------------------------


class ManualPeer:
    """Plays rank 1 of a 2-rank mesh with literal struct packing.

    Exists to pin the documented wire format: if the implementation
    drifts from the promised header/payload layout, this peer stops
    understanding it.
    """

    def __init__(self, port: int):
        self.port = port
        self.errors: list[str] = []
        self.thread = threading.Thread(target=self._run, daemon=True)

    def _connect(self) -> socket.socket:
        deadline = time.monotonic() + 10
        while True:
            try:
                return socket.create_connection(("127.0.0.1", self.port), 1)
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.02)

    def _recv(self, sock: socket.socket, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError("closed")
            buf += chunk
        return buf

    def _expect(self, sock, round_no, dst, payload):
        got = self._recv(sock, _HEADER.size)
        header = _HEADER.unpack(got)
        if header != (round_no, dst, len(payload)):
            self.errors.append(f"header {header} != {(round_no, dst, len(payload))}")
        got_payload = self._recv(sock, header[2])
        if got_payload != payload:
            self.errors.append(f"payload {got_payload!r} != {payload!r}")

    def _run(self):
        try:
            sock = self._connect()
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            # mesh hello from the higher rank
            sock.sendall(_HEADER.pack(0, 0, 8) + _U64.pack(_HELLO << 32 | 1))
            # startup barrier, seq 1: ready up, go down
            sock.sendall(_HEADER.pack(0, 0, 8) + _U64.pack(_READY << 32 | 1))
            self._expect(sock, 0, 1, _U64.pack(_GO << 32 | 1))
            # data round 1: counts
            sock.sendall(_HEADER.pack(1, 0, 8) + _U64.pack(11))
            self._expect(sock, 1, 1, _U64.pack(7))
            # data round 2: framed items
            sock.sendall(_HEADER.pack(2, 0, 6) + b"\x02\x00\x00\x00ZZ")
            self._expect(
                sock, 2, 1,
                b"\x02\x00\x00\x00ab" + b"\x01\x00\x00\x00c",
            )
            # close barrier, seq 2
            sock.sendall(_HEADER.pack(0, 0, 8) + _U64.pack(_READY << 32 | 2))
            self._expect(sock, 0, 1, _U64.pack(_GO << 32 | 2))
            sock.close()
        except Exception as exc:  # noqa: BLE001 - reported to the test
            self.errors.append(repr(exc))


def test_socket_wire_format_interop():
    port = free_port()
    peer = ManualPeer(port)
    peer.thread.start()
    world = SocketWorld(0, [("127.0.0.1", port), ("127.0.0.1", 1)])
    try:
        assert world.all_to_all_counts([5, 7]) == [5, 11]
        assert world.all_to_all_v([[b"x"], [b"ab", b"c"]]) == [[b"x"], [b"ZZ"]]
    finally:
        world.close()
    peer.thread.join(timeout=10)
    assert not peer.thread.is_alive()
    assert peer.errors == []


def test_socket_rejects_round_mismatch():
    port = free_port()
    errors: list[str] = []

    def bad_peer():
        try:
            deadline = time.monotonic() + 10
            while True:
                try:
                    sock = socket.create_connection(("127.0.0.1", port), 1)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise
                    time.sleep(0.02)
            sock.sendall(_HEADER.pack(0, 0, 8) + _U64.pack(_HELLO << 32 | 1))
            sock.sendall(_HEADER.pack(0, 0, 8) + _U64.pack(_READY << 32 | 1))
            sock.recv(64)  # go
            # wrong round number on the first data message
            sock.sendall(_HEADER.pack(9, 0, 8) + _U64.pack(1))
            time.sleep(0.2)
            sock.close()
        except Exception as exc:  # noqa: BLE001
            errors.append(repr(exc))

    thread = threading.Thread(target=bad_peer, daemon=True)
    thread.start()
    world = SocketWorld(0, [("127.0.0.1", port), ("127.0.0.1", 1)])
    with pytest.raises(ProtocolError):
        world.all_to_all_counts([1, 2])
    world.close()
    thread.join(timeout=10)
    assert errors == []


def _socket_rank_body(rank: int, hosts: list) -> None:
    world = SocketWorld(rank, hosts, connect_timeout=20)
    try:
        # one plain collective
        got = world.all_to_all_counts([rank * 10 + d for d in range(3)])
        assert got == [src * 10 + rank for src in range(3)], got

        # one staged stream with unequal loads
        items = [(dst, bytes([rank, seq, dst]))
                 for seq in range(rank * 7) for dst in range(3)]
        received = []
        staged_stream(world, iter(items), 128, lambda s, b: received.append((s, b)))
        want = sorted(
            (src, bytes([src, seq, rank]))
            for src in range(3)
            for seq in range(src * 7)
        )
        assert sorted(received) == want, "staged stream lost items"
        world.barrier()
    finally:
        world.close()


def test_socket_world_three_processes():
    for retry in range(2):
        hosts = [("127.0.0.1", free_port()) for _ in range(3)]
        procs = [
            multiprocessing.Process(target=_socket_rank_body, args=(r, hosts))
            for r in range(3)
        ]
        for p in procs:
            p.start()
        for p in procs:
            p.join(timeout=60)
        codes = [p.exitcode for p in procs]
        if all(code == 0 for code in codes):
            return
        if retry == 0:
            continue  # port race: pick fresh ports once
        pytest.fail(f"socket ranks exited with {codes}")
