import random
import socket

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from intransit.errors import (
    BadMagicError,
    LengthOverflowError,
    MalformedFrameError,
    ProtocolError,
    TruncatedFrameError,
    VersionMismatchError,
)
from intransit.protocol import (
    HEADER_SIZE,
    MAX_BODY,
    Data,
    FrameBuffer,
    Goodbye,
    Heartbeat,
    Hello,
    build_partition_map,
    decode_message,
    encode_message,
    recv_message,
    route,
    send_message,
)
from msggen import fuzz_frame, random_message


def test_partition_even_split():
    assert build_partition_map(10, 2).boundaries == (0, 5, 10)


def test_partition_remainder_to_first_ranks():
    assert build_partition_map(10, 3).boundaries == (0, 4, 7, 10)


def test_partition_full_scale_mesh():
    pmap = build_partition_map(6_002_400, 8)
    sizes = np.diff(pmap.boundaries)
    assert sizes.tolist() == [750_300] * 8


def test_partition_rejects_more_ranks_than_cells():
    with pytest.raises(ValueError):
        build_partition_map(3, 4)


@given(st.integers(1, 5000), st.integers(1, 64))
def test_partition_invariants(n_cells, n_ranks):
    n_ranks = min(n_ranks, n_cells)
    b = build_partition_map(n_cells, n_ranks).boundaries
    sizes = np.diff(b)
    assert b[0] == 0 and b[-1] == n_cells and len(b) == n_ranks + 1
    assert sizes.min() >= 1 and sizes.max() - sizes.min() <= 1


def test_route_straddling_boundary():
    pmap = build_partition_map(10, 2)
    assert route((3, 8), pmap) == [(0, (3, 5)), (1, (5, 8))]


def test_route_inside_one_block():
    pmap = build_partition_map(10, 2)
    assert route((6, 9), pmap) == [(1, (6, 9))]


def test_route_rejects_out_of_range():
    pmap = build_partition_map(10, 2)
    with pytest.raises(ValueError):
        route((5, 11), pmap)
    with pytest.raises(ValueError):
        route((4, 4), pmap)


@given(st.data())
def test_route_is_a_partition(data):
    n_cells = data.draw(st.integers(1, 400))
    n_ranks = data.draw(st.integers(1, min(n_cells, 17)))
    pmap = build_partition_map(n_cells, n_ranks)
    start = data.draw(st.integers(0, n_cells - 1))
    stop = data.draw(st.integers(start + 1, n_cells))
    pieces = route((start, stop), pmap)
    # interval-cover oracle: enumerate every cell
    covered = [c for _, (a, b) in pieces for c in range(a, b)]
    assert covered == list(range(start, stop))
    for rank, (a, b) in pieces:
        lo, hi = pmap.cell_range(rank)
        assert lo <= a < b <= hi
    assert [r for r, _ in pieces] == sorted({r for r, _ in pieces})


def test_data_round_trip():
    msg = Data("study", 7, "dye", 42, 1024, np.array([0.0, -1.5, 3.25, 1e-300]))
    back = decode_message(encode_message(msg))
    assert back == msg
    assert back.value_count == 4


def test_round_trip_preserves_nan_bits():
    payload = np.frombuffer(bytes.fromhex("010000000000f87f"), dtype="<f8")
    msg = Data("s", 1, "f", 0, 0, payload)
    assert decode_message(encode_message(msg)).payload.tobytes() == payload.tobytes()


def test_random_round_trips():
    rng = random.Random(1)
    for _ in range(500):
        msg = random_message(rng)
        assert decode_message(encode_message(msg)) == msg


def test_wrong_magic():
    frame = bytearray(encode_message(Goodbye("s", 1)))
    frame[0:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        decode_message(bytes(frame))


def test_version_mismatch():
    frame = bytearray(encode_message(Goodbye("s", 1)))
    frame[4] = 9
    with pytest.raises(VersionMismatchError):
        decode_message(bytes(frame))


def test_truncated_frame():
    frame = encode_message(Data("s", 1, "f", 0, 0, np.ones(3)))
    with pytest.raises(TruncatedFrameError):
        decode_message(frame[:-1])
    with pytest.raises(TruncatedFrameError):
        decode_message(frame[: HEADER_SIZE - 1])


def test_length_overflow():
    frame = bytearray(encode_message(Goodbye("s", 1)))
    frame[8:12] = (MAX_BODY + 1).to_bytes(4, "little")
    with pytest.raises(LengthOverflowError):
        decode_message(bytes(frame))


def test_trailing_bytes_and_empty_data_are_malformed():
    frame = encode_message(Goodbye("s", 1))
    with pytest.raises(MalformedFrameError):
        decode_message(frame + b"\x00")
    with pytest.raises(ValueError):
        encode_message(Data("s", 1, "f", 0, 0, np.array([])))


def test_fuzzed_frames_raise_only_protocol_errors():
    rng = random.Random(5)
    for _ in range(3000):
        frame = fuzz_frame(rng)
        try:
            decode_message(frame)
        except ProtocolError:
            pass


@given(st.binary(max_size=80))
def test_arbitrary_bytes_are_total(blob):
    try:
        decode_message(blob)
    except ProtocolError:
        pass


def test_frame_buffer_reassembles_byte_by_byte():
    msgs = [Hello("s", 3, (("dye", 0, 10),)), Data("s", 3, "dye", 1, 0, np.arange(10.0)), Goodbye("s", 3)]
    stream = b"".join(encode_message(m) for m in msgs)
    fb = FrameBuffer()
    got = []
    for i in range(len(stream)):
        got += fb.feed(stream[i : i + 1])
    assert got == msgs and fb.pending == 0


def test_socket_transport():
    a, b = socket.socketpair()
    with a, b:
        send_message(a, Heartbeat("s", -1, 5, 2, 100, 1.5))
        send_message(a, Data("s", 0, "dye", 3, 8, np.full(1000, 0.25)))
        a.shutdown(socket.SHUT_WR)
        assert recv_message(b) == Heartbeat("s", -1, 5, 2, 100, 1.5)
        assert recv_message(b).payload.sum() == 250.0
        assert recv_message(b) is None
