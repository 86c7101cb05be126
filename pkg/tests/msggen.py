"""Random message / frame generators shared by protocol tests."""
from __future__ import annotations

import random

import numpy as np

from intransit.protocol import Ack, Data, Goodbye, Heartbeat, Hello, Welcome, encode_message

_ALPHABET = "abcdefghijklmnopqrstuvwxyz_-0123456789éß漢"


def _text(rng: random.Random, max_len: int = 12) -> str:
    return "".join(rng.choice(_ALPHABET) for _ in range(rng.randrange(max_len + 1)))


def random_message(rng: random.Random):
    study, sim = _text(rng), rng.randrange(-(2**63), 2**63)
    kind = rng.randrange(6)
    if kind == 0:
        fields = tuple((_text(rng), rng.randrange(2**64), rng.randrange(2**64)) for _ in range(rng.randrange(4)))
        return Hello(study, sim, fields)
    if kind == 1:
        return Welcome(
            study, sim, rng.randrange(2**32), rng.randrange(2**32), rng.randrange(2**64), (rng.randrange(2**64), rng.randrange(2**64)),
            rng.randrange(2**32), tuple(_text(rng) for _ in range(rng.randrange(4))),
        )
    if kind == 2:
        n = rng.randrange(1, 64)
        # arbitrary bit patterns, including NaNs and infinities
        payload = np.frombuffer(rng.randbytes(8 * n), dtype="<f8")
        return Data(study, sim, _text(rng), rng.randrange(2**32), rng.randrange(2**64), payload)
    if kind == 3:
        return Goodbye(study, sim)
    if kind == 4:
        return Heartbeat(study, sim, rng.randrange(2**64), rng.randrange(2**64), rng.randrange(2**64), rng.uniform(-1e9, 1e9))
    return Ack(study, sim, rng.randrange(256), _text(rng, 40))


def fuzz_frame(rng: random.Random) -> bytes:
    """Random bytes, or a valid frame damaged by flips, truncation, extension or splicing."""
    mode = rng.randrange(5)
    if mode == 0:
        return rng.randbytes(rng.randrange(64))
    frame = bytearray(encode_message(random_message(rng)))
    if mode == 1:
        for _ in range(rng.randrange(1, 6)):
            frame[rng.randrange(len(frame))] = rng.randrange(256)
    elif mode == 2:
        del frame[rng.randrange(len(frame)) :]
    elif mode == 3:
        frame += rng.randbytes(rng.randrange(1, 16))
    else:
        # keep a valid header but garble the declared length
        frame[8:12] = rng.randrange(2**32).to_bytes(4, "little")
    return bytes(frame)
