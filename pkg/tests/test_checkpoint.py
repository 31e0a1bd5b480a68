import struct

import numpy as np
import pytest

from pfl_lstr import checkpoint
from pfl_lstr.checkpoint import CheckpointError
from pfl_lstr.lstr import init_model

from .conftest import SMALL_MODEL


def test_round_trip_bit_exact(tmp_path):
    p = init_model(SMALL_MODEL, 9)
    checkpoint.save(p, tmp_path / "m.pfll")
    q = checkpoint.load(tmp_path / "m.pfll")
    assert q.equals(p)
    assert list(q) == list(p)
    assert q.tags == p.tags


def test_serialization_is_deterministic():
    p = init_model(SMALL_MODEL, 9)
    assert checkpoint.dumps(p) == checkpoint.dumps(p.copy())


def test_scalar_and_special_values():
    from pfl_lstr.grad import ENCODER, ParamSet
    p = ParamSet({"s": np.array(-0.0), "v": np.array([np.inf, 1e-310, -1.5])},
                 {"s": ENCODER, "v": ENCODER})
    q = checkpoint.loads(checkpoint.dumps(p))
    assert q.equals(p) and q["s"].shape == ()


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"NOPE" + bytes(8))


def test_truncated():
    raw = checkpoint.dumps(init_model(SMALL_MODEL, 0))
    for cut in (6, 20, len(raw) - 1):
        with pytest.raises(CheckpointError):
            checkpoint.loads(raw[:cut])


def test_trailing_bytes():
    raw = checkpoint.dumps(init_model(SMALL_MODEL, 0))
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.loads(raw + b"\0")


def test_bad_version():
    raw = bytearray(checkpoint.dumps(init_model(SMALL_MODEL, 0)))
    raw[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.loads(bytes(raw))
