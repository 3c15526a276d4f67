"""Checkpoint byte layout and round trips."""
import struct

import numpy as np
import pytest

from mfmseg.checkpoint import MAGIC, Checkpoint, CheckpointError
from mfmseg.models import TOY_FFP, TOY_SSP, build_model
from mfmseg.train import AdamState, make_checkpoint, restore


def parse(blob):
    """Independent reader for the documented little-endian layout."""
    assert blob[:8] == b"MFMCKPT1"
    pos = 8
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    sections = []
    for _ in range(2):
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        sec = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            sec[name] = np.array(struct.unpack_from(f"<{n}f", blob, pos), dtype=np.float32).reshape(dims)
            pos += 4 * n
        sections.append(sec)
    assert pos == len(blob)
    return version, sections


@pytest.fixture
def model():
    return build_model("mfm", 4, seed=2, ffp=TOY_FFP, ssp=TOY_SSP)


def test_layout_matches_independent_reader(model):
    state = AdamState(m={"head.bias": np.arange(4, dtype=np.float32)},
                      v={"head.bias": np.ones(4, dtype=np.float32)}, step=3)
    ckpt = make_checkpoint(model, state, epoch=7, best_val_loss=0.25)
    version, (params, opt) = parse(ckpt.to_bytes())
    assert version == 1
    sd = model.state_dict()
    assert list(params) == list(sd)
    for k in sd:
        assert params[k].tobytes() == sd[k].astype("<f4").tobytes()
    assert opt["meta/epoch"] == 7 and opt["meta/best_val_loss"] == 0.25 and opt["meta/step"] == 3
    np.testing.assert_array_equal(opt["m/head.bias"], np.arange(4))


def test_round_trip_bit_exact(model, tmp_path):
    ckpt = make_checkpoint(model, AdamState(), 2, 1.5)
    ckpt.save(tmp_path / "a.bin")
    loaded = Checkpoint.load(tmp_path / "a.bin")
    loaded.save(tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert loaded.epoch == 2 and loaded.best_val_loss == 1.5
    other = restore(build_model("mfm", 4, seed=99, ffp=TOY_FFP, ssp=TOY_SSP), loaded)
    sd, od = model.state_dict(), other.state_dict()
    assert all(sd[k].tobytes() == od[k].tobytes() for k in sd)


def test_scalar_and_empty_tensors():
    ckpt = Checkpoint({"s": np.float32(3.5), "e": np.zeros((0, 3), np.float32)})
    back = Checkpoint.from_bytes(ckpt.to_bytes())
    assert back.tensors["s"].shape == () and back.tensors["s"] == 3.5
    assert back.tensors["e"].shape == (0, 3)


def test_corrupt_files():
    blob = Checkpoint({"w": np.ones(3, np.float32)}).to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(MAGIC + struct.pack("<I", 9) + blob[12:])
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(blob[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        Checkpoint.from_bytes(blob + b"\0")
