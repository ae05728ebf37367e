import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from edvr import io
from edvr.model import EDVR, EdvrConfig
from edvr.training import TrainConfig

TINY = dict(channels=8, extract_blocks=1, recon_blocks=1)


def test_png_round_trip_within_one_level(tmp_path, rng):
    frames = rng.uniform(0, 1, (3, 3, 5, 7)).astype(np.float32)
    io.write_frames(tmp_path, frames)
    assert sorted(os.listdir(tmp_path)) == [io.frame_name(i) for i in range(3)]
    back = io.read_frames(tmp_path)
    assert back.shape == frames.shape and back.dtype == np.float32
    assert np.abs(back - frames).max() <= 0.5 / 255 + 1e-7


def test_png_decode_scale(tmp_path):
    Image.fromarray(np.full((2, 2, 3), 255, np.uint8)).save(tmp_path / io.frame_name(0))
    assert np.all(io.read_frames(tmp_path) == 1.0)


@given(st.floats(-1.0, 2.0))
def test_quantize_clamps_and_rounds(v):
    q = int(io.quantize(np.array([v]))[0])
    assert q == int(np.floor(min(max(v, 0.0), 1.0) * 255 + 0.5))


def test_frame_gap_is_reported(tmp_path):
    frames = np.zeros((4, 3, 2, 2), np.float32)
    io.write_frames(tmp_path, frames)
    os.remove(tmp_path / io.frame_name(2))
    with pytest.raises(io.FrameError, match="missing frame index 2"):
        io.read_frames(tmp_path)


def test_frame_format_errors(tmp_path):
    with pytest.raises(io.FrameError, match="no frame"):
        io.read_frames(tmp_path)
    Image.fromarray(np.zeros((2, 2), np.uint8), mode="L").save(tmp_path / io.frame_name(0))
    with pytest.raises(io.FrameError, match="RGB"):
        io.read_frames(tmp_path)
    Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(tmp_path / io.frame_name(0))
    Image.fromarray(np.zeros((3, 2, 3), np.uint8)).save(tmp_path / io.frame_name(1))
    with pytest.raises(io.FrameError, match=io.frame_name(1)):
        io.read_frames(tmp_path)


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    a = EDVR(EdvrConfig(**TINY))
    io.save_checkpoint(tmp_path / "a.ckpt", a)
    b = EDVR(EdvrConfig(seed=5, **TINY))
    io.load_checkpoint(tmp_path / "a.ckpt", b)
    io.save_checkpoint(tmp_path / "b.ckpt", b)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()


def test_checkpoint_layout():
    data = io.checkpoint_bytes([("w", np.arange(6, dtype=np.float32).reshape(2, 3))])
    assert data[:4] == b"EDVR"
    # magic, version, count, name_len, name, rank, 2 dims, 6 floats, crc
    assert len(data) == 4 + 4 + 4 + 4 + 1 + 4 + 8 + 24 + 4
    (name, arr), = io.parse_checkpoint(data)
    assert name == "w" and arr.shape == (2, 3) and arr[1, 2] == 5.0


def test_checkpoint_corruption_is_detected(tmp_path):
    model = EDVR(EdvrConfig(**TINY))
    io.save_checkpoint(tmp_path / "m.ckpt", model)
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[:len(data) // 2])
    with pytest.raises(io.CheckpointError, match="CRC"):
        io.load_checkpoint(tmp_path / "cut.ckpt", model)
    flipped = bytearray(data)
    flipped[100] ^= 0xFF
    with pytest.raises(io.CheckpointError, match="CRC"):
        io.parse_checkpoint(bytes(flipped))


def test_checkpoint_dims_mismatch_names_parameter(tmp_path):
    io.save_checkpoint(tmp_path / "c32.ckpt", EDVR(EdvrConfig(channels=32, extract_blocks=1, recon_blocks=1)))
    wide = EDVR(EdvrConfig(channels=64, extract_blocks=1, recon_blocks=1))
    first = next(wide.named_parameters())[0]
    before = [p.data.copy() for p in wide.parameters()]
    with pytest.raises(io.CheckpointError, match=first.replace(".", r"\.")):
        io.load_checkpoint(tmp_path / "c32.ckpt", wide)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, wide.parameters()))


def test_checkpoint_name_mismatch(tmp_path):
    io.save_checkpoint(tmp_path / "m.ckpt", EDVR(EdvrConfig(**TINY)))
    with pytest.raises(io.CheckpointError, match="missing"):
        io.load_checkpoint(tmp_path / "m.ckpt", EDVR(EdvrConfig(predeblur=True, **TINY)))


def test_config_round_trip(tmp_path):
    model_cfg = EdvrConfig(channels=16, scale=1, hr_input=True, predeblur=True, seed=3, recon_blocks=2)
    train_cfg = TrainConfig(lr=1e-4, iters=7, loss_mode="global_norm", track="deblur_comp", seed=9)
    io.write_config(tmp_path / "a.cfg", model_cfg, train_cfg)
    m, t = io.read_config(tmp_path / "a.cfg")
    assert m == model_cfg and t == train_cfg
    assert "train_seed = 9" in (tmp_path / "a.cfg").read_text()


def test_config_parsing_rules():
    m, t = io.parse_config("# comment\nchannels = 16  # inline\npredeblur = yes\nhr_input=on\nscale=1\n\niters=5\n")
    assert m.channels == 16 and m.predeblur and m.hr_input and t.iters == 5
    with pytest.raises(ValueError, match="unknown key 'chanels'"):
        io.parse_config("chanels = 16")
    with pytest.raises(ValueError, match="boolean"):
        io.parse_config("predeblur = maybe")
    with pytest.raises(ValueError, match="key=value"):
        io.parse_config("channels 16")
