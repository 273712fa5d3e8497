import struct

import numpy as np
import pytest

from rpnsd.checkpoint import MAGIC, Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from rpnsd.exceptions import CheckpointError, ConfigError
from rpnsd.features import make_speaker_inventory, synthetic_features
from rpnsd.annotation import from_turns
from rpnsd.model import RPNSDNet, micro_config
from rpnsd.training import train

INV = make_speaker_inventory(2, dim=8, seed=1)


def data(n=4):
    out = []
    for i in range(n):
        ann = from_turns(f"r{i}", [(INV.speakers[0], 0.05, 0.3), (INV.speakers[1], 0.25 + 0.02 * i, 0.55)])
        out.append((synthetic_features(INV, ann, 64, i, 0.01), ann))
    return out


def model():
    return RPNSDNet(micro_config(num_speakers=2, seed=5), INV.speakers)


def test_forward_bit_identical_after_reload(tmp_path):
    m = model()
    opt, _ = train(m, data(), 3, batch_size=2)
    path = save_checkpoint(tmp_path / "m.ckpt", m, opt)
    ckpt = load_checkpoint(path)
    m2 = ckpt.build_model()
    for chunk, _ in data():
        a, b = m.forward(chunk), m2.forward(chunk)
        assert a.intervals.tobytes() == b.intervals.tobytes()
        assert a.scores.tobytes() == b.scores.tobytes()
        assert a.embeddings.tobytes() == b.embeddings.tobytes()
    assert ckpt.step == 3 and ckpt.speakers == INV.speakers
    assert ckpt.config == m.config


def test_resume_matches_uninterrupted_run(tmp_path):
    straight = model()
    train(straight, data(), 6, batch_size=2)

    first = model()
    opt, _ = train(first, data(), 3, batch_size=2)
    save_checkpoint(tmp_path / "half.ckpt", first, opt)
    ckpt = load_checkpoint(tmp_path / "half.ckpt")
    resumed = ckpt.build_model()
    train(resumed, data(), 3, batch_size=2, optimizer=ckpt.build_optimizer())
    for k, v in straight.params.items():
        np.testing.assert_array_equal(resumed.params[k].data, v.data)


def test_bad_magic():
    raw = bytearray(to_bytes(Checkpoint.from_model(model())))
    raw[0:1] = b"X"
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(bytes(raw))


def test_unknown_version():
    raw = bytearray(to_bytes(Checkpoint.from_model(model())))
    raw[len(MAGIC) : len(MAGIC) + 4] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version 99"):
        from_bytes(bytes(raw))


@pytest.mark.parametrize("cut", [4, 20, 200, -1])
def test_truncated(cut):
    raw = to_bytes(Checkpoint.from_model(model()))
    with pytest.raises(CheckpointError):
        from_bytes(raw[:cut])


def test_missing_end_marker():
    raw = to_bytes(Checkpoint.from_model(model()))
    with pytest.raises(CheckpointError, match="end marker"):
        from_bytes(raw[:-4] + b"XXXX")


def test_geometry_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", model())
    with pytest.raises(ConfigError, match="roi_bins"):
        load_checkpoint(path, expected=micro_config(num_speakers=2, roi_bins=3))
    load_checkpoint(path, expected=micro_config(num_speakers=2, lr=0.5))


def test_save_replaces_atomically(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"old")
    save_checkpoint(path, model())
    assert path.read_bytes().startswith(MAGIC)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.ckpt"]
