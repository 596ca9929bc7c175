import numpy as np
import pytest

from rankpress.checkpoint import (
    CheckpointError,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
)
from rankpress.nets import NetConfig, build_teacher


@pytest.fixture()
def net():
    return build_teacher(NetConfig(conv_widths=(4, 8), dense_widths=(8,), height=16, width=16, seed=2))


def test_round_trip_bit_exact(net, tmp_path):
    spec, params = net
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, spec, params, meta={"epoch": "7", "note": "probe"})
    spec2, params2, meta = load_checkpoint(path)
    assert meta["epoch"] == "7" and meta["note"] == "probe"
    assert [l.name for l in spec2.layers] == [l.name for l in spec.layers]
    assert set(params2) == set(params)
    for k in params:
        assert np.array_equal(params[k].data, params2[k].data)
        assert params2[k].data.dtype == np.float32


def test_save_is_deterministic(net, tmp_path):
    spec, params = net
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, spec, params)
    save_checkpoint(b, spec, params)
    assert a.read_bytes() == b.read_bytes()
    assert checkpoint_hash(a) == checkpoint_hash(b)


def test_hash_tracks_parameters(net, tmp_path):
    spec, params = net
    a = tmp_path / "a.ckpt"
    save_checkpoint(a, spec, params)
    h1 = checkpoint_hash(a)
    k = next(iter(params))
    params[k].data.flat[0] += 1.0
    save_checkpoint(a, spec, params)
    assert checkpoint_hash(a) != h1


def test_corrupted_blob_rejected(net, tmp_path):
    spec, params = net
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, spec, params)
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_file_rejected(net, tmp_path):
    spec, params = net
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, spec, params)
    path.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bad_magic_rejected(net, tmp_path):
    spec, params = net
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, spec, params)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0x20
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_loaded_params_keep_grad_flag(net, tmp_path):
    spec, params = net
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, spec, params)
    _, params2, _ = load_checkpoint(path)
    assert all(p.requires_grad for p in params2.values())
