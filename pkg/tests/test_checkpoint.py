import json
import struct

import numpy as np
import pytest

from nlrn import checkpoint as ckpt
from nlrn.checkpoint import CheckpointFormatError
from nlrn.model import DESK_CONFIG, NlrnConfig, forward, init_params, param_shapes


def trained_like(cfg, seed):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    for v in list(params.tensors.values()) + list(params.buffers.values()):
        v += rng.normal(size=v.shape).astype(np.float32) * 0.1
    return params


def test_round_trip_bit_exact(tmp_path):
    params = trained_like(DESK_CONFIG, 0)
    ckpt.save_params(tmp_path / "m.ckpt", params)
    back = ckpt.load_params(tmp_path / "m.ckpt")
    assert back.config == params.config
    for store in ("tensors", "buffers"):
        a, b = getattr(params, store), getattr(back, store)
        assert list(a) == list(b)
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()
    img = np.random.default_rng(1).random((12, 12))
    out_a, _ = forward(img, params, "infer")
    out_b, _ = forward(img, back, "infer")
    assert out_a.tobytes() == out_b.tobytes()
    ckpt.save_params(tmp_path / "again.ckpt", back)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_layout(tmp_path):
    blob = ckpt.encode({"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(1)}, {"k": 1})
    assert blob[:8] == b"NLRNCKPT"
    (hlen,) = struct.unpack("<I", blob[8:12])
    assert (12 + hlen) % 64 == 0
    header = json.loads(blob[12 : 12 + hlen])
    assert header["tensors"] == [
        {"name": "a", "shape": [2, 3], "dtype": "float32"},
        {"name": "b", "shape": [1], "dtype": "float32"},
    ]
    assert header["meta"] == {"k": 1}
    payload = np.frombuffer(blob[12 + hlen :], dtype="<f4")
    np.testing.assert_array_equal(payload, [0, 1, 2, 3, 4, 5, 1])


def test_parameter_payload_independent_of_unroll(tmp_path):
    short, long = NlrnConfig(16, 8, 9, 2), NlrnConfig(16, 8, 9, 12)
    ckpt.save_params(tmp_path / "t2.ckpt", init_params(short, 0))
    ckpt.save_params(tmp_path / "t12.ckpt", init_params(long, 0))
    ta, _ = ckpt.read(tmp_path / "t2.ckpt")
    tb, _ = ckpt.read(tmp_path / "t12.ckpt")
    names = [n for n, _ in param_shapes(short)]
    assert sum(ta[n].nbytes for n in names) == sum(tb[n].nbytes for n in names)
    for n in names:
        assert ta[n].tobytes() == tb[n].tobytes()
    # the only growth is the per-step batch-norm statistics: 2 layers x 2 buffers x 10 steps x 16
    size_a = (tmp_path / "t2.ckpt").stat().st_size
    size_b = (tmp_path / "t12.ckpt").stat().st_size
    extra_stats = 2 * 2 * 10 * 16 * 4
    assert abs(size_b - size_a - extra_stats) < 64


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 20)
    with pytest.raises(CheckpointFormatError, match="magic"):
        ckpt.load_params(tmp_path / "x.ckpt")


def test_truncated_and_trailing(tmp_path):
    blob = ckpt.encode({"a": np.ones(4)})
    with pytest.raises(CheckpointFormatError, match="truncated"):
        ckpt.decode(blob[:-1])
    with pytest.raises(CheckpointFormatError, match="trailing"):
        ckpt.decode(blob + b"\0")
    with pytest.raises(CheckpointFormatError, match="truncated"):
        ckpt.decode(blob[:20])


def test_wrong_shapes_rejected():
    params = init_params(NlrnConfig(4, 2, 3, 2), 0)
    tensors = ckpt.params_to_tensors(params)
    tensors["conv1.weight"] = np.zeros((4, 4, 1, 1), np.float32)
    with pytest.raises(CheckpointFormatError, match="conv1.weight"):
        ckpt.params_from_tensors(tensors, ckpt.params_meta(params))
    del tensors["conv1.weight"]
    with pytest.raises(CheckpointFormatError, match="missing"):
        ckpt.params_from_tensors(tensors, ckpt.params_meta(params))
    with pytest.raises(CheckpointFormatError, match="config"):
        ckpt.params_from_tensors(tensors, {"config": {"unroll": 0}})


def test_atomic_write_leaves_no_temp(tmp_path):
    ckpt.write_atomic(tmp_path / "a.ckpt", ckpt.encode({}))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.ckpt"]
