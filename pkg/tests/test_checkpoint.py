import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgesegnet.checkpoint import decode, encode, expected_size, load_checkpoint, save_checkpoint
from edgesegnet.config import reference_config
from edgesegnet.errors import CheckpointError, ConsistencyError, CorruptionError, FormatError, VersionError
from edgesegnet.network import assemble_network

from helpers import tiny_config


def _graph(seed=0, cfg=None):
    g = assemble_network(cfg or tiny_config())
    g.initialize(seed)
    rng = np.random.default_rng(seed)
    for v in g.buffers().values():
        v[...] = rng.uniform(0.5, 1.5, v.shape)
    return g


def _reseal(body: bytes) -> bytes:
    return b"ESEG" + body + struct.pack("<I", zlib.crc32(body))


def test_round_trip_restores_every_tensor(tmp_path):
    g = _graph(3)
    save_checkpoint(g, tmp_path / "m.eseg")
    h = load_checkpoint(tmp_path / "m.eseg")
    assert h.config == g.config
    for k, v in g.state_dict().items():
        np.testing.assert_array_equal(h.state_dict()[k], v)
    x = np.random.default_rng(0).random((1, 3, 32, 32), dtype=np.float32)
    np.testing.assert_array_equal(h.forward(x), g.forward(x))


def test_size_matches_hand_layout(tmp_path):
    g = _graph()
    n = save_checkpoint(g, tmp_path / "m.eseg")
    assert n == (tmp_path / "m.eseg").stat().st_size
    state = g.state_dict()
    header = 4 + 4 + 4 + len(g.config.to_json().encode()) + 4 + 4
    for k, v in state.items():
        header += 2 + len(k) + 1 + 4 * v.ndim
    assert n == 4 * sum(v.size for v in state.values()) + header
    assert expected_size(g) == (n - header, header)


def test_reference_checkpoint_near_model_bytes(tmp_path):
    g = assemble_network(reference_config())
    n = save_checkpoint(g, tmp_path / "r.eseg")
    payload, header = expected_size(g)
    assert n == payload + header and header < 0.01 * payload


def test_save_is_byte_stable(tmp_path):
    g = _graph(1)
    save_checkpoint(g, tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_load_in_float64(tmp_path):
    save_checkpoint(_graph(), tmp_path / "a")
    h = load_checkpoint(tmp_path / "a", dtype=np.float64)
    assert all(v.dtype == np.float64 for v in h.state_dict().values())


def test_bad_magic(tmp_path):
    blob = encode("{}", {})
    with pytest.raises(FormatError):
        decode(b"ESEF" + blob[4:])
    with pytest.raises(FormatError):
        decode(b"")


def test_truncation_detected():
    blob = encode(tiny_config().to_json(), _graph().state_dict())
    for cut in (5, 15, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CorruptionError):
            decode(blob[:cut])


def test_version_mismatch():
    body = encode("{}", {})[4:-4]
    with pytest.raises(VersionError):
        decode(_reseal(struct.pack("<I", 2) + body[4:]))


def test_trailing_bytes_inside_checksum():
    body = encode("{}", {})[4:-4]
    with pytest.raises(FormatError):
        decode(_reseal(body + b"\0"))


def test_consistency_errors(tmp_path):
    g = _graph()
    state = g.state_dict()
    cfg = g.config.to_json()
    missing = dict(list(state.items())[:-1])
    (tmp_path / "a").write_bytes(encode(cfg, missing))
    with pytest.raises(ConsistencyError, match="missing"):
        load_checkpoint(tmp_path / "a")
    first = next(iter(state))
    reshaped = dict(state, **{first: state[first].reshape(-1)})
    (tmp_path / "b").write_bytes(encode(cfg, reshaped))
    with pytest.raises(ConsistencyError, match="shape"):
        load_checkpoint(tmp_path / "b")
    (tmp_path / "c").write_bytes(encode('{"nodes": []}', state))
    with pytest.raises(ConsistencyError):
        load_checkpoint(tmp_path / "c")


@settings(max_examples=60)
@given(data=st.data())
def test_single_byte_corruption_always_detected(data):
    blob = encode(tiny_config().to_json(), _graph().state_dict())
    pos = data.draw(st.integers(0, len(blob) - 1))
    xor = data.draw(st.integers(1, 255))
    bad = bytearray(blob)
    bad[pos] ^= xor
    with pytest.raises(CheckpointError):
        decode(bytes(bad))
