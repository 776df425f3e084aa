import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgesegnet.config import INPUT, ResidualBottleneckSpec, reference_config
from edgesegnet.errors import ConfigError, ShapeError
from edgesegnet.layers import ForwardContext
from edgesegnet.network import (
    NetworkGraph,
    assemble_network,
    build_bottleneck_reduction,
    build_refine,
    build_residual_bottleneck,
)
from edgesegnet.config import BottleneckReductionSpec, RefineSpec

from helpers import random_configs, tiny_config

EVAL = ForwardContext(training=False, update_stats=False, retain=False)


def _init(block, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    for layer in block.layers().values():
        layer.cast(dtype)
        layer.init(rng)
    return block


def test_residual_bottleneck_channel_trace():
    b = build_residual_bottleneck(ResidualBottleneckSpec("rb", 32, 4))
    shapes = [l.weight.shape for n, l in b.layers().items() if n.startswith("conv")]
    assert shapes == [(8, 32, 1, 1), (8, 8, 3, 3), (32, 8, 1, 1)]


def test_residual_bottleneck_zero_input_gives_zero():
    b = _init(build_residual_bottleneck(ResidualBottleneckSpec("rb", 16, 4)))
    out = b.forward({"in": np.zeros((1, 16, 4, 4))}, EVAL)
    assert not out.any()


def test_residual_bottleneck_bad_ratio():
    with pytest.raises(ConfigError):
        build_residual_bottleneck(ResidualBottleneckSpec("rb", 30, 4))


def test_reduction_shape():
    b = _init(build_bottleneck_reduction(BottleneckReductionSpec("r", 8, 4, 16)), dtype=np.float32)
    out = b.forward({"in": np.ones((1, 8, 32, 24), np.float32)}, EVAL)
    assert out.shape == (1, 16, 4, 3)


def test_refine_shape_and_skip_independence():
    b = _init(build_refine(RefineSpec("f", 16, 8, 8, 8)))
    rng = np.random.default_rng(0)
    deep = rng.standard_normal((1, 16, 2, 3))
    out = b.forward({"deep": deep, "skip": rng.standard_normal((1, 8, 16, 24))}, EVAL)
    assert out.shape == (1, 8, 16, 24)
    b.skip_proj.conv.weight[...] = 0
    o1 = b.forward({"deep": deep, "skip": rng.standard_normal((1, 8, 16, 24))}, EVAL)
    o2 = b.forward({"deep": deep, "skip": rng.standard_normal((1, 8, 16, 24))}, EVAL)
    np.testing.assert_array_equal(o1, o2)


def test_refine_resolution_mismatch():
    b = _init(build_refine(RefineSpec("f", 16, 8, 8, 4)))
    with pytest.raises(ShapeError):
        b.forward({"deep": np.zeros((1, 16, 2, 2)), "skip": np.zeros((1, 8, 16, 16))}, EVAL)


def test_same_seed_identical_parameters():
    a = assemble_network(tiny_config(), seed=3)
    b = assemble_network(tiny_config(), seed=3)
    c = assemble_network(tiny_config(), seed=4)
    assert all(np.array_equal(a.state_dict()[k], v) for k, v in b.state_dict().items())
    assert any(not np.array_equal(a.state_dict()[k], v) for k, v in c.state_dict().items())


def test_initialization_statistics():
    g = assemble_network(reference_config(), seed=0)
    w = g.parameters()["rb_b1.conv1.weight"]  # fan_in = 728
    assert abs(w.std() - np.sqrt(2 / 728)) / np.sqrt(2 / 728) < 0.02
    assert abs(w.mean()) < 3 * np.sqrt(2 / 728) / np.sqrt(w.size)
    assert np.all(g.parameters()["rb_b1.bn1.gamma"] == 1)
    assert np.all(g.buffers()["rb_b1.bn1.running_var"] == 1)


def test_parameter_shapes_follow_spec():
    g = assemble_network(reference_config())
    p = g.parameters()
    assert p["stem.conv.weight"].shape == (32, 3, 3, 3)
    assert p["reduce.conv2.weight"].shape == (728, 16, 8, 8)
    assert p["refine.deep_conv.weight"].shape == (32, 728, 1, 1)
    assert p["head.classifier.bias"].shape == (32,)
    assert "rb_a1.conv1.bias" not in p


def test_forward_eval_is_pure_and_finite():
    g = assemble_network(tiny_config())
    x = np.random.default_rng(0).uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32)
    before = {k: v.copy() for k, v in g.state_dict().items()}
    a, b = g.forward(x), g.forward(x)
    np.testing.assert_array_equal(a, b)
    assert np.isfinite(a).all() and a.shape == (2, 3, 32, 32)
    assert all(np.array_equal(before[k], v) for k, v in g.state_dict().items())


def test_training_forward_updates_running_stats():
    g = assemble_network(tiny_config())
    x = np.random.default_rng(0).uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32)
    g.forward(x, training=True)
    assert np.any(g.buffers()["stem.bn.running_mean"] != 0)


def test_forward_wrong_channels():
    g = assemble_network(tiny_config())
    with pytest.raises(ShapeError):
        g.forward(np.zeros((1, 4, 32, 32), np.float32))


def test_assemble_rejects_missing_mask_entry():
    cfg = reference_config()
    cfg.shortcut_mask = []
    with pytest.raises(ConfigError):
        assemble_network(cfg)


def test_assemble_reports_shape_failures_as_config_error():
    cfg = reference_config()
    cfg.input_size = (40, 40)
    with pytest.raises(ConfigError) as exc:
        assemble_network(cfg)
    assert any("divisible" in e for e in exc.value.errors)


def test_astype_round_trip():
    g = assemble_network(tiny_config())
    d = g.astype(np.float64)
    assert d.dtype == np.float64 and g.dtype == np.float32
    assert all(v.dtype == np.float64 for v in d.state_dict().values())


def test_shape_table_matches_runtime_for_random_configs():
    for cfg in random_configs(20, seed=11, start=tiny_config()):
        g = NetworkGraph(cfg)
        g.initialize(0)
        x = np.zeros((1, 3) + tuple(cfg.input_size), np.float32)
        static = g.shapes(x.shape)
        # Re-run node by node and compare every intermediate shape.
        values = {INPUT: x}
        for name in g.order:
            values[name] = g.blocks[name].forward({e.port: values[e.src] for e in g.inbound[name]}, EVAL)
            assert values[name].shape == static[name], (cfg.digest(), name)
        assert values[g.output].shape[2:] == x.shape[2:]
