import numpy as np
import pytest

from celltrack_sr import tensor as T
from celltrack_sr.errors import ConfigError, FormatError, ShapeError
from celltrack_sr.network import (
    NetworkConfig,
    NetworkWeights,
    build_network,
    forward,
    load_checkpoint,
    make_seed_image,
    parameter_shapes,
    save_checkpoint,
)


def test_build_is_deterministic():
    a = build_network(NetworkConfig(), seed=7)
    b = build_network(NetworkConfig(), seed=7)
    assert a.equals(b)
    assert not a.equals(build_network(NetworkConfig(), seed=8))


def test_default_layout():
    shapes = parameter_shapes(NetworkConfig())
    encoders = [k for k in shapes if k.startswith("encoder.") and k.endswith("conv.weight")]
    decoders = [k for k in shapes if k.startswith("decoder.") and k.endswith("conv1.weight")]
    assert len(encoders) == 4 and len(decoders) == 4
    assert shapes["decoder.0.conv1.weight"] == (132, 132, 3, 3)
    assert shapes["output.conv.weight"] == (1, 128, 1, 1)


def test_decoder_channels_invariant():
    NetworkConfig(encoder_channels=8, skip_channels=2, decoder_channels=10)
    with pytest.raises(ConfigError):
        NetworkConfig(encoder_channels=8, skip_channels=2, decoder_channels=12)


def test_forward_shape_and_range(toy_weights):
    z = make_seed_image(32, 32, seed=0)
    out = forward(toy_weights, z).values
    assert out.shape == (1, 32, 32)
    assert np.all((out > 0) & (out < 1))


def test_forward_rejects_indivisible_size(toy_weights):
    with pytest.raises(ShapeError):
        forward(toy_weights, make_seed_image(30, 32, seed=0))


def test_skip_ablation_changes_output(toy_weights):
    z = make_seed_image(32, 32, seed=0)
    full = forward(toy_weights, z).values
    ablated = forward(toy_weights, z, ablate_skips=[0]).values
    assert not np.allclose(full, ablated)


def test_first_kernel_gradient(toy_network):
    weights = build_network(toy_network, seed=11)
    z = make_seed_image(16, 16, seed=2)
    T.backward(T.mean(forward(weights, z)))
    analytic = weights["encoder.0.conv.weight"].grad
    base = weights.arrays()
    sample_rng = np.random.default_rng(0)
    h = 1e-6

    def mean_output(arrays):
        return forward(NetworkWeights.from_arrays(toy_network, arrays), z).values.mean()

    for _ in range(10):
        idx = tuple(sample_rng.integers(0, s) for s in analytic.shape)
        plus, minus = dict(base), dict(base)
        plus["encoder.0.conv.weight"] = base["encoder.0.conv.weight"].copy()
        minus["encoder.0.conv.weight"] = base["encoder.0.conv.weight"].copy()
        plus["encoder.0.conv.weight"][idx] += h
        minus["encoder.0.conv.weight"][idx] -= h
        numeric = (mean_output(plus) - mean_output(minus)) / (2 * h)
        assert abs(analytic[idx] - numeric) <= 1e-4 * abs(numeric) + 1e-8


def test_checkpoint_roundtrip(tmp_path, toy_weights):
    path = save_checkpoint(toy_weights, tmp_path / "net.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.equals(toy_weights)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(FormatError):
        load_checkpoint(path)
