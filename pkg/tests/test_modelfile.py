import struct

import numpy as np
import pytest

from fgnn import modelfile
from fgnn.experiments import build_network
from fgnn.layers import FgnDenseLayer, Network
from fgnn.modelfile import ModelFormatError


def mixed_net():
    net = build_network("conv1d:3:3:2:1:relu fgn-conv1d:2:2:1:2:tanh dense:5:relu fgn-dense:4:identity",
                        (2, 20), seed=3, sigma0=4.0)
    return net


def variant_net(variance):
    rng = np.random.default_rng(7)
    sigma = {"spherical": rng.uniform(1, 3, 3),
             "diagonal": rng.uniform(1, 3, (3, 4))}.get(variance)
    if variance == "full":
        sigma = np.stack([np.tril(rng.standard_normal((4, 4))) + 3 * np.eye(4) for _ in range(3)])
    layer = FgnDenseLayer(4, 3, "tanh", variance=variance, sigma=sigma, p_norm=1.5, seed=1)
    return Network([layer], (4,))


@pytest.mark.parametrize("make", [mixed_net, lambda: variant_net("spherical"),
                                  lambda: variant_net("diagonal"), lambda: variant_net("full")])
def test_save_load_save_is_byte_identical(tmp_path, make):
    net = make()
    modelfile.save(net, tmp_path / "a.fgnn")
    again = modelfile.load(tmp_path / "a.fgnn")
    modelfile.save(again, tmp_path / "b.fgnn")
    assert (tmp_path / "a.fgnn").read_bytes() == (tmp_path / "b.fgnn").read_bytes()


@pytest.mark.parametrize("make", [mixed_net, lambda: variant_net("full")])
def test_reloaded_outputs_match(make, rng):
    net = make()
    back = modelfile.from_bytes(modelfile.to_bytes(net))
    x = rng.standard_normal((25,) + tuple(net.input_shape))
    a, b = net.logits(x), back.logits(x)
    np.testing.assert_allclose(b, a, rtol=1e-5, atol=1e-6 * np.abs(a).max())
    assert back.input_shape == net.input_shape
    assert [l.kind for l in back.layers] == [l.kind for l in net.layers]


def test_header_layout():
    net = mixed_net()
    buf = modelfile.to_bytes(net)
    assert buf[:4] == b"FGNN"
    version, count = struct.unpack("<HH", buf[4:8])
    assert version == modelfile.VERSION and count == 4


def test_infinite_sigma_survives():
    layer = FgnDenseLayer(3, 2, "relu", sigma=np.array([np.inf, 2.0]), seed=0)
    back = modelfile.from_bytes(modelfile.to_bytes(Network([layer], (3,))))
    assert np.isinf(back.layers[0].sigma[0]) and back.layers[0].sigma[1] == 2.0


def test_coupled_layer_saves_its_effective_bias(rng):
    layer = FgnDenseLayer(3, 2, "tanh", sigma=np.array([5.0, 5.0]), seed=2)
    layer.C = rng.standard_normal((2, 3))
    layer.coupled = True
    net = Network([layer], (3,))
    back = modelfile.from_bytes(modelfile.to_bytes(net))
    assert not back.layers[0].coupled
    x = rng.standard_normal((10, 3))
    np.testing.assert_allclose(back.logits(x), net.logits(x), rtol=1e-5, atol=1e-7)


def test_bad_magic():
    with pytest.raises(ModelFormatError, match="magic"):
        modelfile.from_bytes(b"XXXX" + modelfile.to_bytes(mixed_net())[4:])


def test_bad_version():
    buf = bytearray(modelfile.to_bytes(mixed_net()))
    buf[4:6] = struct.pack("<H", modelfile.VERSION + 1)
    with pytest.raises(ModelFormatError, match="version"):
        modelfile.from_bytes(bytes(buf))


def test_truncated_and_trailing_bytes():
    buf = modelfile.to_bytes(mixed_net())
    with pytest.raises(ModelFormatError):
        modelfile.from_bytes(buf[:-3])
    with pytest.raises(ModelFormatError, match="trailing"):
        modelfile.from_bytes(buf + b"\0")


def test_unknown_kind_tag():
    buf = bytearray(modelfile.to_bytes(mixed_net()))
    # first layer tag follows magic, version/count, rank byte and two u32 dims
    pos = 4 + 4 + 1 + 8
    buf[pos] = 9
    with pytest.raises(ModelFormatError, match="unknown kind"):
        modelfile.from_bytes(bytes(buf))
