import numpy as np
import pytest

from musp.autograd import ShapeError, Tensor
from musp.backbone import Backbone, BackboneConfig
from musp.functional import ConfigError

from conftest import FD_TOL, max_grad_error


def test_default_output_shape():
    net = Backbone(BackboneConfig(), np.random.default_rng(0))
    out = net.extract_features(np.random.default_rng(1).uniform(size=(2, 64, 64, 3)))
    assert out.shape == (2, 8, 8, 32)
    assert BackboneConfig().output_spatial == 8 and BackboneConfig().output_channels == 32


def test_single_image_and_determinism():
    net = Backbone(BackboneConfig(), np.random.default_rng(0)).eval()
    img = np.random.default_rng(2).uniform(size=(64, 64, 3))
    a, b = net(img), net(img)
    assert a.shape == (8, 8, 32)
    np.testing.assert_array_equal(a.data, b.data)


def test_zero_image_is_finite():
    net = Backbone(BackboneConfig(), np.random.default_rng(0))
    out = net(np.zeros((2, 64, 64, 3)))
    assert np.all(np.isfinite(out.data))


def test_size_mismatch_is_diagnosed():
    net = Backbone(BackboneConfig(), np.random.default_rng(0))
    with pytest.raises(ShapeError, match="64"):
        net(np.zeros((2, 32, 32, 3)))


@pytest.mark.parametrize("size,plan", [(36, (8, 8, 8)), (64, (4, 4, 4, 4, 4))])
def test_config_rejects_bad_grids(size, plan):
    with pytest.raises(ConfigError):
        BackboneConfig(size, plan)


@pytest.mark.parametrize("size,plan", [(32, (4, 8)), (48, (6, 6, 5)), (16, (3, 3))])
def test_spatial_contract(size, plan):
    cfg = BackboneConfig(size, plan)
    net = Backbone(cfg, np.random.default_rng(0))
    out = net(np.random.default_rng(0).uniform(size=(2, size, size, 3)))
    assert out.shape == (2, size // 2 ** len(plan), size // 2 ** len(plan), plan[-1])


@pytest.mark.parametrize("seed", range(10))
def test_gradient_reaches_first_convolution(seed):
    net = Backbone(BackboneConfig(16, (3, 4)), np.random.default_rng(seed))
    images = np.random.default_rng([seed, 1]).uniform(size=(3, 16, 16, 3))
    target = np.random.default_rng([seed, 2]).normal(size=(3, 4, 4, 4))
    first = net.named_parameters()["stage0_conv.kernel"]
    err = max_grad_error(lambda: (net(images) * target).sum(), [first], np.random.default_rng(seed), sample=15)
    assert err <= FD_TOL
