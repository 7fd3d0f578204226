import numpy as np
import pytest
import torch

from conftest import toy_config
from dtpstereo.accounting import count_params
from dtpstereo.config import build_config
from dtpstereo.errors import ShapeError
from dtpstereo.model import DTPNet, forward_ops

ALLOWED_OPS = {"conv2d", "transpose_conv2d", "norm", "activation", "concat", "skip_add",
               "bilinear_upsample"}


@pytest.fixture(scope="module")
def net3():
    torch.manual_seed(0)
    return DTPNet(build_config("Setting3", 192, 16)).eval()


def test_feature_shapes(net3):
    x = torch.rand(1, 3, 64, 64)
    f_l, f_r = net3.extract_features(x, torch.rand(1, 3, 64, 64))
    assert f_l.shape == f_r.shape == (1, net3.config.feature_channels, 16, 16)


def test_siamese_features_equal(net3):
    x = torch.rand(2, 3, 32, 48)
    f_l, f_r = net3.extract_features(x, x.clone())
    assert torch.equal(f_l, f_r)


def test_siamese_in_training_mode():
    net = DTPNet(build_config("Setting3", 16, 4)).train()
    x = torch.rand(2, 3, 16, 24)
    f_l, f_r = net.extract_features(x, x.clone())
    assert torch.allclose(f_l, f_r, atol=1e-6)


def test_cost_volume_shape(net3):
    f = torch.rand(1, net3.config.feature_channels, 16, 16)
    assert net3.build_cost_volume(f, f).shape == (1, 48, 16, 16)


def test_zero_final_cost_conv_gives_zero_volume():
    net = DTPNet(build_config("Setting3", 32, 4)).eval()
    with torch.no_grad():
        net.layers["cv3"].weight.zero_()
        net.layers["cv3"].bias.zero_()
    f = torch.randn(2, net.config.feature_channels, 4, 6)
    assert torch.count_nonzero(net.build_cost_volume(f, f)) == 0


def test_regress_shape(net3):
    assert net3.regress(torch.rand(1, 48, 16, 16)).shape == (1, 192, 64, 64)


def test_constant_logits_stay_constant_after_upsampling():
    net = DTPNet(build_config("Setting3", 16, 4)).eval()
    with torch.no_grad():
        head = net.layers["reg_logits"]
        head.weight.zero_()
        head.bias.copy_(torch.linspace(-1, 1, 16))
    logits = net.regress(torch.randn(1, 4, 5, 7))
    assert logits.shape == (1, 16, 20, 28)
    for k in range(16):
        assert torch.allclose(logits[0, k], torch.full_like(logits[0, k], head.bias[k].item()))


@pytest.mark.parametrize("setting", ["Setting1", "Setting2", "Setting3"])
@pytest.mark.parametrize("hw", [(16, 16), (20, 36), (28, 12)])
def test_forward_shape_contract(setting, hw):
    net = DTPNet(build_config(setting, 16, 4)).eval()
    h, w = hw
    logits, disp = net(torch.rand(2, 3, h, w), torch.rand(2, 3, h, w))
    assert logits.shape == (2, 16, h, w)
    assert disp.shape == (2, h, w)
    assert disp.min() >= 0 and disp.max() <= 15


def test_kitti_height_is_accepted():
    net = DTPNet(build_config("Setting3", 16, 4)).eval()
    _, disp = net(torch.rand(1, 3, 376, 12), torch.rand(1, 3, 376, 12))
    assert disp.shape == (1, 376, 12)


def test_repeated_eval_calls_identical(net3):
    x, y = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    a, b = net3(x, y), net3(x, y)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_same_seed_same_init():
    torch.manual_seed(5)
    a = DTPNet(build_config("Setting3", 16, 4))
    torch.manual_seed(5)
    b = DTPNet(build_config("Setting3", 16, 4))
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_init_scheme():
    torch.manual_seed(0)
    net = DTPNet(build_config("Setting3", 192, 16))
    w = net.layers["hg1_e2b"].weight
    fan_in = w.shape[1] * 9
    assert w.std().item() == pytest.approx(np.sqrt(2 / fan_in), rel=0.05)
    assert torch.count_nonzero(net.layers["hg1_e2b"].bias) == 0
    bn = net.layers["hg1_e2b_bn"]
    assert torch.all(bn.weight == 1) and torch.all(bn.bias == 0)


@pytest.mark.parametrize("setting", ["Setting1", "Setting2", "Setting3"])
def test_param_count_matches_tensors(setting):
    cfg = build_config(setting, 192, 16)
    assert count_params(cfg).total.params == DTPNet(cfg).num_parameters()


def test_forward_ops_are_deployment_friendly(setting3):
    assert forward_ops(setting3) <= ALLOWED_OPS
    for setting in ("Setting1", "Setting2"):
        assert forward_ops(build_config(setting, 192, 16)) <= ALLOWED_OPS


def test_forward_uses_only_listed_modules(net3):
    kinds = {type(m).__name__ for m in net3.modules()} - {"DTPNet", "ModuleDict"}
    assert kinds == {"Conv2d", "ConvTranspose2d", "BatchNorm2d"}


@pytest.mark.parametrize("left_shape,right_shape,word", [
    ((1, 3, 30, 32), (1, 3, 30, 32), "height=30"),
    ((1, 3, 32, 30), (1, 3, 32, 30), "width=30"),
    ((1, 1, 32, 32), (1, 1, 32, 32), "3 x H x W"),
    ((1, 3, 32, 32), (1, 3, 32, 36), "differ"),
])
def test_shape_errors_name_the_axis(net3, left_shape, right_shape, word):
    with pytest.raises(ShapeError, match=word):
        net3(torch.rand(*left_shape), torch.rand(*right_shape))


def test_cost_volume_rejects_wrong_channels(net3):
    f = torch.rand(1, 5, 4, 4)
    with pytest.raises(ShapeError):
        net3.build_cost_volume(f, f)
    with pytest.raises(ShapeError):
        net3.regress(torch.rand(1, 47, 4, 4))


def test_teacher_logits_no_grad_and_mode_restored():
    net = DTPNet(build_config("Setting3", 16, 4)).train()
    q = net.teacher_logits(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16))
    assert not q.requires_grad and net.training


def _finite_difference_check(net, inputs, params, n_checks=6, eps=1e-6):
    def loss():
        return net(*inputs)[1].pow(2).sum()

    net.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    worst = 0.0
    for p in params:
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        for i in rng.choice(flat.numel(), size=min(n_checks, flat.numel()), replace=False):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
                flat[i] = old
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(grad[i].item()), 1e-8)
            worst = max(worst, abs(fd - grad[i].item()) / denom)
    return worst


def test_full_forward_gradient_matches_finite_differences():
    torch.manual_seed(3)
    net = DTPNet(build_config("Setting3", 8, 2)).double().eval()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    y = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    params = [net.layers[n].weight for n in ("feat1_down", "cv1", "hg1_e2a", "hg1_d0", "reg_logits")]
    assert _finite_difference_check(net, (x, y), params) < 1e-3


def test_toy_net_gradient_matches_finite_differences():
    torch.manual_seed(4)
    net = DTPNet(toy_config((3, 5), d_max=8)).double().eval()
    x = torch.rand(1, 3, 8, 12, dtype=torch.float64)
    params = [net.layers[n].weight for n in ("f1", "f2", "cv", "logits")]
    assert _finite_difference_check(net, (x, x.flip(-1)), params, n_checks=10) < 1e-3
