import math

import numpy as np
import pytest

from cfil import ops
from cfil.errors import ConfigurationError, IncompatibleError, InputError
from cfil.gradcheck import check_gradients
from cfil.network import (
    BackboneHandle,
    CFILModel,
    ModelConfig,
    NonLocalBranchSpec,
    backbone_features,
    forward_nonlocal,
    fuse_and_classify,
    fuse_logits,
    loss,
    loss_logit_grad_closed_form,
    parse_scale,
    with_scale,
)
from cfil.rng import make_rng
from cfil.serialization import save_named
from cfil.tensor import Tensor
from cfil.weighted import DistanceKernel, nonlocal_apply


def images(rng, n, size=64, dtype=np.float32):
    return Tensor(rng.uniform(0, 1, size=(n, 3, size, size)).astype(dtype))


@pytest.fixture(scope="module")
def small():
    return CFILModel(ModelConfig(width_scale="1/8", zero_head=False), seed=3)


def test_scale_parsing():
    assert parse_scale("1/4") == parse_scale(0.25) == parse_scale("0.25")
    with pytest.raises(ConfigurationError):
        parse_scale("0")
    with pytest.raises(ConfigurationError):
        parse_scale("wide")
    assert with_scale(ModelConfig(), "0.5").width_scale == "1/2"


def test_nonlocal_branch_widths_at_full_scale():
    spec = NonLocalBranchSpec()
    assert spec.channels() == [16, 64, 128, 256, 512]
    assert spec.output_width(64) == 2048
    assert NonLocalBranchSpec(width_scale="1/4").channels() == [4, 16, 32, 64, 128]


def test_full_scale_forward_shape_and_insertion_sizes(monkeypatch):
    model = CFILModel(ModelConfig())
    seen = []
    import cfil.network as network

    real = network.nonlocal_apply_batch

    def spy(x, kernel, max_n):
        seen.append(x.shape[1:])
        return real(x, kernel, max_n=max_n)

    monkeypatch.setattr(network, "nonlocal_apply_batch", spy)
    pair = Tensor(make_rng(0, 0).uniform(0, 1, size=(1, 6, 64, 64)).astype(np.float32))
    out = model.forward_nonlocal(pair)
    assert out.shape == (1, 2048)
    assert seen == [(128, 8, 8), (512, 2, 2)]


def test_nonlocal_branch_deterministic(small):
    rng = make_rng(1, 1)
    pair = Tensor(rng.uniform(0, 1, size=(2, 6, 64, 64)).astype(np.float32))
    np.testing.assert_array_equal(small.forward_nonlocal(pair).data, small.forward_nonlocal(pair).data)
    assert small.forward_nonlocal(pair).shape == (2, small.nonlocal_width)


def test_nonlocal_branch_rejects_three_channels(small):
    with pytest.raises(InputError):
        small.forward_nonlocal(images(make_rng(0), 1))


def test_nonlocal_branch_gradient_one_sample():
    model = CFILModel(ModelConfig(width_scale="1/8"), seed=5).astype(np.float64)
    rng = make_rng(2, 2)
    pair = Tensor(rng.uniform(-1, 1, size=(1, 6, 64, 64)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, model.nonlocal_width)))

    def f():
        return ops.sum(ops.mul(model.forward_nonlocal(pair), w))

    leaves = [model.params["nl.conv1.weight"], model.params["nl.conv3.weight"], model.params["nl.conv5.bias"], pair]
    assert check_gradients(f, leaves, max_coords=6, rng=rng) < 1e-4


def test_local_branch_width_and_self_reduction(small):
    rng = make_rng(4)
    x = images(rng, 2, dtype=np.float64)
    model = small.astype(np.float64)
    feats = backbone_features(model.normalize(x), model.backbone)
    assert feats.shape == (2, 64)
    fx, fy = model.forward_local(model.normalize(x), model.normalize(x))
    for i in range(2):
        expected = nonlocal_apply(Tensor(feats.data[i]), DistanceKernel()).data
        np.testing.assert_array_equal(fx.data[i], expected)
        np.testing.assert_array_equal(fy.data[i], expected)


def test_local_branch_constant_backbone_output():
    # zero conv weights and a constant bias make every pooled feature equal
    handle = BackboneHandle(widths=(4, 4, 4))
    backbone = handle.build()
    for k, v in backbone.items():
        v.data = np.zeros_like(v.data) if k.endswith("weight") else np.full_like(v.data, 0.3)
    from cfil.network import forward_local

    x = images(make_rng(0), 2)
    fx, fy = forward_local(x, x, backbone, DistanceKernel())
    np.testing.assert_allclose(fx.data, 0.3, rtol=1e-6)
    np.testing.assert_allclose(fy.data, 0.3, rtol=1e-6)


def test_backbone_is_frozen_and_separate(small):
    assert not set(small.params) & {f"backbone/{k}" for k in small.backbone}
    assert all(not t.requires_grad for t in small.backbone.values())
    assert all(t.requires_grad for t in small.params.values())
    assert list(small.params) == [
        *(f"nl.conv{i}.{p}" for i in range(1, 6) for p in ("weight", "bias")),
        *(f"head.{n}.{p}" for n in ("proj", "fc1", "fc2") for p in ("weight", "bias")),
    ]


def test_external_weights_backbone(tmp_path):
    tiny = BackboneHandle(widths=(4, 8)).build()
    path = tmp_path / "bb.cft"
    save_named(path, {k: v.data for k, v in tiny.items()})
    loaded = BackboneHandle(kind="external-weights", path=str(path)).build()
    assert list(loaded) == list(tiny)
    for k in tiny:
        np.testing.assert_array_equal(loaded[k].data, tiny[k].data)
    model = CFILModel(ModelConfig(width_scale="1/8", backbone_kind="external-weights", backbone_path=str(path)))
    assert model.local_width == 16
    with pytest.raises(ConfigurationError):
        BackboneHandle(kind="external-weights").build()


def test_probabilities_are_distributions(small):
    rng = make_rng(6)
    probs = small(images(rng, 3), images(rng, 3))
    assert probs.shape == (3, 2)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all((probs.data >= 0) & (probs.data <= 1))


def test_zero_head_gives_half():
    model = CFILModel(ModelConfig(width_scale="1/8"), seed=9)
    for k in ("head.proj", "head.fc1"):
        model.params[k + ".weight"].data[:] = 0
    rng = make_rng(7)
    np.testing.assert_array_equal(model(images(rng, 2), images(rng, 2)).data, 0.5)
    default = CFILModel(ModelConfig(width_scale="1/8"), seed=9)
    np.testing.assert_allclose(default(images(rng, 2), images(rng, 2)).data, 0.5, atol=1e-7)


def test_batch_permutation_equivariance(small):
    rng = make_rng(8)
    p, c = images(rng, 3), images(rng, 3)
    out = small(p, c).data
    perm = [2, 0, 1]
    out_perm = small(Tensor(p.data[perm]), Tensor(c.data[perm])).data
    np.testing.assert_allclose(out_perm, out[perm], rtol=1e-5, atol=1e-6)


def test_parent_child_order_matters(small):
    rng = make_rng(10)
    p, c = images(rng, 1), images(rng, 1)
    assert not np.allclose(small(p, c).data, small(c, p).data, atol=1e-7)


def test_fuse_width_mismatch(small):
    nl = Tensor(np.zeros((1, small.nonlocal_width + 1), dtype=np.float32))
    f = Tensor(np.zeros((1, small.local_width), dtype=np.float32))
    with pytest.raises(ConfigurationError):
        fuse_logits(nl, f, f, small.params)
    good = Tensor(np.zeros((1, small.nonlocal_width), dtype=np.float32))
    assert fuse_and_classify(good, f, f, small.params).shape == (1, 2)


def test_image_shape_checks(small):
    rng = make_rng(11)
    with pytest.raises(InputError):
        small(images(rng, 1, size=32), images(rng, 1, size=32))
    with pytest.raises(InputError):
        small(images(rng, 1), images(rng, 2))


def test_loss_examples():
    assert loss(Tensor(np.array([[0.5, 0.5]])), [1]).item() == pytest.approx(math.log(2))
    assert loss(Tensor(np.array([[1.0, 0.0]])), [0]).item() == pytest.approx(0.0, abs=1e-15)
    assert loss(Tensor(np.array([[0.25, 0.75]])), [1]).item() == pytest.approx(-math.log(0.75))
    assert math.isfinite(loss(Tensor(np.array([[1.0, 0.0]])), [1]).item())
    with pytest.raises(InputError):
        loss(Tensor(np.array([[0.5, 0.5]])), [2])


def test_closed_form_examples():
    np.testing.assert_allclose(loss_logit_grad_closed_form(np.array([[0.5, 0.5]]), [1]), [[0.5, -0.5]])
    np.testing.assert_array_equal(loss_logit_grad_closed_form(np.array([[1.0, 0.0]]), [0]), [[0.0, 0.0]])


def test_closed_form_matches_autodiff_100_batches():
    worst = 0.0
    for trial in range(100):
        rng = make_rng(12, trial)
        n = int(rng.integers(1, 17))
        logits = Tensor(rng.normal(scale=2.0, size=(n, 2)), requires_grad=True)
        labels = rng.integers(0, 2, size=n)
        probs = ops.softmax_rows(logits)
        loss(probs, labels).backward()
        worst = max(worst, float(np.abs(logits.grad * n - loss_logit_grad_closed_form(probs, labels)).max()))
    assert worst < 1e-8


def test_state_round_trip_and_mismatch(small):
    clone = CFILModel(ModelConfig(width_scale="1/8", zero_head=False), seed=99)
    clone.load_state(small.state())
    for k in small.params:
        np.testing.assert_array_equal(clone.params[k].data, small.params[k].data)
    other = CFILModel(ModelConfig(width_scale="1/4"))
    with pytest.raises(IncompatibleError, match="nl.conv1.weight"):
        other.load_state(small.state())


def test_config_round_trip():
    cfg = ModelConfig(width_scale="1/4", sign_mode="negated-first-term")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert ModelConfig(sign_mode="eq8-negated-first-term").kernel.sign_mode == "negated-first-term"
