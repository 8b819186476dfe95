import numpy as np
import pytest

from _configs import random_configs
from _oracles import numeric_grad, rel_error
from pdrcaps.capsules import MarginLossConfig, capsule_lengths, margin_loss, squash
from pdrcaps.errors import CheckpointMismatchError, ConfigError, DimensionError, InvalidStateError
from pdrcaps.model import (ArchConfig, BranchSpec, LayerSpec, bn, branch_output_size, build_model,
                           capsule_counts, conv3x3, dwsep, original_capsnet, reference_cifar10, reference_fmnist,
                           relu, small_synthetic, validate)
from pdrcaps.tensor import GradTape, conv2d_forward


def test_reference_capsule_counts():
    assert capsule_counts(reference_cifar10()) == [196, 100, 36]
    assert sum(capsule_counts(reference_cifar10())) == 332
    assert capsule_counts(reference_fmnist()) == [100, 36, 4]
    assert sum(capsule_counts(reference_fmnist())) == 140
    assert capsule_counts(original_capsnet()) == [2048]


def test_branch_output_size_chains_stem():
    cfg = reference_cifar10()
    assert branch_output_size(32, cfg.branches[0], cfg.stem) == 14
    assert branch_output_size(32, cfg.branches[2], cfg.stem) == 6
    assert branch_output_size((32, 32), cfg.branches[1], cfg.stem) == (10, 10)
    assert branch_output_size(17, BranchSpec(())) == 17


def test_invalid_config_names_layer():
    cfg = ArchConfig("bad", (1, 6, 6), 2, stem=(conv3x3(1, 2), conv3x3(2, 2), conv3x3(2, 2)),
                     branches=(BranchSpec((), n_classes=2),))
    with pytest.raises(DimensionError) as exc:
        validate(cfg)
    assert "stem" in str(exc.value)


def test_layer_spec_validation():
    with pytest.raises(ConfigError):
        LayerSpec("conv5x5", 1, 1)
    with pytest.raises(ConfigError):
        LayerSpec("conv3x3", 1, 1, kernel=5)
    with pytest.raises(ConfigError):
        ArchConfig("x", (1, 8, 8), 3, branches=(BranchSpec((), n_classes=2),))


def test_branch_channel_mismatch():
    cfg = ArchConfig("bad", (1, 8, 8), 2, stem=(conv3x3(1, 4),), branches=(BranchSpec((dwsep(3, 3),), n_classes=2),))
    with pytest.raises(DimensionError) as exc:
        validate(cfg)
    assert exc.value.axis == "channels"


def _tiny(branches=3, iterations=3, decoder=True, resquash=False):
    layers = [(), (dwsep(3, 3), bn(3), relu()), (dwsep(3, 3), bn(3), relu(), dwsep(3, 3), bn(3), relu())]
    return ArchConfig("tiny", (1, 9, 9), 3, stem=(conv3x3(1, 3), bn(3), relu()),
                      branches=tuple(BranchSpec(layers[i], caps_dim=4, n_classes=3, class_caps_dim=4,
                                                iterations=iterations) for i in range(branches)),
                      class_caps_dim=4, decoder_hidden=(6,), use_decoder=decoder, resquash=resquash)


def test_forward_shapes_and_input_contract():
    model = build_model(_tiny(), seed=0)
    caps, outs = model.forward(np.zeros((2, 1, 9, 9)))
    assert caps.shape == (2, 3, 4) and len(outs) == 3
    with pytest.raises(DimensionError):
        model.forward(np.zeros((2, 1, 8, 8)))


def test_average_is_elementwise_mean():
    model = build_model(_tiny(), seed=1)
    x = np.random.default_rng(0).uniform(size=(3, 1, 9, 9))
    caps, outs = model.forward(x)
    ref = np.zeros_like(caps)
    for n in range(3):
        for k in range(3):
            for d in range(4):
                ref[n, k, d] = (outs[0][n, k, d] + outs[1][n, k, d] + outs[2][n, k, d]) / 3.0
    np.testing.assert_allclose(caps, ref, rtol=1e-15, atol=0)


def test_identical_branches_average_to_themselves():
    cfg = _tiny(branches=1)
    cfg = ArchConfig("same", cfg.input_shape, 3, cfg.stem, cfg.branches * 3, class_caps_dim=4,
                     decoder_hidden=(6,))
    model = build_model(cfg, seed=2)
    first = dict(model.branches[0].named_parameters())
    for br in model.branches[1:]:
        for name, p in br.named_parameters():
            p.data[...] = first[name].data
    x = np.random.default_rng(1).uniform(size=(2, 1, 9, 9))
    caps, outs = model.forward(x)
    assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[0], outs[2])
    np.testing.assert_allclose(caps, outs[0], rtol=1e-15, atol=0)


def test_zeroed_branches_scale_average():
    model = build_model(_tiny(), seed=3)
    for br in model.branches[1:]:
        br.routing.weight.data[...] = 0.0
    x = np.random.default_rng(2).uniform(size=(4, 1, 9, 9))
    caps, outs = model.forward(x)
    assert not outs[1].any() and not outs[2].any()
    np.testing.assert_allclose(caps, outs[0] / 3.0, rtol=1e-15)
    np.testing.assert_array_equal(capsule_lengths(caps).argmax(1), capsule_lengths(outs[0]).argmax(1))


def test_single_branch_equals_plain_pipeline():
    cfg = _tiny(branches=1)
    model = build_model(cfg, seed=4)
    x = np.random.default_rng(3).uniform(size=(2, 1, 9, 9))
    caps, _ = model.forward(x)
    conv, bnl = model.stem.layers[0], model.stem.layers[1]
    h, _ = conv2d_forward(x, conv.weight.data, conv.bias.data)
    h = (h - bnl.running_mean[None, :, None, None]) / np.sqrt(bnl.running_var[None, :, None, None] + 1e-5)
    h = np.maximum(h * bnl.gamma.data[None, :, None, None] + bnl.beta.data[None, :, None, None], 0)
    cfc = model.branches[0].cfc.conv
    y, _ = conv2d_forward(h, cfc.weight.data, cfc.bias.data)
    u = squash(y.transpose(0, 2, 3, 1).reshape(2, -1, 4))
    w = model.branches[0].routing.weight.data
    uhat = np.einsum("ijdk,nik->nijd", w, u)
    b = np.zeros(uhat.shape[:3])
    for it in range(3):
        c = np.exp(b) / np.exp(b).sum(axis=2, keepdims=True)
        v = squash((c[..., None] * uhat).sum(axis=1))
        b = b + (uhat * v[:, None]).sum(axis=3)
    np.testing.assert_allclose(caps, v, rtol=1e-10, atol=1e-13)


def test_resquash_applies_after_average():
    cfg = _tiny(resquash=True)
    model = build_model(cfg, seed=5)
    x = np.random.default_rng(4).uniform(size=(2, 1, 9, 9))
    caps, outs = model.forward(x)
    np.testing.assert_allclose(caps, squash(sum(outs) / 3), rtol=1e-13)


def test_backward_without_forward():
    with pytest.raises(InvalidStateError):
        build_model(_tiny(), seed=0).backward(np.zeros((1, 3, 4)))


def _branch_loss_setup(seed):
    rng = np.random.default_rng(seed)
    cfg = ArchConfig("e2e", (2, 5, 5), 3, stem=(), class_caps_dim=3, use_decoder=False,
                     branches=(BranchSpec((conv3x3(2, 3), bn(3), relu()), cfc_kernel=2, caps_dim=3,
                                          n_classes=3, class_caps_dim=3, iterations=3),))
    model = build_model(cfg, seed=seed)
    x = rng.uniform(size=(3, 2, 5, 5))
    labels = rng.integers(0, 3, size=3)
    return model, x, labels


@pytest.mark.parametrize("seed", range(10))
def test_end_to_end_branch_gradient(seed):
    model, x, labels = _branch_loss_setup(seed)
    cfg = MarginLossConfig()
    buffers = {k: v.copy() for k, v in model.named_buffers()}

    def loss():
        for k, v in model.named_buffers():
            v[...] = buffers[k]
        caps, _ = model.forward(x, training=True)
        return margin_loss(caps, labels, cfg)[0]

    model.zero_grad()
    for k, v in model.named_buffers():
        v[...] = buffers[k]
    model.loss_and_grad(x, labels, cfg)
    for name, p in model.named_parameters():
        num = numeric_grad(loss, p.data)
        assert rel_error(p.grad, num) < 1e-3, name


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient_with_decoder(seed):
    model = build_model(_tiny(), seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(2, 1, 9, 9))
    labels = np.array([0, 2])
    buffers = {k: v.copy() for k, v in model.named_buffers()}

    def loss():
        for k, v in model.named_buffers():
            v[...] = buffers[k]
        model.zero_grad()
        return model.loss_and_grad(x, labels)[0]

    loss()
    grads = {n: p.grad.copy() for n, p in model.named_parameters()}
    # the deepest branch sits on many ReLU kinks; a 1e-3 step straddles some of them
    for name, p in model.named_parameters():
        assert rel_error(grads[name], numeric_grad(loss, p.data, eps=1e-5)) < 1e-3, name


def test_state_dict_roundtrip_and_mismatch():
    a, b = build_model(_tiny(), seed=0), build_model(_tiny(), seed=1)
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(0).uniform(size=(2, 1, 9, 9))
    np.testing.assert_array_equal(a.forward(x)[0], b.forward(x)[0])
    other = build_model(_tiny(branches=2), seed=0)
    with pytest.raises(CheckpointMismatchError):
        other.load_state_dict({k: v for k, v in a.state_dict().items() if not k.startswith("branch2")})


def test_parameter_names_are_unique_and_prefixed():
    model = build_model(reference_cifar10(), seed=0)
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert {n.split(".")[0] for n in names} == {"stem", "branch1", "branch2", "branch3", "decoder"}


def test_same_seed_same_weights():
    a, b = build_model(small_synthetic(), seed=7), build_model(small_synthetic(), seed=7)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


@pytest.mark.parametrize("cfg", random_configs(12, seed=11), ids=lambda c: str(c.input_shape))
def test_random_configs_forward_matches_static_shapes(cfg):
    model = build_model(cfg, seed=0)
    x = np.random.default_rng(0).uniform(size=(2,) + cfg.input_shape)
    caps, outs = model.forward(x, training=True, record=True)
    assert caps.shape == (2, cfg.n_classes, cfg.class_caps_dim)
    tape = GradTape()
    h = model.stem(x, tape, False)
    for br, expected in zip(model.branches, capsule_counts(cfg)):
        u = br.cfc(br.features(h, None, False), None, False)
        assert u.shape[1] == expected
    model.backward(np.ones_like(caps))
