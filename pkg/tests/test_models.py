import pytest
import torch

from vesselda.models import (
    DomainClassifier,
    FadaDiscriminator,
    GeneratorF,
    GeneratorG,
    SegNet,
    SegNetConfig,
    count_parameters,
    grl,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# --------------------------------------------------------------------------
# gradient reversal


def test_grl_forward_identity():
    x = torch.randn(2, 3, 4, 4)
    assert torch.equal(grl(x, 0.7), x)


def test_grl_scales_gradient():
    x = torch.tensor([1.0, 1.0], requires_grad=True)
    grl(x, 0.5).backward(torch.tensor([2.0, -4.0]))
    assert x.grad.tolist() == [-1.0, 2.0]

    x = torch.randn(5, requires_grad=True)
    g = torch.randn(5)
    grl(x, 1.0).backward(g)
    assert torch.equal(x.grad, -g)


def test_grl_rejects_negative_lambda():
    with pytest.raises(ValueError):
        grl(torch.zeros(1), -0.1)


# --------------------------------------------------------------------------
# segmentation network


@pytest.mark.parametrize("in_ch", [1, 3])
def test_segnet_shapes_and_softmax(in_ch):
    net = SegNet(SegNetConfig(in_channels=in_ch)).eval()
    probs, feats = net(torch.rand(2, in_ch, 32, 48))
    assert probs.shape == (2, 2, 32, 48)
    assert feats.shape == (2, 64, 4, 6)
    torch.testing.assert_close(probs.sum(1), torch.ones(2, 32, 48), atol=1e-5, rtol=0)


def test_segnet_batch_independence_in_eval():
    net = SegNet().eval()
    x = torch.rand(1, 1, 32, 32)
    with torch.no_grad():
        single, _ = net(x)
        double, _ = net(torch.cat([x, x]))
    assert double.shape[0] == 2
    torch.testing.assert_close(double[0], single[0])
    torch.testing.assert_close(double[1], single[0])


def test_segnet_deterministic_inference():
    net = SegNet().eval()
    x = torch.rand(3, 1, 16, 16)
    with torch.no_grad():
        assert torch.equal(net(x)[0], net(x)[0])


def test_segnet_validation():
    net = SegNet()
    with pytest.raises(ValueError):
        net(torch.rand(1, 3, 32, 32))
    with pytest.raises(ValueError):
        net(torch.rand(1, 1, 30, 32))
    with pytest.raises(ValueError):
        SegNetConfig(encoder_widths=[8, 16])
    with pytest.raises(ValueError):
        SegNetConfig(in_channels=2)


def test_segnet_parameter_budget():
    assert count_parameters(SegNet(SegNetConfig(in_channels=3))) < 2_000_000


# --------------------------------------------------------------------------
# discriminators


def test_domain_classifier_per_sample():
    clf = DomainClassifier(16)
    f = torch.randn(5, 16, 4, 4)
    logits = clf(f)
    assert logits.shape == (5,)
    perm = torch.tensor([3, 0, 4, 1, 2])
    torch.testing.assert_close(clf(f[perm]), logits[perm])


def test_domain_classifier_finite_fuzz():
    clf = DomainClassifier(8)
    for seed in range(100):
        g = torch.Generator().manual_seed(seed)
        f = torch.randn(2, 8, 3, 3, generator=g) * (1 + seed)
        assert torch.isfinite(clf(f)).all()


def test_fada_discriminator_layout():
    disc = FadaDiscriminator(16, num_classes=2)
    out = disc(torch.randn(3, 16, 5, 7))
    assert out.shape == (3, 4, 5, 7)
    torch.testing.assert_close(out.softmax(1).sum(1), torch.ones(3, 5, 7))


# --------------------------------------------------------------------------
# generators


def test_generator_1x1_is_pointwise():
    G = GeneratorG(20, variant="1x1")
    x = torch.rand(1, 20, 9, 9)
    y = x.clone()
    y[0, :, 8, 8] += 5.0
    out_x, out_y = G(x), G(y)
    assert out_x.shape == (1, 1, 9, 9)
    assert torch.equal(out_x[..., :8, :], out_y[..., :8, :])
    assert not torch.equal(out_x[..., 8, 8], out_y[..., 8, 8])
    # equals the spectral dot product at each pixel
    w, b = G.net.weight.view(-1), G.net.bias
    manual = torch.sigmoid(torch.einsum("c,bchw->bhw", w, x) + b)
    torch.testing.assert_close(out_x[:, 0], manual)


def test_generator_cnn_has_spatial_context():
    G = GeneratorG(20, variant="cnn")
    x = torch.rand(1, 20, 9, 9)
    y = x.clone()
    y[0, :, 4, 5] += 5.0  # neighbour of (4, 4)
    assert not torch.equal(G(x)[..., 4, 4], G(y)[..., 4, 4])
    assert G(x).min() >= 0 and G(x).max() <= 1


def test_generator_f_shapes_and_cycle_wiring():
    G, F = GeneratorG(12, 1, "1x1"), GeneratorF(12, 1)
    y = torch.rand(2, 1, 8, 8)
    cube = F(y)
    assert cube.shape == (2, 12, 8, 8)
    assert torch.isfinite(cube).all()
    assert G(cube).shape == y.shape
    with pytest.raises(ValueError):
        G(torch.rand(1, 11, 8, 8))
    with pytest.raises(ValueError):
        GeneratorG(12, variant="resnet")


def test_generator_f_finite_fuzz():
    F = GeneratorF(10, 3)
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        assert torch.isfinite(F(torch.randn(1, 3, 6, 6, generator=g) * 10)).all()


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    net, disc = SegNet(), FadaDiscriminator(64)
    path = save_checkpoint(tmp_path / "ck.pt", {"seg": net, "disc": disc}, {"trial": {"index": 3}})
    weights, config = load_checkpoint(path)
    assert config == {"trial": {"index": 3}}
    fresh = SegNet()
    fresh.load_state_dict(weights["seg"])
    for (k, a), (_, b) in zip(net.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(a, b), k
    assert set(weights) == {"seg", "disc"}
