import math

import numpy as np
import pytest
import torch

from vesselda.hsi_core import SamplePair
from vesselda.models import DomainClassifier, FadaDiscriminator, GeneratorF, GeneratorG
from vesselda.spectral import WavelengthWindow, window_median
from vesselda.training import (
    LambdaSchedule,
    LossSpec,
    ReductionSpec,
    Stage,
    StepRecord,
    TrainConfig,
    build_segnet,
    fada_discriminator_step,
    image_tensor,
    lambda_at,
    predict_foreground,
    pretrain,
    read_steplog,
    source_tensors,
    train_fada,
    train_fada_cycle,
    train_grl_da,
    write_steplog,
)


def reduced(targets):
    return [t.with_image(window_median(t.image, WavelengthWindow(500, 600))) for t in targets]


def cfg(**kw):
    base = dict(steps=20, batch_size=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def state_copy(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


# --------------------------------------------------------------------------
# schedules and config


def test_lambda_constant_and_ramp():
    assert lambda_at(LambdaSchedule("constant", 0.3), 7, 10) == 0.3
    ramp = LambdaSchedule("ramp", 2.0)
    assert lambda_at(ramp, 0, 100) == 0.0
    assert lambda_at(ramp, 100, 100) == pytest.approx(2.0 * (2 / (1 + math.exp(-10)) - 1))
    assert lambda_at(ramp, 100, 100) == pytest.approx(0.9999 * 2.0, rel=1e-4)
    values = [lambda_at(ramp, s, 50) for s in range(51)]
    assert all(a < b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        lambda_at(ramp, 11, 10)
    with pytest.raises(ValueError):
        lambda_at(ramp, -1, 10)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_seg=0)
    with pytest.raises(ValueError):
        TrainConfig(adv_weight=-1)
    with pytest.raises(ValueError):
        TrainConfig(stage=Stage.FADA_CYCLE)
    with pytest.raises(ValueError):
        LossSpec(kind="focal")
    with pytest.raises(ValueError):
        ReductionSpec(kind="pca")
    TrainConfig(stage=Stage.FADA_CYCLE, reduction=ReductionSpec("learned_1x1"))


def test_config_roundtrip():
    c = TrainConfig(stage=Stage.FADA, loss=LossSpec("cldice", alpha=0.3),
                    grl_lambda_schedule=LambdaSchedule("ramp", 0.5),
                    reduction=ReductionSpec(windows=("600:1000", "500:600", "400:500"), out_channels=3))
    assert TrainConfig.from_dict(c.to_dict()) == c
    r = c.replace(lr_seg=5e-4, loss=LossSpec("bce"))
    assert r.lr_seg == 5e-4 and r.loss.kind == "bce" and r.stage is Stage.FADA


def test_steplog_roundtrip(tmp_path):
    log = [StepRecord(step=i, seg_loss=0.1 * i, grl_lambda=0.5, stage="fada") for i in range(3)]
    write_steplog(log, tmp_path / "log.ndjson")
    assert read_steplog(tmp_path / "log.ndjson") == log


# --------------------------------------------------------------------------
# pretraining


def test_zero_steps_leaves_initialization(tiny_data):
    sources, _ = tiny_data
    c = cfg(steps=0)
    net = build_segnet(c)
    before = state_copy(net)
    res = pretrain(net, sources, c)
    assert res.log == []
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_pretrain_deterministic(tiny_data):
    sources, _ = tiny_data
    c = cfg(steps=8)
    a = pretrain(build_segnet(c), sources, c).log
    b = pretrain(build_segnet(c), sources, c).log
    assert a == b


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pretrain_reduces_loss_on_fixed_batch(tiny_data, seed):
    sources, _ = tiny_data
    c = cfg(steps=200, batch_size=4, seed=seed)
    net = build_segnet(c)
    xs, ms = source_tensors(sources[:4])

    def loss():
        net.eval()
        with torch.no_grad():
            probs, _ = net(xs)
        from vesselda.losses import dice_loss

        return dice_loss(probs[:, 1], ms).item()

    before = loss()
    pretrain(net, sources, c)
    assert loss() < before


# --------------------------------------------------------------------------
# adversarial stages


def test_target_masks_never_read(tiny_data, monkeypatch):
    sources, targets = tiny_data
    assert all(t.has_annotation for t in targets)

    def forbidden(self):
        raise AssertionError("training read a target annotation")

    monkeypatch.setattr(SamplePair, "annotation", forbidden)
    c = cfg(steps=3, stage=Stage.FADA)
    net = build_segnet(c)
    train_fada(net, FadaDiscriminator(64), sources, reduced(targets), c)
    train_grl_da(net, DomainClassifier(64), sources, reduced(targets), c.replace(stage=Stage.GRL_DA))


def test_discriminator_step_isolated_from_encoder(tiny_data):
    sources, targets = tiny_data
    c = cfg()
    net = build_segnet(c)
    disc = FadaDiscriminator(64)
    xs, ms = source_tensors(sources[:2])
    xt = image_tensor(reduced(targets)[:2])
    probs_s, feat_s = net(xs)
    probs_t, feat_t = net(xt)
    from vesselda.training import _fada_labels

    labels_s, labels_t = _fada_labels(probs_t, ms, feat_s.shape[-2:], 2)
    net.zero_grad()
    opt_d = torch.optim.Adam(disc.parameters(), lr=1e-3)
    before = state_copy(disc)
    fada_discriminator_step(disc, opt_d, feat_s, labels_s, feat_t, labels_t)
    for name, p in net.named_parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0, name
    assert any(not torch.equal(v, before[k]) for k, v in disc.state_dict().items())


def test_discriminator_learns_with_frozen_encoder(tiny_data):
    sources, targets = tiny_data
    c = cfg(steps=150, batch_size=4)
    net = build_segnet(c)
    pretrain(net, sources, c)
    net.eval()
    disc = FadaDiscriminator(64)
    opt_d = torch.optim.Adam(disc.parameters(), lr=1e-3)
    xs, ms = source_tensors(sources)
    xt = image_tensor(reduced(targets))
    from vesselda.training import _fada_labels

    with torch.no_grad():
        _, feat_s = net(xs)
        probs_t, feat_t = net(xt)
    labels_s, labels_t = _fada_labels(probs_t, ms, feat_s.shape[-2:], 2)
    losses = [fada_discriminator_step(disc, opt_d, feat_s, labels_s, feat_t, labels_t).item()
              for _ in range(200)]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


@pytest.mark.parametrize("stage", [Stage.FADA, Stage.GRL_DA])
def test_zero_adv_weight_matches_pretrain_continuation(tiny_data, stage):
    sources, targets = tiny_data
    c = cfg(steps=15, adv_weight=0.0, stage=stage)
    ref = pretrain(build_segnet(c), sources, c.replace(stage=Stage.PRETRAIN)).log
    net = build_segnet(c)
    if stage is Stage.FADA:
        res = train_fada(net, FadaDiscriminator(64), sources, reduced(targets), c)
    else:
        res = train_grl_da(net, DomainClassifier(64), sources, reduced(targets), c)
    assert [r.seg_loss for r in res.log] == [r.seg_loss for r in ref]


def test_grl_records_ramp(tiny_data):
    sources, targets = tiny_data
    c = cfg(steps=10, stage=Stage.GRL_DA, grl_lambda_schedule=LambdaSchedule("ramp", 1.0))
    res = train_grl_da(build_segnet(c), DomainClassifier(64), sources, reduced(targets), c)
    lams = [r.grl_lambda for r in res.log]
    assert lams[0] == 0.0 and lams == sorted(lams)
    assert all(r.disc_loss > 0 for r in res.log)


def test_fada_deterministic(tiny_data):
    sources, targets = tiny_data
    c = cfg(steps=6, stage=Stage.FADA)
    runs = []
    for _ in range(2):
        net = build_segnet(c)
        torch.manual_seed(99)
        runs.append(train_fada(net, FadaDiscriminator(64), sources, reduced(targets), c).log)
    assert runs[0] == runs[1]


# --------------------------------------------------------------------------
# cycle stage


def _cycle_modules(c, bands):
    net = build_segnet(c)
    variant = "1x1" if c.reduction.kind == "learned_1x1" else "cnn"
    return net, FadaDiscriminator(64), GeneratorG(bands, 1, variant), GeneratorF(bands, 1)


def test_cycle_validation(tiny_data):
    sources, targets = tiny_data
    bands = targets[0].image.bands
    c = cfg(stage=Stage.FADA_CYCLE, reduction=ReductionSpec("learned_1x1"))
    net, disc, _, F = _cycle_modules(c, bands)
    with pytest.raises(ValueError):
        train_fada_cycle(net, disc, GeneratorG(bands, 1, "cnn"), F, sources, targets, c)
    with pytest.raises(ValueError):
        train_fada_cycle(net, disc, GeneratorG(bands, 1, "1x1"), F, sources, reduced(targets), c)


def test_cycle_weight_zero_still_trains_adapter(tiny_data):
    sources, targets = tiny_data
    c = cfg(steps=5, stage=Stage.FADA_CYCLE, reduction=ReductionSpec("learned_1x1"), cycle_weight=0.0)
    net, disc, G, F = _cycle_modules(c, targets[0].image.bands)
    g_before, f_before = state_copy(G), state_copy(F)
    res = train_fada_cycle(net, disc, G, F, sources, targets, c)
    assert all(r.cycle_loss > 0 for r in res.log)  # recorded, not optimized
    assert any(not torch.equal(v, g_before[k]) for k, v in G.state_dict().items())
    # F only enters through the cycle terms
    assert all(torch.equal(v, f_before[k]) for k, v in F.state_dict().items())


def test_cycle_1x1_generator_stays_pointwise(tiny_data):
    sources, targets = tiny_data
    c = cfg(steps=5, stage=Stage.FADA_CYCLE, reduction=ReductionSpec("learned_1x1"))
    net, disc, G, F = _cycle_modules(c, targets[0].image.bands)
    train_fada_cycle(net, disc, G, F, sources, targets, c)
    cube = image_tensor(targets[:1])
    w, b = G.net.weight.detach().view(-1), G.net.bias.detach()
    with torch.no_grad():
        manual = torch.sigmoid(torch.einsum("c,bchw->bhw", w, cube) + b)
        torch.testing.assert_close(G(cube)[:, 0], manual)


def test_cycle_losses_decrease(tiny_data):
    sources, targets = tiny_data
    c = cfg(steps=120, batch_size=4, stage=Stage.FADA_CYCLE, reduction=ReductionSpec("learned_1x1"))
    net, disc, G, F = _cycle_modules(c, targets[0].image.bands)
    log = train_fada_cycle(net, disc, G, F, sources, targets, c).log
    for field in ("cycle_target", "cycle_source"):
        first = np.mean([getattr(r, field) for r in log[:10]])
        last = np.mean([getattr(r, field) for r in log[-10:]])
        assert last < first, field


def test_predict_foreground_shape(tiny_data):
    sources, _ = tiny_data
    c = cfg()
    net = build_segnet(c)
    out = predict_foreground(net, image_tensor(sources[:3]))
    assert out.shape == (3, 32, 32)
    assert np.all((out >= 0) & (out <= 1))


@pytest.mark.slow
def test_losses_finite_over_long_runs(tiny_data):
    sources, targets = tiny_data
    c = cfg(steps=1000, batch_size=2, stage=Stage.FADA)
    net = build_segnet(c)
    res = train_fada(net, FadaDiscriminator(64), sources, reduced(targets), c)
    assert len(res.log) == 1000
    c = c.replace(stage=Stage.GRL_DA)
    res = train_grl_da(build_segnet(c), DomainClassifier(64), sources, reduced(targets), c)
    assert all(math.isfinite(r.seg_loss) and math.isfinite(r.disc_loss) for r in res.log)


def _windowed_pairs(offset, n):
    from vesselda.hsi_core import Domain, make_source_phantom, make_target_phantom

    from conftest import small_spec

    sources, targets = [], []
    for i in range(n):
        img, mask = make_source_phantom(small_spec(seed=offset + i))
        sources.append(SamplePair.create(img, Domain.SOURCE, f"s{i}", mask=mask))
        cube, _ = make_target_phantom(small_spec(seed=offset + 50 + i))
        targets.append(SamplePair.create(window_median(cube, WavelengthWindow(500, 600)), Domain.TARGET, f"t{i}"))
    return sources, targets


@pytest.mark.slow
def test_grl_pushes_domain_probe_toward_chance():
    from vesselda import losses as L
    from vesselda.hsi_core import Domain

    sources, targets = _windowed_pairs(0, 16)
    held_s, held_t = _windowed_pairs(1000, 16)

    def probe_accuracy(net, clf):
        net.eval()
        clf.eval()
        with torch.no_grad():
            fs, ft = net(image_tensor(held_s))[1], net(image_tensor(held_t))[1]
            return 0.5 * ((clf(fs) < 0).float().mean() + (clf(ft) > 0).float().mean()).item()

    warm, before, after = [], [], []
    for seed in range(3):
        c = cfg(steps=150, batch_size=4, seed=seed)
        net = build_segnet(c)
        pretrain(net, sources, c)
        torch.manual_seed(seed)
        clf = DomainClassifier(64)
        opt = torch.optim.Adam(clf.parameters(), lr=1e-3)
        net.eval()
        with torch.no_grad():
            fs, ft = net(image_tensor(sources))[1], net(image_tensor(targets))[1]
        clf.train()
        for _ in range(500):  # warm-up with the encoder frozen
            loss = 0.5 * (L.global_domain_loss(clf(fs), Domain.SOURCE) + L.global_domain_loss(clf(ft), Domain.TARGET))
            opt.zero_grad()
            loss.backward()
            opt.step()
        a0 = probe_accuracy(net, clf)
        g = c.replace(stage=Stage.GRL_DA, steps=200, adv_weight=1.0, lr_disc=1e-3)
        train_grl_da(net, clf, sources, targets, g)
        warm.append(a0)
        before.append(abs(a0 - 0.5))
        after.append(abs(probe_accuracy(net, clf) - 0.5))
    assert np.median(warm) >= 0.9
    assert all(b < a for a, b in zip(before, after))
