"""Source pretraining and the three adaptation procedures.

All procedures share one loop contract: source and target batches are drawn
in lockstep from generators seeded by ``cfg.seed``, every step appends a
``StepRecord``, and a run is a pure function of (initial weights, data,
config). Target-domain samples are only ever read through ``.image``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .hsi_core import Domain, HsiCube, SamplePair
from .models import (
    DomainClassifier,
    FadaDiscriminator,
    GeneratorF,
    GeneratorG,
    SegNet,
    SegNetConfig,
    grl,
    load_checkpoint,
    save_checkpoint,
)


class Stage(str, Enum):
    PRETRAIN = "pretrain"
    GRL_DA = "grl_da"
    FADA = "fada"
    FADA_CYCLE = "fada_cycle"


@dataclass(frozen=True)
class LambdaSchedule:
    kind: str = "constant"  # "constant" | "ramp"
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "ramp"):
            raise ValueError(f"unknown lambda schedule {self.kind!r}")
        if self.value < 0:
            raise ValueError("lambda must be nonnegative")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "dice"  # "dice" | "cldice" | "bce"
    alpha: float = 0.5
    iterations: int = 10

    def __post_init__(self):
        if self.kind not in ("dice", "cldice", "bce"):
            raise ValueError(f"unknown segmentation loss {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class ReductionSpec:
    kind: str = "window"  # "window" | "learned_cnn" | "learned_1x1"
    windows: tuple[str, ...] = ("500:600",)
    out_channels: int = 1

    def __post_init__(self):
        if self.kind not in ("window", "learned_cnn", "learned_1x1"):
            raise ValueError(f"unknown reduction {self.kind!r}")
        object.__setattr__(self, "windows", tuple(self.windows))
        if self.kind == "window" and len(self.windows) not in (1, 3):
            raise ValueError("static reduction needs 1 or 3 windows")

    @property
    def learned(self) -> bool:
        return self.kind != "window"

    @property
    def channels(self) -> int:
        return len(self.windows) if self.kind == "window" else self.out_channels


@dataclass
class TrainConfig:
    stage: Stage = Stage.PRETRAIN
    lr_seg: float = 1e-3
    lr_disc: float = 1e-4
    lr_gen: float = 1e-3
    batch_size: int = 4
    steps: int = 200
    grl_lambda_schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    loss: LossSpec = field(default_factory=LossSpec)
    reduction: ReductionSpec = field(default_factory=ReductionSpec)
    cycle_weight: float = 1.0
    adv_weight: float = 0.1
    seed: int = 0
    pretrained_checkpoint: Optional[str] = None
    encoder_widths: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        self.stage = Stage(self.stage)
        for name in ("lr_seg", "lr_disc", "lr_gen"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cycle_weight < 0 or self.adv_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage is Stage.FADA_CYCLE and not self.reduction.learned:
            raise ValueError("fada_cycle requires a learned reduction")
        self.encoder_widths = tuple(self.encoder_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        d["reduction"]["windows"] = list(self.reduction.windows)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["grl_lambda_schedule"] = LambdaSchedule(**d.get("grl_lambda_schedule", {}))
        d["loss"] = LossSpec(**d.get("loss", {}))
        d["reduction"] = ReductionSpec(**d.get("reduction", {}))
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        for key, value in changes.items():
            d[key] = asdict(value) if hasattr(value, "__dataclass_fields__") else value
        return TrainConfig.from_dict(d)


@dataclass
class StepRecord:
    step: int
    seg_loss: float = 0.0
    disc_loss: float = 0.0
    adv_loss: float = 0.0
    cycle_loss: float = 0.0
    grl_lambda: float = 0.0
    cycle_target: float = 0.0
    cycle_source: float = 0.0
    stage: str = ""


@dataclass
class TrainResult:
    modules: dict[str, nn.Module]
    log: list[StepRecord]
    config: TrainConfig

    def save(self, checkpoint_path: Union[str, Path], steplog_path: Union[str, Path, None] = None) -> Path:
        path = save_checkpoint(checkpoint_path, self.modules, self.config.to_dict())
        if steplog_path is not None:
            write_steplog(self.log, steplog_path)
        return path


def write_steplog(log: Iterable[StepRecord], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in log:
            fh.write(json.dumps(asdict(rec)) + "\n")


def read_steplog(path: Union[str, Path]) -> list[StepRecord]:
    with Path(path).open() as fh:
        return [StepRecord(**json.loads(line)) for line in fh if line.strip()]


def lambda_at(schedule: LambdaSchedule, step: int, total_steps: int) -> float:
    if total_steps < 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if schedule.kind == "constant":
        return schedule.value
    progress = step / total_steps if total_steps > 0 else 1.0
    return schedule.value * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


# --------------------------------------------------------------------------
# data plumbing


def image_tensor(pairs: Sequence[SamplePair]) -> torch.Tensor:
    """Stack sample images to ``(N, channels, H, W)`` float32."""
    return torch.from_numpy(
        np.stack([np.transpose(p.image.data, (2, 0, 1)) for p in pairs]).astype(np.float32)
    )


def source_tensors(pairs: Sequence[SamplePair]) -> tuple[torch.Tensor, torch.Tensor]:
    for p in pairs:
        if p.domain is not Domain.SOURCE:
            raise ValueError(f"sample {p.id!r} is not a source sample")
    masks = torch.from_numpy(np.stack([p.mask.data for p in pairs]).astype(np.int64))
    return image_tensor(pairs), masks


def target_tensor(pairs: Sequence[SamplePair]) -> torch.Tensor:
    # only the image is read; target masks stay with the evaluation code
    return image_tensor(pairs)


def _generator(seed: int, stream: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, stream]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


class _Batches:
    def __init__(self, n: int, batch_size: int, gen: torch.Generator):
        if n < 1:
            raise ValueError("empty training set")
        self.n, self.batch_size, self.gen = n, batch_size, gen

    def next(self) -> torch.Tensor:
        return torch.randint(self.n, (self.batch_size,), generator=self.gen)


def seg_loss_fn(spec: LossSpec):
    if spec.kind == "dice":
        return lambda pred, gt: L.dice_loss(pred, gt, smooth=1.0)
    if spec.kind == "cldice":
        return lambda pred, gt: L.cldice_loss(pred, gt, spec.iterations, spec.alpha)
    return L.bce_seg_loss


def build_segnet(cfg: TrainConfig, in_channels: Optional[int] = None) -> SegNet:
    torch.manual_seed(cfg.seed)
    channels = in_channels or cfg.reduction.channels
    return SegNet(SegNetConfig(in_channels=channels, encoder_widths=list(cfg.encoder_widths)))


def load_pretrained(net: SegNet, cfg: TrainConfig) -> None:
    if cfg.pretrained_checkpoint:
        state, _ = load_checkpoint(cfg.pretrained_checkpoint)
        net.load_state_dict(state["seg"])


def _check_finite(rec: StepRecord) -> None:
    values = [v for v in asdict(rec).values() if isinstance(v, float)]
    if not all(math.isfinite(v) for v in values):
        raise FloatingPointError(f"non-finite loss at step {rec.step}: {rec}")


# --------------------------------------------------------------------------
# procedures


def pretrain(net: SegNet, source: Sequence[SamplePair], cfg: TrainConfig) -> TrainResult:
    """Supervised training of ``net`` on masked source samples."""
    xs, ms = source_tensors(source)
    seg_loss = seg_loss_fn(cfg.loss)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_seg)
    src = _Batches(len(xs), cfg.batch_size, _generator(cfg.seed, 0))
    log = []
    net.train()
    for step in range(cfg.steps):
        idx = src.next()
        probs, _ = net(xs[idx])
        loss = seg_loss(probs[:, 1], ms[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = StepRecord(step=step, seg_loss=loss.item())
        _check_finite(rec)
        log.append(rec)
    net.eval()
    return TrainResult({"seg": net}, log, cfg)


def train_grl_da(
    net: SegNet,
    domain_clf: DomainClassifier,
    source: Sequence[SamplePair],
    target: Sequence[SamplePair],
    cfg: TrainConfig,
) -> TrainResult:
    """Joint update of segmenter and global domain classifier through a GRL."""
    xs, ms = source_tensors(source)
    xt = target_tensor(target)
    seg_loss = seg_loss_fn(cfg.loss)
    opt = torch.optim.Adam(
        [
            {"params": net.parameters(), "lr": cfg.lr_seg},
            {"params": domain_clf.parameters(), "lr": cfg.lr_disc},
        ]
    )
    src = _Batches(len(xs), cfg.batch_size, _generator(cfg.seed, 0))
    tgt = _Batches(len(xt), cfg.batch_size, _generator(cfg.seed, 1))
    log = []
    net.train()
    domain_clf.train()
    for step in range(cfg.steps):
        lam = lambda_at(cfg.grl_lambda_schedule, step, cfg.steps)
        i_s, i_t = src.next(), tgt.next()
        probs_s, feat_s = net(xs[i_s])
        _, feat_t = net(xt[i_t])
        seg = seg_loss(probs_s[:, 1], ms[i_s])
        dom = 0.5 * (
            L.global_domain_loss(domain_clf(grl(feat_s, lam)), Domain.SOURCE)
            + L.global_domain_loss(domain_clf(grl(feat_t, lam)), Domain.TARGET)
        )
        opt.zero_grad()
        (seg + cfg.adv_weight * dom).backward()
        opt.step()
        rec = StepRecord(step=step, seg_loss=seg.item(), disc_loss=dom.item(), grl_lambda=lam)
        _check_finite(rec)
        log.append(rec)
    net.eval()
    domain_clf.eval()
    return TrainResult({"seg": net, "domain_clf": domain_clf}, log, cfg)


def fada_discriminator_step(
    disc: FadaDiscriminator,
    opt_d: torch.optim.Optimizer,
    feat_s: torch.Tensor,
    labels_s: torch.Tensor,
    feat_t: torch.Tensor,
    labels_t: torch.Tensor,
) -> torch.Tensor:
    """Discriminator update on detached features; returns the loss."""
    loss = 0.5 * (
        L.fada_discriminator_loss(disc(feat_s.detach()), labels_s, Domain.SOURCE)
        + L.fada_discriminator_loss(disc(feat_t.detach()), labels_t, Domain.TARGET)
    )
    opt_d.zero_grad()
    loss.backward()
    opt_d.step()
    return loss.detach()


def _fada_labels(probs_t, masks_s, feat_size, num_classes):
    labels_s = L.downsample_probs(L.one_hot_masks(masks_s, num_classes), feat_size)
    labels_t = L.pseudo_labels(probs_t, feat_size)
    return labels_s, labels_t


def _adversarial_term(disc, feat_t, labels_t):
    disc.requires_grad_(False)
    try:
        return L.fada_adversarial_loss(disc(feat_t), labels_t)
    finally:
        disc.requires_grad_(True)


def train_fada(
    net: SegNet,
    disc: FadaDiscriminator,
    source: Sequence[SamplePair],
    target: Sequence[SamplePair],
    cfg: TrainConfig,
) -> TrainResult:
    """Alternating fine-grained adversarial adaptation.

    Each step: (a) the discriminator learns to tell source-class-k from
    target-class-k features (source labels from ground truth, target labels
    from the segmenter's own soft predictions); (b) the segmenter minimizes
    the source segmentation loss plus ``adv_weight`` times the loss of target
    features being scored as source features of their class.
    """
    xs, ms = source_tensors(source)
    xt = target_tensor(target)
    seg_loss = seg_loss_fn(cfg.loss)
    k = net.config.num_classes
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_seg)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc)
    src = _Batches(len(xs), cfg.batch_size, _generator(cfg.seed, 0))
    tgt = _Batches(len(xt), cfg.batch_size, _generator(cfg.seed, 1))
    log = []
    net.train()
    disc.train()
    for step in range(cfg.steps):
        i_s, i_t = src.next(), tgt.next()
        probs_s, feat_s = net(xs[i_s])
        probs_t, feat_t = net(xt[i_t])
        labels_s, labels_t = _fada_labels(probs_t, ms[i_s], feat_s.shape[-2:], k)

        d_loss = fada_discriminator_step(disc, opt_d, feat_s, labels_s, feat_t, labels_t)

        seg = seg_loss(probs_s[:, 1], ms[i_s])
        adv = _adversarial_term(disc, feat_t, labels_t)
        opt.zero_grad()
        (seg + cfg.adv_weight * adv).backward()
        opt.step()
        rec = StepRecord(step=step, seg_loss=seg.item(), disc_loss=d_loss.item(), adv_loss=adv.item())
        _check_finite(rec)
        log.append(rec)
    net.eval()
    disc.eval()
    return TrainResult({"seg": net, "disc": disc}, log, cfg)


def train_fada_cycle(
    net: SegNet,
    disc: FadaDiscriminator,
    G: GeneratorG,
    F: GeneratorF,
    source: Sequence[SamplePair],
    target: Sequence[SamplePair],
    cfg: TrainConfig,
) -> TrainResult:
    """FADA with a learned cube-to-image reduction held in a reconstruction cycle.

    Target cubes x go through G into the segmenter and back through F
    (``|F(G(x)) - x|``); source images y go through F into cube space and
    back through G (``|G(F(y)) - y|``). Source images reach the segmenter
    unchanged.
    """
    if not cfg.reduction.learned:
        raise ValueError("train_fada_cycle requires a learned reduction")
    expected = "1x1" if cfg.reduction.kind == "learned_1x1" else "cnn"
    if G.variant != expected:
        raise ValueError(f"reduction {cfg.reduction.kind} needs a {expected} generator, got {G.variant}")
    for p in target:
        if not isinstance(p.image, HsiCube):
            raise ValueError(f"target sample {p.id!r} must carry a hyperspectral cube")
    xs, ms = source_tensors(source)
    xt = target_tensor(target)
    seg_loss = seg_loss_fn(cfg.loss)
    k = net.config.num_classes
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_seg)
    opt_g = torch.optim.Adam(list(G.parameters()) + list(F.parameters()), lr=cfg.lr_gen)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc)
    src = _Batches(len(xs), cfg.batch_size, _generator(cfg.seed, 0))
    tgt = _Batches(len(xt), cfg.batch_size, _generator(cfg.seed, 1))
    log = []
    for m in (net, disc, G, F):
        m.train()
    for step in range(cfg.steps):
        i_s, i_t = src.next(), tgt.next()
        cubes, ys = xt[i_t], xs[i_s]
        reduced_t = G(cubes)
        cyc_t = L.cycle_l1(F(reduced_t), cubes)
        cyc_s = L.cycle_l1(G(F(ys)), ys)

        probs_s, feat_s = net(ys)
        probs_t, feat_t = net(reduced_t)
        labels_s, labels_t = _fada_labels(probs_t, ms[i_s], feat_s.shape[-2:], k)
        d_loss = fada_discriminator_step(disc, opt_d, feat_s, labels_s, feat_t, labels_t)

        seg = seg_loss(probs_s[:, 1], ms[i_s])
        adv = _adversarial_term(disc, feat_t, labels_t)
        total = seg + cfg.adv_weight * adv + cfg.cycle_weight * (cyc_t + cyc_s)
        opt.zero_grad()
        opt_g.zero_grad()
        total.backward()
        opt.step()
        opt_g.step()
        rec = StepRecord(
            step=step,
            seg_loss=seg.item(),
            disc_loss=d_loss.item(),
            adv_loss=adv.item(),
            cycle_loss=(cyc_t + cyc_s).item(),
            cycle_target=cyc_t.item(),
            cycle_source=cyc_s.item(),
        )
        _check_finite(rec)
        log.append(rec)
    for m in (net, disc, G, F):
        m.eval()
    return TrainResult({"seg": net, "disc": disc, "G": G, "F": F}, log, cfg)


@torch.no_grad()
def predict_foreground(net: SegNet, images: torch.Tensor, G: Optional[GeneratorG] = None) -> np.ndarray:
    """Foreground probability maps ``(N, H, W)`` in inference mode."""
    net.eval()
    if G is not None:
        G.eval()
        images = G(images)
    probs, _ = net(images)
    return probs[:, 1].numpy()
