"""Cross-testing protocol, approach catalog and result tables.

Training is injected: ``run_cross_test`` only needs a ``trainer`` callable
returning something that maps a target sample to a foreground probability
map, so the protocol arithmetic can be exercised with cheap stubs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np
import torch

from . import losses as L
from .hsi_core import ChannelMeaning, HsiCube, ReducedImage, SamplePair
from .models import FadaDiscriminator, DomainClassifier, GeneratorF, GeneratorG, SegNet, SegNetConfig, load_checkpoint
from .spectral import WavelengthWindow, reduce_cube
from .training import (
    LambdaSchedule,
    LossSpec,
    ReductionSpec,
    Stage,
    StepRecord,
    TrainConfig,
    build_segnet,
    load_pretrained,
    pretrain,
    read_steplog,
    save_checkpoint,
    train_fada,
    train_fada_cycle,
    train_grl_da,
    write_steplog,
)


def derive_seed(*values: int) -> int:
    """Deterministic 31-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(v) for v in values]).generate_state(1)[0] & 0x7FFFFFFF)


# --------------------------------------------------------------------------
# approaches


@dataclass(frozen=True)
class Approach:
    id: str
    title: str
    number: Optional[int] = None  # 1-9; None for baselines
    pretrain: Optional[TrainConfig] = None
    adapt: Optional[TrainConfig] = None
    members: tuple[str, ...] = ()  # ensemble member ids

    @property
    def is_ensemble(self) -> bool:
        return bool(self.members)

    @property
    def reduction(self) -> ReductionSpec:
        return (self.adapt or self.pretrain).reduction


def approach_catalog(pretrain_steps: int = 300, adapt_steps: int = 300) -> list[Approach]:
    """Both baselines and the nine FADA variants.

    Baselines and the no-pretraining variant get ``pretrain_steps +
    adapt_steps`` steps so every approach has the same optimization budget.
    """
    total = pretrain_steps + adapt_steps

    def window(*windows):
        return ReductionSpec("window", windows)

    def pre(red):
        return TrainConfig(stage=Stage.PRETRAIN, steps=pretrain_steps, reduction=red)

    def fada(red, **kw):
        return TrainConfig(stage=Stage.FADA, steps=adapt_steps, reduction=red, **kw)

    gray = window("500:600")
    rgb = window("600:1000", "500:600", "400:500")
    blue, red = window("400:500"), window("600:800")
    cyc_cnn = ReductionSpec("learned_cnn", out_channels=1)
    cyc_1x1 = ReductionSpec("learned_1x1", out_channels=1)
    return [
        Approach("baseline-gray", "Baseline Grayscale",
                 pretrain=TrainConfig(stage=Stage.PRETRAIN, steps=total, reduction=gray)),
        Approach("baseline-3ch", "Baseline 3-Channel-Windowing",
                 pretrain=TrainConfig(stage=Stage.PRETRAIN, steps=total, reduction=rgb)),
        Approach("fada-gray-500to600", "FADA-Grayscale-Windowing-500to600", 1,
                 pretrain=pre(gray), adapt=fada(gray)),
        Approach("fada-gray-500to600-nopretrain", "FADA-Grayscale-Windowing-500to600-NoPretraining", 2,
                 adapt=TrainConfig(stage=Stage.FADA, steps=total, reduction=gray)),
        Approach("fada-3ch-windowing", "FADA-3Channel-Windowing", 3,
                 pretrain=pre(rgb), adapt=fada(rgb)),
        Approach("fada-gray-400to500", "FADA-Grayscale-Windowing-400to500", 4,
                 pretrain=pre(blue), adapt=fada(blue)),
        Approach("fada-gray-600to800", "FADA-Grayscale-Windowing-600to800", 5,
                 pretrain=pre(red), adapt=fada(red)),
        Approach("fada-ensemble", "FADA-Ensemble", 6,
                 members=("fada-gray-400to500", "fada-gray-500to600", "fada-gray-600to800")),
        Approach("fada-gray-500to600-cldice", "FADA-Grayscale-Windowing-500to600-CLDice", 7,
                 pretrain=pre(gray), adapt=fada(gray, loss=LossSpec("cldice", alpha=0.5))),
        Approach("fada-gray-cyclegan-cnn", "FADA-Grayscale-CycleGAN-CNN", 8,
                 pretrain=pre(gray), adapt=TrainConfig(stage=Stage.FADA_CYCLE, steps=adapt_steps, reduction=cyc_cnn)),
        Approach("fada-gray-cyclegan-1x1", "FADA-Grayscale-CycleGAN-1x1Conv", 9,
                 pretrain=pre(gray), adapt=TrainConfig(stage=Stage.FADA_CYCLE, steps=adapt_steps, reduction=cyc_1x1)),
    ]


def get_approach(approach_id: str, **catalog_kw) -> Approach:
    for a in approach_catalog(**catalog_kw):
        if a.id == approach_id:
            return a
    known = ", ".join(a.id for a in approach_catalog())
    raise KeyError(f"unknown approach {approach_id!r}; known: {known}")


# --------------------------------------------------------------------------
# hyperparameters


@dataclass(frozen=True)
class LogUniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 < self.lo < self.hi:
            raise ValueError(f"empty log-uniform range [{self.lo}, {self.hi}]")

    def sample(self, rng: np.random.Generator) -> float:
        return float(math.exp(rng.uniform(math.log(self.lo), math.log(self.hi))))

    def contains(self, x) -> bool:
        return self.lo <= x <= self.hi


@dataclass(frozen=True)
class Choice:
    options: tuple

    def __post_init__(self):
        if len(self.options) == 0:
            raise ValueError("empty categorical range")

    def sample(self, rng: np.random.Generator):
        return self.options[int(rng.integers(len(self.options)))]

    def contains(self, x) -> bool:
        return x in self.options


def default_space_params() -> dict:
    return {
        "lr_seg": LogUniform(3e-4, 3e-3),
        "lr_disc": LogUniform(3e-5, 1e-3),
        "lr_gen": LogUniform(3e-4, 3e-3),
        "adv_weight": Choice((0.05, 0.1, 0.3)),
        "cycle_weight": Choice((0.5, 1.0, 2.0)),
        "grl_lambda_schedule": Choice((("constant", 1.0), ("ramp", 1.0))),
    }


@dataclass(frozen=True)
class HyperparamSpace:
    params: dict = field(default_factory=default_space_params)
    seed: int = 0


@dataclass(frozen=True)
class TrialConfig:
    index: int
    seed: int
    params: dict

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        changes = dict(self.params)
        if "grl_lambda_schedule" in changes:
            kind, value = changes["grl_lambda_schedule"]
            changes["grl_lambda_schedule"] = LambdaSchedule(kind, value)
        changes["seed"] = self.seed
        return cfg.replace(**changes)

    def to_dict(self) -> dict:
        return {"index": self.index, "seed": self.seed, "params": self.params}


def sample_trials(space: HyperparamSpace, n: int, prefix: Sequence[int] = ()) -> list[TrialConfig]:
    """``n`` deterministic draws; trial i is seeded by (space.seed, *prefix, i)."""
    if n < 1:
        raise ValueError("need at least one trial")
    rng = np.random.default_rng([space.seed, *prefix])
    trials = []
    for i in range(n):
        params = {name: dist.sample(rng) for name, dist in space.params.items()}
        trials.append(TrialConfig(i, derive_seed(space.seed, *prefix, i), params))
    return trials


# --------------------------------------------------------------------------
# trained approaches


def as_channels(image: ReducedImage, k: int) -> ReducedImage:
    """Replicate a grayscale image to RGB when a 3-channel network needs it."""
    if image.channels == k:
        return image
    if image.channels == 1 and k == 3:
        return ReducedImage(np.repeat(image.data, 3, axis=2), ChannelMeaning.RGB)
    raise ValueError(f"cannot convert {image.channels} channels to {k}")


@dataclass
class TrainedMember:
    reduction: ReductionSpec
    net: SegNet
    G: Optional[GeneratorG] = None

    def input_for(self, cube: HsiCube) -> torch.Tensor:
        if self.reduction.learned:
            return torch.from_numpy(np.transpose(cube.data, (2, 0, 1))[None].astype(np.float32))
        windows = [WavelengthWindow.parse(w) for w in self.reduction.windows]
        img = reduce_cube(cube, windows)
        return torch.from_numpy(np.transpose(img.data, (2, 0, 1))[None].astype(np.float32))

    @torch.no_grad()
    def predict(self, cube: HsiCube) -> np.ndarray:
        self.net.eval()
        x = self.input_for(cube)
        if self.G is not None:
            self.G.eval()
            x = self.G(x)
        probs, _ = self.net(x)
        return probs[0, 1].numpy()


@dataclass
class TrainedApproach:
    approach_id: str
    members: dict[str, TrainedMember]
    log: list[StepRecord] = field(default_factory=list)

    def predict(self, sample: SamplePair) -> np.ndarray:
        """Foreground probability map for a target sample carrying a cube."""
        maps = [m.predict(sample.image) for m in self.members.values()]
        return maps[0] if len(maps) == 1 else np.mean(maps, axis=0)

    def predict_mask(self, sample: SamplePair) -> np.ndarray:
        maps = [m.predict(sample.image) for m in self.members.values()]
        if len(maps) == 1:
            return (maps[0] >= 0.5).astype(np.uint8)
        return L.ensemble_average(maps)

    def save(self, path: Union[str, Path], config: dict) -> Path:
        modules = {}
        for name, m in self.members.items():
            modules[f"{name}/seg"] = m.net
            if m.G is not None:
                modules[f"{name}/G"] = m.G
        return save_checkpoint(path, modules, config)


def load_trained_approach(path: Union[str, Path]) -> TrainedApproach:
    state, config = load_checkpoint(path)
    members = {}
    for mconf in config["members"]:
        name = mconf["name"]
        reduction = ReductionSpec(**{**mconf["reduction"], "windows": tuple(mconf["reduction"]["windows"])})
        net = SegNet(SegNetConfig(**mconf["segnet"]))
        net.load_state_dict(state[f"{name}/seg"])
        G = None
        if f"{name}/G" in state:
            G = GeneratorG(mconf["bands"], reduction.out_channels,
                           "1x1" if reduction.kind == "learned_1x1" else "cnn")
            G.load_state_dict(state[f"{name}/G"])
        members[name] = TrainedMember(reduction, net, G)
    return TrainedApproach(config["approach"], members)


def _train_member(
    approach: Approach,
    sources: Sequence[SamplePair],
    targets: Sequence[SamplePair],
    trial: Optional[TrialConfig],
    seed: int,
) -> tuple[TrainedMember, list[StepRecord], dict]:
    def configure(cfg):
        cfg = trial.apply(cfg) if trial is not None else cfg.replace(seed=seed)
        return cfg

    red = approach.reduction
    k = red.channels
    src = [s.with_image(as_channels(s.image, k)) for s in sources]
    if red.learned:
        tgt = list(targets)
    else:
        windows = [WavelengthWindow.parse(w) for w in red.windows]
        tgt = [t.with_image(reduce_cube(t.image, windows)) for t in targets]

    pre_cfg = configure(approach.pretrain) if approach.pretrain else None
    ada_cfg = configure(approach.adapt) if approach.adapt else None
    net = build_segnet(pre_cfg or ada_cfg, in_channels=k)
    log: list[StepRecord] = []
    if pre_cfg is not None:
        log += [_tag(r, "pretrain") for r in pretrain(net, src, pre_cfg).log]
    elif ada_cfg.pretrained_checkpoint:
        load_pretrained(net, ada_cfg)

    G = None
    bands = targets[0].image.bands if isinstance(targets[0].image, HsiCube) else None
    if ada_cfg is not None:
        width = net.config.encoder_widths[-1]
        torch.manual_seed(derive_seed(ada_cfg.seed, 1))
        if ada_cfg.stage is Stage.FADA:
            disc = FadaDiscriminator(width, net.config.num_classes)
            res = train_fada(net, disc, src, tgt, ada_cfg)
        elif ada_cfg.stage is Stage.GRL_DA:
            res = train_grl_da(net, DomainClassifier(width), src, tgt, ada_cfg)
        elif ada_cfg.stage is Stage.FADA_CYCLE:
            disc = FadaDiscriminator(width, net.config.num_classes)
            variant = "1x1" if red.kind == "learned_1x1" else "cnn"
            G = GeneratorG(bands, red.out_channels, variant)
            F = GeneratorF(bands, red.out_channels)
            res = train_fada_cycle(net, disc, G, F, src, tgt, ada_cfg)
        else:
            raise ValueError(f"stage {ada_cfg.stage} is not an adaptation stage")
        log += [_tag(r, ada_cfg.stage.value) for r in res.log]
    net.eval()
    meta = {
        "name": approach.id,
        "reduction": {**asdict(red), "windows": list(red.windows)},
        "segnet": asdict(net.config),
        "bands": bands,
        "pretrain": pre_cfg.to_dict() if pre_cfg else None,
        "adapt": ada_cfg.to_dict() if ada_cfg else None,
    }
    return TrainedMember(red, net, G), log, meta


def _tag(rec: StepRecord, stage: str) -> StepRecord:
    rec.stage = stage
    return rec


def train_approach(
    approach: Approach,
    sources: Sequence[SamplePair],
    targets: Sequence[SamplePair],
    trial: Optional[TrialConfig] = None,
    seed: int = 0,
    catalog: Optional[dict[str, Approach]] = None,
) -> tuple[TrainedApproach, dict]:
    """Train every network an approach needs; target masks are dropped first."""
    targets = [t.without_mask() if t.has_annotation else t for t in targets]
    if not targets:
        raise ValueError("no unlabeled target samples to adapt on")
    catalog = catalog or {a.id: a for a in approach_catalog()}
    member_approaches = [catalog[m] for m in approach.members] if approach.is_ensemble else [approach]
    members, log, metas = {}, [], []
    for member in member_approaches:
        trained, member_log, meta = _train_member(member, sources, targets, trial, seed)
        members[member.id] = trained
        log += member_log
        metas.append(meta)
    config = {
        "approach": approach.id,
        "trial": trial.to_dict() if trial else None,
        "seed": seed,
        "members": metas,
    }
    return TrainedApproach(approach.id, members, log), config


class Predictor(Protocol):
    def predict(self, sample: SamplePair) -> np.ndarray: ...


Trainer = Callable[[Approach, TrialConfig, Sequence[SamplePair], Sequence[SamplePair], Optional[Path]], Predictor]


class TorchTrainer:
    """Default trainer; persists each trial and reuses finished ones.

    Layout per trial: ``<run_dir>/config.json``, ``checkpoint.pt``,
    ``steplog.ndjson``.
    """

    def __init__(self, pretrain_steps: int = 300, adapt_steps: int = 300):
        self.catalog = {a.id: a for a in approach_catalog(pretrain_steps, adapt_steps)}

    def __call__(self, approach, trial, sources, targets, run_dir=None):
        approach = self.catalog[approach.id]
        if run_dir is not None:
            ckpt = Path(run_dir) / "checkpoint.pt"
            if ckpt.is_file() and (Path(run_dir) / "config.json").is_file():
                saved = json.loads((Path(run_dir) / "config.json").read_text())
                if saved.get("trial") == json.loads(json.dumps(trial.to_dict())):
                    model = load_trained_approach(ckpt)
                    model.log = read_steplog(Path(run_dir) / "steplog.ndjson")
                    return model
        model, config = train_approach(approach, sources, targets, trial, catalog=self.catalog)
        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            model.save(run_dir / "checkpoint.pt", config)
            write_steplog(model.log, run_dir / "steplog.ndjson")
            (run_dir / "config.json").write_text(json.dumps(config, indent=2))
        return model


# --------------------------------------------------------------------------
# selection and cross-testing


def predicted_mask(model: Predictor, sample: SamplePair) -> np.ndarray:
    if hasattr(model, "predict_mask"):
        return model.predict_mask(sample)
    return (np.asarray(model.predict(sample)) >= 0.5).astype(np.uint8)


def validation_dice(model: Predictor, sample: SamplePair) -> float:
    return L.dice_score(L.confusion(predicted_mask(model, sample), sample.annotation().data))


def select_best(trials: Sequence[tuple], val_sample: SamplePair, score: Callable = validation_dice) -> tuple:
    """Return the ``(trial, model)`` pair with the highest validation Dice.

    Ties go to the earliest trial.
    """
    if not trials:
        raise ValueError("no trials to select from")
    if not val_sample.has_annotation:
        raise ValueError(f"validation sample {val_sample.id!r} has no mask")
    best, best_score = None, -math.inf
    for entry in trials:
        s = score(entry[1], val_sample)
        if s > best_score:
            best, best_score = entry, s
    return best


@dataclass(frozen=True)
class CrossTestPlan:
    annotated_ids: tuple[str, ...]
    repetitions: int = 5
    trials_per_repetition: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "annotated_ids", tuple(self.annotated_ids))
        if len(self.annotated_ids) != 5 or len(set(self.annotated_ids)) != 5:
            raise ValueError("a cross-test plan needs exactly 5 distinct annotated ids")
        if not 1 <= self.repetitions <= 5:
            raise ValueError("repetitions must be between 1 and 5")
        if self.trials_per_repetition < 1:
            raise ValueError("need at least one trial per repetition")

    def split(self, repetition: int) -> tuple[str, list[str]]:
        """(validation id, test ids) for one repetition."""
        val = self.annotated_ids[repetition]
        return val, [i for i in self.annotated_ids if i != val]

    @classmethod
    def from_dict(cls, d: dict) -> "CrossTestPlan":
        return cls(
            annotated_ids=tuple(d["annotated_ids"]),
            repetitions=d.get("repetitions", 5),
            trials_per_repetition=d.get("trials_per_repetition", 10),
            seed=d.get("seed", 0),
        )


@dataclass
class MetricsReport:
    """Per-image rows plus mean and sample std per metric."""

    approach: str
    rows: list[dict]
    selected: list[dict] = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.rows], dtype=np.float64)

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for m in L.METRIC_NAMES:
            v = self.values(m)
            out[m] = {
                "mean": float(v.mean()) if v.size else float("nan"),
                "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            }
        return out

    def repetition_summary(self) -> dict[str, dict[str, float]]:
        """Mean and std across repetition means (the other reading of "±")."""
        reps = sorted({r["repetition"] for r in self.rows})
        out = {}
        for m in L.METRIC_NAMES:
            means = np.array([np.mean([r[m] for r in self.rows if r["repetition"] == k]) for k in reps])
            out[m] = {
                "mean": float(means.mean()) if means.size else float("nan"),
                "std": float(means.std(ddof=1)) if means.size > 1 else 0.0,
            }
        return out

    def to_dict(self) -> dict:
        return {
            "approach": self.approach,
            "rows": self.rows,
            "selected": self.selected,
            "summary": self.summary(),
            "repetition_summary": self.repetition_summary(),
        }

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        return cls(d["approach"], d["rows"], d.get("selected", []))


TABLE_COLUMNS = (("precision", "Precision"), ("recall", "Recall"), ("dice", "Dice Score"),
                 ("accuracy", "Accuracy"), ("cldice", "CLDice Score"))


def render_table(reports: Sequence[MetricsReport]) -> str:
    """Plain-text table, one row per approach, cells ``mean ± std``."""
    titles = {a.id: a.title for a in approach_catalog()}
    names = [titles.get(r.approach, r.approach) for r in reports]
    width = max([len("Approach")] + [len(n) for n in names])
    header = "Approach".ljust(width) + " | " + " | ".join(t.center(13) for _, t in TABLE_COLUMNS)
    lines = [header, "-" * len(header)]
    for name, rep in zip(names, reports):
        s = rep.summary()
        cells = [f"{s[k]['mean']:.2f} ± {s[k]['std']:.2f}".center(13) for k, _ in TABLE_COLUMNS]
        lines.append(name.ljust(width) + " | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


@dataclass
class CrossTestData:
    sources: list[SamplePair]
    targets: list[SamplePair]


def run_cross_test(
    plan: CrossTestPlan,
    approach: Approach,
    data: CrossTestData,
    trainer: Optional[Trainer] = None,
    space: Optional[HyperparamSpace] = None,
    run_dir: Optional[Union[str, Path]] = None,
) -> MetricsReport:
    """Random-search, select on one annotated sample, test on the other four.

    Target samples whose id is in ``plan.annotated_ids`` are evaluation-only;
    the remaining target samples are used (without masks) for adaptation.
    """
    trainer = trainer or TorchTrainer()
    by_id = {t.id: t for t in data.targets}
    missing = [i for i in plan.annotated_ids if i not in by_id or not by_id[i].has_annotation]
    if missing:
        raise ValueError(f"annotated samples missing or without masks: {missing}")
    train_targets = [t.without_mask() if t.has_annotation else t
                     for t in data.targets if t.id not in plan.annotated_ids]
    base_space = space or HyperparamSpace(seed=plan.seed)
    space = HyperparamSpace(base_space.params, seed=plan.seed)

    rows, selected = [], []
    for rep in range(plan.repetitions):
        val_id, test_ids = plan.split(rep)
        trials = sample_trials(space, plan.trials_per_repetition, prefix=(rep,))
        trained = []
        for trial in trials:
            trial_dir = None if run_dir is None else Path(run_dir) / str(rep) / str(trial.index)
            trained.append((trial, trainer(approach, trial, data.sources, train_targets, trial_dir)))
        best_trial, best_model = select_best(trained, by_id[val_id])
        selected.append({"repetition": rep, "validation_id": val_id, "trial": best_trial.to_dict()})
        for tid in test_ids:
            sample = by_id[tid]
            metrics = L.all_metrics(predicted_mask(best_model, sample), sample.annotation().data)
            rows.append({"repetition": rep, "sample_id": tid, **metrics})
    report = MetricsReport(approach.id, rows, selected)
    if run_dir is not None:
        report.save(Path(run_dir) / "report.json")
        (Path(run_dir) / "report.txt").write_text(render_table([report]))
    return report
