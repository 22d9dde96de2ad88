"""Command-line entry point.

Subcommands: synth, reduce, train, eval, crosstest, report. Exit status is 0
on success, 2 on invalid input and 1 on internal errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import harness as H
from .hsi_core import (
    CubeFormatError,
    Domain,
    NonMonotonicWavelengths,
    PhantomSpec,
    SamplePair,
    load_cube,
    load_image_png,
    load_mask_png,
    make_source_phantom,
    make_target_phantom,
    save_cube,
    save_image_png,
    save_mask_png,
)
from .losses import all_metrics
from .spectral import DEFAULT_RGB_WINDOWS, EmptyWindow, WavelengthWindow, rgb_windowing, window_median

log = logging.getLogger("vesselda")


class UsageError(Exception):
    """Invalid user input; maps to exit status 2."""


# --------------------------------------------------------------------------
# dataset directories


def load_dataset(data_dir: Path) -> tuple[list[SamplePair], list[SamplePair]]:
    """Read ``manifest.json`` and return (sources, targets); targets keep masks as annotations."""
    manifest_path = Path(data_dir) / "manifest.json"
    if not manifest_path.is_file():
        raise UsageError(f"no manifest.json in {data_dir}")
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    sources = [
        SamplePair.create(load_image_png(root / s["image"]), Domain.SOURCE, s["id"],
                          mask=load_mask_png(root / s["mask"]))
        for s in manifest.get("sources", [])
    ]
    targets = []
    for t in manifest.get("targets", []):
        mask = load_mask_png(root / t["mask"]) if t.get("mask") else None
        targets.append(SamplePair.create(load_cube(root / t["cube"]), Domain.TARGET, t["id"], mask=mask))
    return sources, targets


def _read_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    return json.loads(p.read_text())


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> dict:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from None
    base = dict(
        height=args.height,
        width=args.width,
        n_bands=args.bands,
        wavelength_range_nm=(args.wl_min, args.wl_max),
        vessel_density=args.density,
        noise_sigma=args.noise,
        source_polarity=args.source_polarity,
    )
    try:
        PhantomSpec(**base)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = {"seed": args.seed, "phantom": {**base, "wavelength_range_nm": list(base["wavelength_range_nm"])},
                "targets": [], "sources": []}
    for i in range(args.targets):
        sid = f"target-{i:03d}"
        cube, mask = make_target_phantom(PhantomSpec(**base, seed=H.derive_seed(args.seed, 1, i)))
        save_cube(cube, out / "targets" / f"{sid}.json")
        save_mask_png(mask, out / "targets" / f"{sid}_mask.png")
        manifest["targets"].append({"id": sid, "cube": f"targets/{sid}.json", "mask": f"targets/{sid}_mask.png"})
    for i in range(args.sources):
        sid = f"source-{i:03d}"
        image, mask = make_source_phantom(PhantomSpec(**base, seed=H.derive_seed(args.seed, 2, i)))
        save_image_png(image, out / "sources" / f"{sid}.png")
        save_mask_png(mask, out / "sources" / f"{sid}_mask.png")
        manifest["sources"].append({"id": sid, "image": f"sources/{sid}.png", "mask": f"sources/{sid}_mask.png"})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return {"manifest": str(out / "manifest.json"), "targets": args.targets, "sources": args.sources}


def cmd_reduce(args) -> dict:
    cube = load_cube(args.cube)
    if args.rgb is not None:
        windows = DEFAULT_RGB_WINDOWS if args.rgb == "default" else [
            WavelengthWindow.parse(w) for w in args.rgb.split(",")
        ]
        image = rgb_windowing(cube, windows)
    else:
        image = window_median(cube, WavelengthWindow.parse(args.window))
    out = Path(args.output) if args.output else Path(args.out) / (Path(args.cube).stem + ".png")
    save_image_png(image, out, bits=args.bits)
    return {"output": str(out), "channels": image.channels}


def _steps_kw(args) -> dict:
    return {"pretrain_steps": args.pretrain_steps, "adapt_steps": args.adapt_steps}


def cmd_train(args) -> dict:
    try:
        approach = H.get_approach(args.approach, **_steps_kw(args))
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    sources, targets = load_dataset(Path(args.data))
    held_out = set(args.holdout or [])
    train_targets = [t for t in targets if t.id not in held_out]
    if not sources or not train_targets:
        raise UsageError("training needs at least one source and one target sample")
    trainer = H.TorchTrainer(**_steps_kw(args))
    out = Path(args.out)
    trial = H.TrialConfig(index=0, seed=args.seed, params={})
    model = trainer(approach, trial, sources, train_targets, out)
    return {"checkpoint": str(out / "checkpoint.pt"), "steplog": str(out / "steplog.ndjson"),
            "steps": len(model.log)}


class _FilePredictor:
    def __init__(self, pred_dir: Path):
        self.pred_dir = pred_dir

    def predict_mask(self, sample: SamplePair) -> np.ndarray:
        path = self.pred_dir / f"{sample.id}.png"
        if not path.is_file():
            raise UsageError(f"no prediction for {sample.id} in {self.pred_dir}")
        return load_mask_png(path).data


def _overlay(sample: SamplePair, pred: np.ndarray, path: Path) -> None:
    from .spectral import HEMOGLOBIN_WINDOW, band_indices

    cube = sample.image
    try:
        band_indices(cube, HEMOGLOBIN_WINDOW)
        view = window_median(cube, HEMOGLOBIN_WINDOW).data[..., 0]
    except EmptyWindow:
        view = cube.data.mean(axis=2)
        view = (view - view.min()) / max(float(np.ptp(view)), 1e-12)
    panels = [view, sample.annotation().data.astype(np.float32), pred.astype(np.float32)]
    strip = np.concatenate([np.pad(p, ((0, 0), (0, 2)), constant_values=1.0) for p in panels], axis=1)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(strip, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def cmd_eval(args) -> dict:
    if not args.checkpoint and not args.pred_dir:
        raise UsageError("eval needs --checkpoint or --pred-dir")
    _, targets = load_dataset(Path(args.data))
    if args.ids:
        by_id = {t.id: t for t in targets}
        unknown = [i for i in args.ids if i not in by_id]
        if unknown:
            raise UsageError(f"unknown sample ids: {unknown}")
        targets = [by_id[i] for i in args.ids]
    unannotated = [t.id for t in targets if not t.has_annotation]
    if unannotated:
        raise UsageError(f"samples without masks cannot be evaluated: {unannotated}")
    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        model = H.load_trained_approach(args.checkpoint)
        name = model.approach_id
    else:
        model = _FilePredictor(Path(args.pred_dir))
        name = "predictions"
    out = Path(args.out)
    rows = []
    for t in targets:
        pred = H.predicted_mask(model, t)
        rows.append({"repetition": 0, "sample_id": t.id, **all_metrics(pred, t.annotation().data)})
        if not args.no_overlays:
            _overlay(t, pred, out / "overlays" / f"{t.id}.png")
    report = H.MetricsReport(name, rows)
    report.save(out / "report.json")
    (out / "report.txt").write_text(H.render_table([report]))
    return {"report": str(out / "report.json"), "summary": report.summary()}


class StubTrainer:
    """Counts training calls; predicts vessels as dark pixels of the 500-600 nm median."""

    def __init__(self):
        self.trainings = 0
        self.evaluations = 0

    def __call__(self, approach, trial, sources, targets, run_dir=None):
        self.trainings += 1
        stub = self
        threshold = 0.3 + 0.04 * trial.index

        class _Stub:
            def predict_mask(self, sample):
                stub.evaluations += 1
                img = window_median(sample.image, WavelengthWindow(500, 600)).data[..., 0]
                return (img < threshold).astype(np.uint8)

        return _Stub()


def cmd_crosstest(args) -> dict:
    plan_path = Path(args.plan)
    if not plan_path.is_file():
        raise UsageError(f"plan file not found: {plan_path}")
    plan_dict = json.loads(plan_path.read_text())
    data_dir = Path(args.data or plan_dict.get("data", ""))
    try:
        plan = H.CrossTestPlan.from_dict({**plan_dict, "seed": plan_dict.get("seed", args.seed)})
        approach = H.get_approach(plan_dict["approach"])
    except KeyError as exc:
        raise UsageError(f"bad plan: {exc.args[0]}") from None
    sources, targets = load_dataset(data_dir)
    if args.stub_training:
        trainer = StubTrainer()
    else:
        trainer = H.TorchTrainer(plan_dict.get("pretrain_steps", args.pretrain_steps),
                                 plan_dict.get("adapt_steps", args.adapt_steps))
    run_dir = Path(args.out) / "runs" / approach.id
    report = H.run_cross_test(plan, approach, H.CrossTestData(sources, targets), trainer, run_dir=run_dir)
    result = {"report": str(run_dir / "report.json"), "summary": report.summary(),
              "test_evaluations": len(report.rows)}
    if isinstance(trainer, StubTrainer):
        result["trainings"] = trainer.trainings
    return result


def cmd_report(args) -> dict:
    root = Path(args.runs)
    paths = sorted(root.rglob("report.json"))
    if not paths:
        raise UsageError(f"no report.json under {root}")
    reports = [H.MetricsReport.load(p) for p in paths]
    order = {a.id: i for i, a in enumerate(H.approach_catalog())}
    reports.sort(key=lambda r: order.get(r.approach, len(order)))
    table = H.render_table(reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(table)
    combined = {r.approach: r.summary() for r in reports}
    (out / "table.json").write_text(json.dumps(combined, indent=2))
    sys.stderr.write(table)
    return {"table": str(out / "table.txt"), "approaches": [r.approach for r in reports]}


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with defaults (seed, out, data, ...)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vesselda", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic phantom dataset")
    s.add_argument("--targets", type=int, default=8)
    s.add_argument("--sources", type=int, default=20)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--bands", type=int, default=826)
    s.add_argument("--wl-min", type=float, default=400.0)
    s.add_argument("--wl-max", type=float, default=1000.0)
    s.add_argument("--density", type=float, default=0.15)
    s.add_argument("--noise", type=float, default=0.02)
    s.add_argument("--source-polarity", choices=("dark", "bright"), default="dark")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("reduce", parents=[common], help="median-window a cube to a PNG")
    r.add_argument("cube", help="cube header (.json)")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--window", default="500:600", help="lo:hi in nm")
    g.add_argument("--rgb", nargs="?", const="default", default=None,
                   help="three lo:hi windows for R,G,B (default 600:1000,500:600,400:500)")
    r.add_argument("--output", "-o", help="PNG path (default <out>/<cube>.png)")
    r.add_argument("--bits", type=int, choices=(8, 16), default=16)
    r.set_defaults(func=cmd_reduce)

    t = sub.add_parser("train", parents=[common], help="train one approach")
    t.add_argument("--approach", required=True)
    t.add_argument("--data", required=False)
    t.add_argument("--holdout", nargs="*", help="target ids excluded from adaptation")
    t.add_argument("--pretrain-steps", type=int, default=300)
    t.add_argument("--adapt-steps", type=int, default=300)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or prediction PNGs")
    e.add_argument("--checkpoint")
    e.add_argument("--pred-dir", help="directory of <id>.png predicted masks")
    e.add_argument("--data", required=False)
    e.add_argument("--ids", nargs="*")
    e.add_argument("--no-overlays", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("crosstest", parents=[common], help="run the cross-testing protocol")
    c.add_argument("--plan", required=True)
    c.add_argument("--data")
    c.add_argument("--stub-training", action="store_true")
    c.add_argument("--pretrain-steps", type=int, default=300)
    c.add_argument("--adapt-steps", type=int, default=300)
    c.set_defaults(func=cmd_crosstest)

    rp = sub.add_parser("report", parents=[common], help="collect report.json files into one table")
    rp.add_argument("--runs", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def _apply_config(args) -> None:
    cfg = _read_config(args.config)
    if args.seed is None:
        args.seed = int(cfg.get("seed", 0))
    if args.out is None:
        args.out = cfg.get("out", ".")
    if hasattr(args, "data") and getattr(args, "data", None) is None and "data" in cfg:
        args.data = cfg["data"]
    if getattr(args, "command", None) in ("train", "eval") and not args.data:
        raise UsageError("--data is required")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_config(args)
        result = args.func(args)
    except (UsageError, EmptyWindow, NonMonotonicWavelengths, CubeFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
