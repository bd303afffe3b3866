"""``icdetect`` command line: gen, train, calibrate, infer, eval, bench.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 model file
version mismatch. Outputs are written to a staging directory next to
``--out`` and moved into place only when the command succeeds.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import shutil
import sys
import tempfile
import warnings
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import config as cfgmod
from .datagen import (REFERENCE, TARGET, DatasetManifest, PyramidStore, UngroupedLabel,
                      build_patch_dataset, default_profiles, slide_cases, validation_split,
                      write_dataset)
from .evaluation import (IC, PATCH, SLIDE, EmptyEvaluation, LengthMismatch, SingleClass,
                         confusion, evaluate_patches, evaluate_slides, metrics)
from .model import (EmptyClass, ModelFormatError, ModelVersionError, ShapeMismatch, calibrate,
                    load_model, save_model, train_master)
from .pipeline import PipelineConfig, score_slide, write_outputs
from .pyramid import PyramidFormatError, build_pyramid, open_pyramid

log = logging.getLogger("icdetect")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERSION = 4

MODEL_FILE = "model.icd"

_DATA_ERRORS = (FileNotFoundError, NotADirectoryError, PyramidFormatError, ModelFormatError,
                EmptyClass, EmptyEvaluation, LengthMismatch, SingleClass, ShapeMismatch,
                UngroupedLabel, KeyError)


class DataError(Exception):
    pass


@contextlib.contextmanager
def staged(out: Path):
    """Yield a scratch directory whose contents replace ``out`` entries on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(stage.iterdir()):
        dest = out / item.name
        if dest.is_dir():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        shutil.move(str(item), str(dest))
    stage.rmdir()


def _pipeline_cfg(cfg: cfgmod.RunConfig) -> PipelineConfig:
    return PipelineConfig(cfg.segmentation, cfg.filtering)


def _open_dataset(path) -> tuple[DatasetManifest, PyramidStore]:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"{root}: no manifest.json (run `icdetect gen` first)")
    manifest = DatasetManifest.load(manifest_path)
    return manifest, PyramidStore(root=root, manifest=manifest)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def _need(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise cfgmod.ConfigError(f"{args.command} needs {', '.join(missing)}")


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args, cfg: cfgmod.RunConfig) -> int:
    _need(args, "out")
    if args.ic_fraction is not None:
        cfg = cfgmod.merge(cfg, {"generator": {"ic_fraction": args.ic_fraction}})
    profiles = default_profiles(cfg.seed, cfg.generator.delta())
    ic = cfg.generator.ic_fraction
    with staged(args.out) as stage:
        manifest = write_dataset(stage, profiles, cfg.specs(), cfg.seed,
                                 None if ic is None else float(ic), cfg.workers)
        cfgmod.write_snapshot(cfg, stage)
    counts = {c: len(manifest.slides_for(c)) for c in profiles}
    log.info("generated %s slides into %s", counts, args.out)
    return EXIT_OK


def _training_sets(manifest, store, center: str, cfg: cfgmod.RunConfig):
    patches, report = build_patch_dataset(manifest, store, cfg.train.input_side, cfg.filtering,
                                          center=center, split="train", workers=cfg.workers)
    if len(patches) == 0:
        raise DataError(f"no training patches for centre {center!r}")
    train, val = validation_split(patches, cfg.validation.ratio, cfg.seed)
    return train, val, report


def _log_json(history) -> dict:
    return history.to_json()


def cmd_train(args, cfg: cfgmod.RunConfig) -> int:
    _need(args, "dataset", "out")
    manifest, store = _open_dataset(args.dataset)
    center = args.center or REFERENCE
    train, val, report = _training_sets(manifest, store, center, cfg)
    model, history = train_master(train, val, cfg.train_config(), cfg.augment, cfg.forest,
                                  cfg.workers)
    model.meta["center"] = center
    with staged(args.out) as stage:
        save_model(model, stage / MODEL_FILE)
        _write_json(stage / "training-log.json", _log_json(history))
        _write_json(stage / "filter-report.json", report.to_json())
        cfgmod.write_snapshot(cfg, stage)
    return EXIT_OK


def cmd_calibrate(args, cfg: cfgmod.RunConfig) -> int:
    _need(args, "model", "dataset", "out")
    master = load_model(args.model)
    manifest, store = _open_dataset(args.dataset)
    center = args.center or TARGET
    train, val, report = _training_sets(manifest, store, center, cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model, history = calibrate(master, train, val, center, cfg.train_config(), cfg.augment,
                                   cfg.forest, cfg.workers)
    for w in caught:
        log.warning("%s", w.message)
    model.meta["center"] = center
    with staged(args.out) as stage:
        save_model(model, stage / MODEL_FILE)
        _write_json(stage / "training-log.json", _log_json(history))
        _write_json(stage / "filter-report.json", report.to_json())
        cfgmod.write_snapshot(cfg, stage)
    return EXIT_OK


def _load_slide(path) -> "object":
    path = Path(path)
    if path.is_dir():
        return open_pyramid(path)
    if path.is_file():
        # a plain image is taken as the x20 base level
        with Image.open(path) as im:
            return build_pyramid(np.asarray(im.convert("RGB")))
    raise FileNotFoundError(f"slide {path} does not exist")


def cmd_infer(args, cfg: cfgmod.RunConfig) -> int:
    _need(args, "model", "slide", "out")
    model = load_model(args.model)
    pyr = _load_slide(args.slide)
    slide_id = args.slide_id or Path(args.slide).name
    result = score_slide(pyr, model, _pipeline_cfg(cfg), slide_id=slide_id, workers=cfg.workers)
    with staged(args.out) as stage:
        write_outputs(result, pyr, stage)
        cfgmod.write_snapshot(cfg, stage)
    log.info("%s: S_IC=%.4f class=%s N=%d", slide_id, result.s_ic, result.predicted, result.n)
    return EXIT_OK


def _stub_metrics(path, center: Optional[str]) -> dict:
    """Metrics straight from a JSON list of ``{"prediction", "label"}`` records
    (IC/Rest strings or booleans), optionally tagged with a ``level``."""
    try:
        rows = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not isinstance(rows, list):
        raise DataError(f"{path}: expected a list of prediction records")
    out = {}
    for level in (PATCH, SLIDE):
        mine = [r for r in rows if r.get("level", PATCH) == level]
        if mine:
            c = confusion([r["prediction"] for r in mine], [r["label"] for r in mine])
            out[level] = metrics(c, level, center).to_json()
    if not out:
        raise EmptyEvaluation(f"{path}: no prediction records")
    return out


def cmd_eval(args, cfg: cfgmod.RunConfig) -> int:
    _need(args, "out")
    center = args.center
    if args.predictions:
        payload = _stub_metrics(args.predictions, center)
    else:
        _need(args, "model", "dataset")
        model = load_model(args.model)
        manifest, store = _open_dataset(args.dataset)
        center = center or TARGET
        payload = {"model": model.provenance}
        if args.level in (PATCH, "both"):
            patches, _ = build_patch_dataset(manifest, store, model.input_side, cfg.filtering,
                                             center=center, split=args.split, workers=cfg.workers)
            payload[PATCH] = evaluate_patches(model, patches, center).to_json()
        if args.level in (SLIDE, "both"):
            cases = slide_cases(manifest, store, center, args.split)
            report, results = evaluate_slides(model, cases, center, _pipeline_cfg(cfg), cfg.workers)
            payload[SLIDE] = report.to_json()
            payload["slides"] = [{"slide_id": r.slide_id, "S_IC": r.s_ic, "class": r.predicted,
                                  "label": IC if c.label else "Rest", "N": r.n}
                                 for r, c in zip(results, cases)]
    with staged(args.out) as stage:
        _write_json(stage / "metrics.json", payload)
        cfgmod.write_snapshot(cfg, stage)
    return EXIT_OK


def cmd_bench(args, cfg: cfgmod.RunConfig) -> int:
    _need(args, "model", "dataset", "out")
    model = load_model(args.model)
    manifest, store = _open_dataset(args.dataset)
    records = manifest.slides_for(args.center, args.split)[:args.limit]
    if not records:
        raise DataError("no slides selected for benchmarking")
    rows = []
    for rec in records:
        res = score_slide(store[rec.slide_id], model, _pipeline_cfg(cfg), slide_id=rec.slide_id,
                          workers=cfg.workers)
        rows.append({"slide_id": rec.slide_id, **{k: res.timings[k] for k in
                                                  ("filter_ms", "inference_ms", "total_ms")},
                     "retained": res.filter_report.retained, "candidates": res.filter_report.total,
                     "inference_patch_count": res.inference_patch_count, "N": res.n})
    summary = {k: float(np.mean([r[k] for r in rows])) for k in ("filter_ms", "inference_ms", "total_ms")}
    with staged(args.out) as stage:
        _write_json(stage / "bench.json", {"slides": rows, "mean": summary, "n_slides": len(rows)})
        cfgmod.write_snapshot(cfg, stage)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "calibrate": cmd_calibrate,
            "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="icdetect", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate reference and target datasets")
    p.add_argument("--ic-fraction", type=float, help="force every slide's IC area fraction")

    for name, helptext in (("train", "train the master model"),
                           ("calibrate", "fine-tune a master model on a target centre")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--dataset", type=Path)
        p.add_argument("--center")
        if name == "calibrate":
            p.add_argument("--model", type=Path, help="master model file")

    p = sub.add_parser("infer", parents=[common], help="score one slide")
    p.add_argument("--model", type=Path)
    p.add_argument("--slide", type=Path, help="pyramid directory or a base-level image")
    p.add_argument("--slide-id")

    p = sub.add_parser("eval", parents=[common], help="patch/slide metrics on a test split")
    p.add_argument("--model", type=Path)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--center")
    p.add_argument("--split", default="test")
    p.add_argument("--level", choices=(PATCH, SLIDE, "both"), default="both")
    p.add_argument("--predictions", type=Path, help="score ready-made predictions instead")

    p = sub.add_parser("bench", parents=[common], help="timed multi-slide run")
    p.add_argument("--model", type=Path)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--center")
    p.add_argument("--split")
    p.add_argument("--limit", type=int, default=5)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, assignments=args.set, seed=args.seed,
                                 workers=args.workers)
        return COMMANDS[args.command](args, cfg)
    except cfgmod.ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ModelVersionError as exc:
        log.error("model version mismatch: %s", exc)
        return EXIT_VERSION
    except (DataError,) + _DATA_ERRORS as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
