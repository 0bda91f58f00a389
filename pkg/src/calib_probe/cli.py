"""``calib-probe`` command line: generate, train, eval, experiment, inspect.

Configuration is one YAML mapping shaped like an experiment config (``seed``,
``dataset``, ``model``, experiment keys). ``--set key.path=value`` overrides
any entry; unknown keys are errors. Failures print one line to stderr,
``error: {"code": N, "type": "...", "message": "..."}``, and exit with
2 (config), 3 (data/IO) or 4 (numerical degeneracy).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, datagen, experiments, models, sensor
from .config import apply_overrides, load_yaml
from .errors import CalibProbeError, ConfigError, DataError, DegeneracyError
from .fileio import atomic_write_text

log = logging.getLogger("calib_probe")

THREADS_ENV = "CALIB_PROBE_THREADS"
MODEL_KINDS = ("linear", "mlp", "knn", "classifier")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def default_threads() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        if flag < 1:
            raise ConfigError("--threads must be >= 1")
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
        if n < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1")
        return n
    return default_threads()


def resolve_config(args, exp_id: str | None = None) -> experiments.ExperimentConfig:
    data = load_yaml(args.config) if args.config else {}
    data = apply_overrides(data, args.set)
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    return experiments.make_config(data, exp_id)


def _require_seed(args, what: str):
    if args.seed is None:
        raise ConfigError(f"{what} is stochastic: --seed is required")


# ---------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    if args.count is not None and args.count < 0:
        raise ConfigError("--count must be >= 0")
    if args.count != 0:
        _require_seed(args, "generate")
    cfg = resolve_config(args)
    ds = cfg.resolved_dataset()
    if args.count is not None:
        # every split that has worlds gets --count samples
        ds.counts = {s: (args.count if ds.worlds.get(s, 0) > 0 else 0) for s in datagen.SPLITS}
        ds.__post_init__()
    man = datagen.build_dataset(ds, args.out, resolve_threads(args.threads))
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"),
                      "counts": {s: len(man.split(s)) for s in datagen.SPLITS}}, sort_keys=True))
    return 0


def _load_split(args, use_intensity: bool):
    man = datagen.load_manifest(args.manifest)
    samples = datagen.load_samples(man, args.split)
    if not samples:
        raise DataError(f"{args.manifest}: split {args.split!r} is empty")
    if use_intensity and any(s.intensity is None for s in samples):
        raise DataError(f"{args.manifest}: model.use_intensity set but samples have no intensity raster")
    return man, samples


def cmd_train(args) -> int:
    if args.kind == "mlp":
        _require_seed(args, "mlp training")
    cfg = resolve_config(args)
    mc = cfg.model
    _, samples = _load_split(args, mc.use_intensity)
    fs = models.featurize(samples, mc.descriptor())
    if args.kind == "classifier":
        model = models.fit_classifier(fs, mc.l2)
    else:
        model = experiments.fit_model(args.kind, fs, mc, cfg.seed)
    models.save_model(model, args.out)
    print(json.dumps({"model": str(args.out), "kind": model.kind, "n_train": len(fs)}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model = models.load_model(args.model)
    _, samples = _load_split(args, cfg.model.use_intensity)
    fs = models.featurize(samples, cfg.model.descriptor())
    cams = [s.camera_id for s in samples]
    rep = experiments.ExperimentReport("eval", "eval", {"model": str(args.model), "manifest": str(args.manifest),
                                                        "split": args.split, "config": cfg.to_dict()})
    if model.kind == "classifier":
        pred = models.classify_features(model, fs)
        for cam in sorted(set(cams)):
            m = np.array([c == cam for c in cams])
            rep.accuracy.append(experiments.AccuracyRow(args.split, "-", cam, pred[m] == (fs.Y[m] > 0)))
    else:
        errs = experiments.errors_against(models.predict_features(model, fs), fs.Y)
        for cam in sorted(set(cams)):
            m = np.array([c == cam for c in cams])
            rep.rows.append(experiments.Row(args.split, model.kind, "-", cam, errs[m]))
    out = Path(args.out)
    atomic_write_text(out / "table.csv", experiments.table_csv(rep))
    atomic_write_text(out / "samples.csv", experiments.samples_csv(rep))
    atomic_write_text(out / "report.json",
                      json.dumps(experiments.report_dict(rep), indent=2, sort_keys=True) + "\n")
    print(json.dumps({"out": str(out), "n": len(samples)}, sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    _require_seed(args, "experiment")
    cfg = resolve_config(args, args.id)
    out = Path(args.out) if args.out else Path("runs") / cfg.id
    rep = experiments.run_experiment(cfg, resolve_threads(args.threads))
    experiments.write_report(rep, out)
    print(json.dumps({"experiment": cfg.id, "out": str(out), "runtime_s": round(rep.runtime, 1)}, sort_keys=True))
    return 0


def raster_stats(a: np.ndarray) -> dict:
    v = a[a > 0]
    return {
        "shape": list(a.shape),
        "n_valid": int(v.size),
        "valid_fraction": float(v.size / a.size) if a.size else 0.0,
        "min": float(v.min()) if v.size else None,
        "max": float(v.max()) if v.size else None,
        "mean": float(v.mean()) if v.size else None,
    }


def cmd_inspect(args) -> int:
    if args.raster:
        info = {"raster": str(args.raster), "stats": raster_stats(sensor.read_raster(args.raster))}
    else:
        if not args.manifest:
            raise ConfigError("inspect needs --manifest or --raster")
        man = datagen.load_manifest(args.manifest, check_files=False)
        recs = man.split(args.split)
        if not 0 <= args.index < len(recs):
            raise DataError(f"split {args.split!r} has {len(recs)} samples; index {args.index} out of range")
        rec = recs[args.index]
        s = datagen.load_sample(man, rec)
        info = {
            "split": args.split,
            "index": args.index,
            "path": rec["path"],
            "camera_id": s.camera_id,
            "seed": s.seed,
            "world_seed": s.world_seed,
            "label": s.label.to_dict(),
            "intrinsics": s.depth.intrinsics.to_dict(),
            "depth": raster_stats(s.depth.data),
        }
        if s.intensity is not None:
            info["intensity"] = raster_stats(s.intensity)
    print(json.dumps(info, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="calib-probe", description="Probe learned LiDAR-camera calibrators on synthetic scenes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True, threads=False):
        sp.add_argument("--config", type=Path, help="YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. dataset.counts.train=500 (repeatable)")
        if seed:
            sp.add_argument("--seed", type=int, help="global seed (required where results are random)")
        if threads:
            sp.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or all cores)")

    g = sub.add_parser("generate", help="render a dataset (rasters + manifest)")
    common(g, threads=True)
    g.add_argument("--out", type=Path, required=True, help="output directory")
    g.add_argument("--count", type=int, help="samples per split (0 writes an empty manifest)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a model on a manifest split")
    common(t)
    t.add_argument("--manifest", type=Path, required=True)
    t.add_argument("--split", default="train", choices=datagen.SPLITS)
    t.add_argument("--kind", default="linear", choices=MODEL_KINDS)
    t.add_argument("--out", type=Path, required=True, help="model file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a model file on a manifest split")
    common(e, seed=False)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--split", default="test", choices=datagen.SPLITS)
    e.add_argument("--out", type=Path, required=True, help="output directory for table.csv / samples.csv")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run one of E1-E5")
    common(x, threads=True)
    x.add_argument("--id", required=True, help="E1..E5 or cross_camera, classification_recovery, "
                                                "cropping, clues, mixed_training")
    x.add_argument("--out", type=Path, help="report directory (default runs/<id>)")
    x.set_defaults(func=cmd_experiment)

    i = sub.add_parser("inspect", help="print raster statistics, intrinsics and label of a sample")
    i.add_argument("--manifest", type=Path)
    i.add_argument("--split", default="train", choices=datagen.SPLITS)
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--raster", type=Path, help="inspect a single DPR1 file instead")
    i.set_defaults(func=cmd_inspect)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, CalibProbeError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return DataError.exit_code
    if isinstance(exc, ValueError):
        return ConfigError.exit_code
    if isinstance(exc, ArithmeticError):
        return DegeneracyError.exit_code
    return 1


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        return args.func(args)
    except (CalibProbeError, OSError, ValueError, ArithmeticError) as exc:
        code = _exit_code(exc)
        msg = " ".join(str(exc).split())
        print("error: " + json.dumps({"code": code, "type": type(exc).__name__, "message": msg}), file=sys.stderr)
        return code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
