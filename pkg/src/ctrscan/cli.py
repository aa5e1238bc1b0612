"""Command-line entry point: synth, train, infer, eval."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, pipeline
from .discriminator import GmmParams, ThresholdResult
from .errors import (
    ArgumentError,
    CtrScanError,
    DimensionError,
    FormatError,
    MetricUndefinedError,
    NumericError,
    TrainingError,
    ValidationError,
)
from .metrics import build_report
from .synthgen import SynthConfig, generate_cohort

log = logging.getLogger("ctrscan")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.txt"


def threshold_path(scores_path: Path) -> Path:
    """Sidecar holding the GMM fit and threshold next to a scores TSV."""
    return scores_path.with_name(scores_path.stem + ".threshold.txt")


def _print_config(values: dict) -> None:
    for key, value in values.items():
        print(f"{key}={dataio._kv_str(value)}")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    raw = dataio.read_kv(args.config) if args.config else {}
    cfg = SynthConfig.from_mapping(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.dump_config:
        _print_config(vars(cfg))
        return EXIT_OK
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ArgumentError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    cohort = generate_cohort(cfg)
    for ds in cohort:
        dataio.save_dataset(ds, out / ds.dataset_id)
    manifest = {"datasets": ",".join(ds.dataset_id for ds in cohort)}
    manifest.update({f"synth.{k}": v for k, v in vars(cfg).items()})
    dataio.write_kv(out / MANIFEST, manifest)
    log.info("wrote %d datasets to %s", len(cohort), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def resolve_run_config(args, base: pipeline.RunConfig | None = None) -> pipeline.RunConfig:
    """Defaults (or a resumed checkpoint's config), then --config, then flags."""
    values = base.to_dict() if base is not None else {}
    if args.config:
        values.update(dataio.read_kv(args.config))
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "deterministic", False):
        values["deterministic"] = True
    if getattr(args, "ablate", None):
        values["ablate"] = args.ablate
    return pipeline.RunConfig.from_mapping({k: dataio._kv_str(v) for k, v in values.items()})


def _expand_sources(paths) -> list[Path]:
    """Dataset dirs; a directory holding a synth manifest expands to its members."""
    out = []
    for p in map(Path, paths):
        if (p / MANIFEST).is_file():
            ids = dataio.read_kv(p / MANIFEST).get("datasets", "")
            out.extend(p / i for i in ids.split(",") if i)
        else:
            out.append(p)
    return out


def cmd_train(args) -> int:
    out = Path(args.out)
    stages = pipeline.STAGES if args.stage == "all" else (args.stage,)
    resume = None
    if stages[0] != "align":
        if not (out / pipeline.CHECKPOINT).is_file():
            raise TrainingError(f"--stage {args.stage} needs an existing checkpoint in {out}")
        resume = pipeline.load_model(out)
        needed = pipeline.STAGES[: pipeline.STAGES.index(stages[0])]
        missing = [s for s in needed if s not in resume.stages]
        if missing:
            raise TrainingError(f"--stage {args.stage} needs the {missing[0]} stage in {out}")
    cfg = resolve_run_config(args, resume.cfg if resume else None)
    if args.dump_config:
        _print_config(cfg.to_dict())
        return EXIT_OK
    if not args.sources:
        raise ArgumentError("train needs at least one --sources directory")
    datasets = [dataio.load_dataset(p) for p in _expand_sources(args.sources)]
    model = pipeline.fit(datasets, cfg, stages, resume)
    pipeline.save_model(model, out)
    log.info("trained stages %s; checkpoint in %s", ",".join(model.stages), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer / eval
# ---------------------------------------------------------------------------


def cmd_infer(args) -> int:
    model = pipeline.load_model(args.model)
    if args.dump_config:
        _print_config(model.cfg.to_dict())
        return EXIT_OK
    ds = dataio.load_dataset(args.data)
    (result,) = pipeline.infer(model, [ds])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_scores(out, ds, result)
    g, t = result.gmm, result.threshold
    dataio.write_kv(
        threshold_path(out),
        {
            "theta": float(t.theta),
            "threshold_method": t.method,
            "gmm_weights": ",".join(repr(float(v)) for v in g.weights),
            "gmm_means": ",".join(repr(float(v)) for v in g.means),
            "gmm_variances": ",".join(repr(float(v)) for v in g.variances),
            "gmm_converged": g.converged,
            "config_fingerprint": model.cfg.fingerprint(),
            "seed": model.cfg.seed,
        },
    )
    print(f"theta={t.theta!r} method={t.method} spots={ds.n_spots} called={int(result.calls.sum())}")
    return EXIT_OK


def cmd_eval(args) -> int:
    scores_path = Path(args.scores)
    table = pipeline.read_scores(scores_path)
    ds = dataio.load_dataset(args.data)
    if ds.labels is None:
        raise ValidationError(f"{ds.dataset_id} has no labels to evaluate against")
    if table["score"].size != ds.n_spots or not np.array_equal(table["spot_index"], np.arange(ds.n_spots)):
        raise DimensionError(f"{scores_path.name} does not list the {ds.n_spots} spots of {ds.dataset_id}")
    extras = {"dataset_id": ds.dataset_id, "scores_path": str(scores_path)}
    gmm = threshold = None
    side = threshold_path(scores_path)
    if side.is_file():
        kv = dataio.read_kv(side)

        def pair(key):
            return tuple(float(v) for v in kv[key].split(","))

        gmm = GmmParams(pair("gmm_weights"), pair("gmm_means"), pair("gmm_variances"))
        threshold = ThresholdResult(float(kv["theta"]), kv["threshold_method"])
        extras.update(config_fingerprint=kv.get("config_fingerprint", ""), seed=int(kv["seed"]))
    report = build_report(table["score"], ds.labels, gmm, threshold, **extras)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    for name in ("auc", "ap", "f1", "ks"):
        value = getattr(report, name)
        print(f"{name}={'null' if value is None else format(value, '.4f')}")
    if report.reasons:
        name, reason = next(iter(report.reasons.items()))
        raise MetricUndefinedError(f"{name} undefined: {reason}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ctrscan", description="Cancer tissue region detection for spatial transcriptomics.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the three stages")
    p.add_argument("--sources", nargs="+", help="labelled dataset directories (or a synth output dir)")
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--stage", choices=("all", *pipeline.STAGES), default="all")
    p.add_argument("--ablate", choices=("bca", "rvae", "cl"))
    p.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="score one dataset and threshold it")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="scores TSV path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="compute metrics against labels")
    p.add_argument("--scores", required=True)
    p.add_argument("--data", required=True, help="labelled dataset directory")
    p.add_argument("--out", required=True, help="report path")
    p.set_defaults(func=cmd_eval)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ArgumentError):
        return EXIT_USAGE
    if isinstance(exc, (NumericError, TrainingError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ValidationError, FormatError, DimensionError, MetricUndefinedError, OSError)):
        return EXIT_VALIDATION
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CtrScanError, OSError) as exc:
        print(f"ctrscan {args.command}: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
