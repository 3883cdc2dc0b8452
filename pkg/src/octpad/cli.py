"""Command-line front end: synth, train, calibrate, score, eval.

Settings come from (lowest to highest precedence) built-in defaults, a flat
``key = value`` config file given by ``--config``, ``OCTPAD_*`` environment
variables and command-line flags. Keys are dotted, e.g. ``ae.epochs`` or
``paths.model_path``; the matching environment variable is
``OCTPAD_AE_EPOCHS``. ``--set key=value`` overrides any key.

Exit codes:
    0 success, 1 unexpected failure, 2 bad arguments or config,
    3 I/O or unreadable file, 4 zero-PA violation, 5 training diverged,
    6 degenerate calibration, 7 missing checkpoint or calibration,
    8 single-class score file, 9 invalid or empty dataset.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autoencoder as ae
from . import evaluator, scorer, synth
from .bscan_io import Label, load_manifest, select
from .errors import (CalibrationDegenerateError, ConfigError, CorruptionError, DivergenceError,
                     FormatError, IncompatibleCheckpointError, ManifestError, ZeroPAViolation)
from .preprocess import PreprocessConfig, preprocess_volume

log = logging.getLogger("octpad")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
EXIT_ZERO_PA, EXIT_DIVERGED, EXIT_DEGENERATE, EXIT_MISSING, EXIT_SINGLE_CLASS, EXIT_DATASET = 4, 5, 6, 7, 8, 9

ENV_PREFIX = "OCTPAD_"
MANIFEST_NAME = "manifest.tsv"
SCORE_COLUMNS = ("scan_id", "truth") + scorer.SCORE_FIELDS
EVAL_FAMILIES = ("ms",) + scorer.NUMERIC_SCORES


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Paths:
    data_dir: str = "data"
    model_path: str = "artifacts/model.ckpt"
    calibration_path: str = "artifacts/calibration.txt"
    report_dir: str = "artifacts/reports"


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessConfig = field(
        default_factory=lambda: PreprocessConfig(target_height=64, target_width=192))
    ae: ae.AEConfig = field(default_factory=ae.AEConfig)
    thresholds: scorer.Thresholds = field(default_factory=scorer.Thresholds)
    paths: Paths = field(default_factory=Paths)
    seed: int = 7
    use_finemap: bool = True

    @property
    def ae_config(self) -> ae.AEConfig:
        """Autoencoder config sized to the preprocessing output, seeded from the run seed."""
        return dataclasses.replace(self.ae, input_height=self.preprocess.target_height,
                                   input_width=self.preprocess.target_width,
                                   seed=stage_seed(self.seed, "train"))


_SECTIONS = {"preprocess": PreprocessConfig, "ae": ae.AEConfig,
             "thresholds": scorer.Thresholds, "paths": Paths}
# derived from other settings, never read from config
_DERIVED = {"ae.input_height", "ae.input_width", "ae.seed"}
_STAGES = {"synth": 0, "train": 1}


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, _STAGES[stage]]).generate_state(1)[0] % (2 ** 31))


def _defaults() -> dict[str, object]:
    flat: dict[str, object] = {"seed": 7, "use_finemap": True}
    base = PipelineConfig()
    for name in _SECTIONS:
        for f in dataclasses.fields(getattr(base, name)):
            key = f"{name}.{f.name}"
            if key not in _DERIVED:
                flat[key] = getattr(getattr(base, name), f.name)
    return flat


def _coerce(key: str, raw, like):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}") from None
    return raw


def resolve_config(config_path: str | None = None, overrides: dict[str, object] | None = None,
                   environ: dict[str, str] | None = None) -> PipelineConfig:
    """Merge defaults, config file, environment and explicit overrides."""
    flat = _defaults()
    layers: list[dict[str, object]] = []
    if config_path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise _Exit(EXIT_IO, f"cannot read config {config_path}: {exc}") from None
        parser.read_string("[pipeline]\n" + text)
        layers.append(dict(parser["pipeline"]))
    env = os.environ if environ is None else environ
    by_env = {ENV_PREFIX + k.upper().replace(".", "_"): k for k in flat}
    layers.append({by_env[k]: v for k, v in env.items() if k in by_env})
    layers.append(dict(overrides or {}))
    for layer in layers:
        for key, value in layer.items():
            if key not in flat:
                raise ConfigError(f"unknown config key {key!r}")
            flat[key] = _coerce(key, value, flat[key])
    sections = {name: {} for name in _SECTIONS}
    for key, value in flat.items():
        if "." in key:
            name, attr = key.split(".", 1)
            sections[name][attr] = value
    try:
        return PipelineConfig(
            preprocess=PreprocessConfig(**sections["preprocess"]),
            ae=ae.AEConfig(**{**sections["ae"],
                              "input_height": sections["preprocess"]["target_height"],
                              "input_width": sections["preprocess"]["target_width"]}),
            thresholds=scorer.Thresholds(**sections["thresholds"]),
            paths=Paths(**sections["paths"]),
            seed=int(flat["seed"]), use_finemap=bool(flat["use_finemap"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# commands

def _manifest(cfg: PipelineConfig) -> Path:
    path = Path(cfg.paths.data_dir) / MANIFEST_NAME
    if not path.is_file():
        raise _Exit(EXIT_IO, f"manifest not found: {path}")
    return path


def _load_model(cfg: PipelineConfig) -> tuple[ae.AutoencoderModel, str]:
    path = Path(cfg.paths.model_path)
    if not path.is_file():
        raise _Exit(EXIT_MISSING, f"checkpoint not found: {path} (run `train` first)")
    model = ae.load_model(path)
    return model, ae.model_digest(model)


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = args.out or cfg.paths.data_dir
    params = synth.SynthParams(seed=cfg.seed, height=args.height, width=args.width,
                               bscans_per_volume=args.bscans, speckle_sigma=args.speckle,
                               layer_jitter=args.jitter)
    counts = {"model": args.model, "score": args.score, "test_bona": args.test_bona, "test_pai": args.test_pai}
    _, split, manifest = synth.generate_dataset(out, stage_seed(cfg.seed, "synth"), counts, params,
                                                tuple(args.pai_presets))
    print(f"wrote {manifest} (model={len(split.model_set)} score={len(split.score_set)} "
          f"test={len(split.test_set)})")
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    volumes, split = load_manifest(_manifest(cfg), splits=("model",))
    model_set = select(volumes, split.model_set)
    if not model_set:
        raise _Exit(EXIT_DATASET, "empty model set: the manifest has no volumes tagged 'model'")
    model_set = [preprocess_volume(v, cfg.preprocess) for v in model_set]
    model = ae.build_model(cfg.ae_config)
    print("epoch,loss", flush=True)
    ae.train(model, model_set, on_epoch=lambda e, loss: print(f"{e},{loss!r}", flush=True))
    path = Path(cfg.paths.model_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = ae.save_model(model, path)
    log.info("saved checkpoint %s (sha256 %s)", path, digest[:12])
    return EXIT_OK


def cmd_calibrate(args, cfg: PipelineConfig) -> int:
    model, _ = _load_model(cfg)
    volumes, split = load_manifest(_manifest(cfg), splits=("score",))
    score_set = select(volumes, split.score_set)
    if not score_set:
        raise _Exit(EXIT_DATASET, "empty score set: the manifest has no volumes tagged 'score'")
    cal = scorer.calibrate(score_set, model, cfg.preprocess, cfg.use_finemap)
    path = Path(cfg.paths.calibration_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scorer.save_calibration(cal, path)
    print(f"m_bar={cal.m_bar!r} m_max={cal.m_max!r} s_bar={cal.s_bar!r} s_max={cal.s_max!r} "
          f"pooled_m={cal.pooled.m!r} pooled_s={cal.pooled.s!r}")
    return EXIT_OK


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, Label):
        return v.value
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_scores(reports: Sequence[scorer.ConfidenceReport], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for r in reports:
            row = scorer.report_row(r)
            w.writerow([_fmt(row[c]) for c in SCORE_COLUMNS])


def read_scores(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != SCORE_COLUMNS:
        raise FormatError(f"{path}: unexpected columns {tuple(rows[0].keys())}")
    return rows


def cmd_score(args, cfg: PipelineConfig) -> int:
    model, digest = _load_model(cfg)
    cal_path = Path(cfg.paths.calibration_path)
    if not cal_path.is_file():
        raise _Exit(EXIT_MISSING, f"calibration not found: {cal_path} (run `calibrate` first)")
    cal = scorer.load_calibration(cal_path, expected_sha256=digest)
    volumes, split = load_manifest(_manifest(cfg), splits=("test",))
    reports = [scorer.score_volume(v, model, cfg.preprocess, cal, cfg.thresholds, cfg.use_finemap)
               for v in select(volumes, split.test_set)]
    out = Path(args.out or Path(cfg.paths.report_dir) / "scores.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(reports, out)
    print(f"scored {len(reports)} volumes -> {out}")
    return EXIT_OK


def evaluate_rows(rows: Sequence[dict], family: str) -> evaluator.EvalReport:
    """Evaluate one score column (or ``ms`` for the tied-threshold veto rule)."""
    if family == "ms":
        return evaluator.eval_ms([(float(r["s_score"]), float(r["m_score"]), Label(r["truth"])) for r in rows])
    items = []
    for r in rows:
        v = float(r[family])
        if math.isfinite(v):
            items.append(evaluator.LabeledScore(r["scan_id"], Label(r["truth"]), v, scorer.POLARITY[family]))
        else:
            log.warning("%s: %s is undefined (degenerate), excluded", r["scan_id"], family)
    return evaluator.eval_score(items)


def cmd_eval(args, cfg: PipelineConfig) -> int:
    report_dir = Path(cfg.paths.report_dir)
    scores_path = Path(args.scores or report_dir / "scores.csv")
    if not scores_path.is_file():
        raise _Exit(EXIT_IO, f"score file not found: {scores_path}")
    rows = read_scores(scores_path)
    truths = {r["truth"] for r in rows}
    if not {Label.BONAFIDE.value, Label.PA.value} <= truths:
        raise _Exit(EXIT_SINGLE_CLASS, f"{scores_path} needs both bonafide and PA rows, found {sorted(truths)}")
    families = [args.score] if args.score else list(EVAL_FAMILIES)
    report_dir.mkdir(parents=True, exist_ok=True)
    summary = ["score,err,tpr@0.10,tpr@0.05,threshold"]
    for fam in families:
        rep = evaluate_rows(rows, fam)
        evaluator.export_report(rep, report_dir / f"eval_{fam}.csv")
        summary.append(f"{fam},{rep.err!r},{rep.tpr_at_fpr10!r},{rep.tpr_at_fpr5!r},"
                       f"{evaluator.format_threshold(rep.best_threshold)}")
    (report_dir / "summary.csv").write_text("\n".join(summary) + "\n", encoding="utf-8")
    with open(report_dir / "scatter.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s_score", "m_score", "truth"])
        for r in rows:
            w.writerow([r["s_score"], r["m_score"], r["truth"]])
    print("\n".join(summary))
    return EXIT_OK


# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", dest="paths.data_dir")
    p.add_argument("--model-path", dest="paths.model_path")
    p.add_argument("--calibration-path", dest="paths.calibration_path")
    p.add_argument("--report-dir", dest="paths.report_dir")
    p.add_argument("--target-height", type=int, dest="preprocess.target_height")
    p.add_argument("--target-width", type=int, dest="preprocess.target_width")
    p.add_argument("--no-denoise", action="store_const", const=False, dest="preprocess.denoise_enabled")
    p.add_argument("--no-finemap", action="store_const", const=False, dest="use_finemap")
    p.add_argument("--epochs", type=int, dest="ae.epochs")
    p.add_argument("--batch-size", type=int, dest="ae.batch_size")
    p.add_argument("--lr", type=float, dest="ae.learning_rate")
    p.add_argument("--base-channels", type=int, dest="ae.base_channels")
    p.add_argument("--s-thres", type=float, dest="thresholds.s_thres")
    p.add_argument("--m-thres", type=float, dest="thresholds.m_thres")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octpad", description=__doc__.split("\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog=__doc__.split("\n", 1)[1])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    _common(p)
    p.add_argument("--out", help="output directory (default: paths.data_dir)")
    p.add_argument("--model", type=int, default=8)
    p.add_argument("--score", type=int, default=4)
    p.add_argument("--test-bona", type=int, default=6)
    p.add_argument("--test-pai", type=int, default=6)
    p.add_argument("--pai-presets", nargs="+", default=list(synth.DEFAULT_PAI_PRESETS),
                   choices=[s for s in synth.PRESETS if s != synth.BONAFIDE])
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=192)
    p.add_argument("--bscans", type=int, default=16)
    p.add_argument("--speckle", type=float, default=0.1)
    p.add_argument("--jitter", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    for name, func, text in (("train", cmd_train, "train the autoencoder on the model split"),
                             ("calibrate", cmd_calibrate, "build score-set calibration")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("score", help="score every test volume")
    _common(p)
    p.add_argument("--out", help="score CSV path (default: <report_dir>/scores.csv)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate a score CSV")
    _common(p)
    p.add_argument("--scores", help="score CSV (default: <report_dir>/scores.csv)")
    p.add_argument("--score", choices=EVAL_FAMILIES, help="evaluate a single score family")
    p.set_defaults(func=cmd_eval)
    return parser


def _overrides(args) -> dict[str, object]:
    out: dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    for key, value in vars(args).items():
        if value is not None and ("." in key or key in ("seed", "use_finemap")):
            out[key] = value
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.config, _overrides(args))
        return args.func(args, cfg)
    except _Exit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ZeroPAViolation as exc:
        print(f"error: zero-PA violation: {exc}", file=sys.stderr)
        return EXIT_ZERO_PA
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CalibrationDegenerateError as exc:
        print(f"error: degenerate calibration: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (IncompatibleCheckpointError, CorruptionError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
