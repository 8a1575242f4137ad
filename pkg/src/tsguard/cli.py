"""Command-line pipeline: ``synth`` -> ``train`` -> ``eval`` -> ``report``.

Stages exchange files under the output directory::

    <out>/data.csv
    <out>/components/f1.tsgp                      (+ .log.jsonl)
    <out>/components/f2_ef<eps_f>.tsgp
    <out>/components/denoiser_ef<eps_f>.tsgp
    <out>/components/classifier_ec<eps_c>_ef<eps_f>.tsgp
    <out>/results.csv, <out>/report.md
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import data as data_mod
from .attack import AttackConfig, AttackError, EpsilonBudget
from .evaluation import GridSpec, EvaluationError, read_csv, render_csv, render_markdown, run_grid
from .networks import (ArchitectureError, ClassifierArch, DenoiserArch, ForecasterArch, Params,
                       load_params, save_params)
from .numerics import NumericsError
from .training import (AdversarialPool, HyperParams, TrainingError, build_pool, train_classifier,
                       train_denoiser, train_f1, train_f2)

log = logging.getLogger("tsguard")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

COMPONENTS = ("f1", "f2", "classifier", "denoiser")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

DEFAULT_TRIPLETS = tuple((ec, 0.3, et) for ec in (0.3, 0.2) for et in (0.1, 0.15, 0.2, 0.3, 0.4))


class ConfigError(ValueError):
    pass


class MissingPrerequisite(RuntimeError):
    pass


@dataclass
class DataSource:
    path: str | None = None          # None -> <out>/data.csv
    n_stations: int = 100            # synthetic generator
    n_weeks: int = 8
    noise_scale: float = data_mod.DEFAULT_NOISE_SCALE
    stations: int | None = 100       # sample this many stations (None -> all)
    station_seed: int = 0
    train_weeks: int = 7
    test_weeks: int = 1


@dataclass
class ExperimentConfig:
    data: DataSource = field(default_factory=DataSource)
    seed: int = 0
    out: str = "run"
    jobs: int = 1
    forecaster: ForecasterArch = field(default_factory=ForecasterArch)
    classifier: ClassifierArch = field(default_factory=ClassifierArch)
    denoiser: DenoiserArch = field(default_factory=DenoiserArch)
    hyperparams: dict[str, dict[str, Any]] = field(default_factory=dict)
    triplets: tuple[tuple[float, float, float], ...] = DEFAULT_TRIPLETS
    attack: AttackConfig = field(default_factory=AttackConfig)
    ks: tuple[int, ...] = (1, 2, 3)
    pseqs: tuple[int, ...] = (20, 50, 100)

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        unknown = set(self.hyperparams) - set(COMPONENTS)
        if unknown:
            raise ConfigError(f"hyperparams for unknown components: {sorted(unknown)}")
        if not self.triplets:
            raise ConfigError("at least one (eps_c, eps_f, eps_t) triplet is required")
        try:
            for t in self.triplets:
                EpsilonBudget(*t)
            for c in COMPONENTS:
                self.hp(c)
            self.grid()
        except (AttackError, TrainingError, EvaluationError, TypeError) as e:
            raise ConfigError(str(e)) from e

    # derived views --------------------------------------------------------
    def hp(self, component: str) -> HyperParams:
        overrides = {"seed": self.seed, **self.hyperparams.get(component, {})}
        return HyperParams.defaults(component, **overrides)

    def grid(self) -> GridSpec:
        return GridSpec(self.triplets, self.ks, self.pseqs, self.attack, self.seed)

    @property
    def eps_fs(self) -> list[float]:
        return sorted({ef for _, ef, _ in self.triplets})

    @property
    def pairs(self) -> list[tuple[float, float]]:
        return sorted({(ec, ef) for ec, ef, _ in self.triplets})

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def data_path(self) -> Path:
        return Path(self.data.path) if self.data.path else self.out_dir / "data.csv"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls) if f.init}
    derived = {f.name for f in fields(cls) if not f.init}
    raw = {k: v for k, v in raw.items() if k not in derived}
    extra = set(raw) - names
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    nested = {"data": DataSource, "forecaster": ForecasterArch, "classifier": ClassifierArch,
              "denoiser": DenoiserArch, "attack": AttackConfig}
    for key, cls in nested.items():
        if key in raw:
            raw[key] = _build(cls, raw[key], key)
    for key in ("triplets", "ks", "pseqs"):
        if key in raw:
            try:
                raw[key] = tuple(tuple(float(x) for x in t) if key == "triplets" else t
                                 for t in raw[key])
            except TypeError as e:
                raise ConfigError(f"{key}: {e}") from e
    return _build(ExperimentConfig, raw, "config")


def load_config(path: str | None, overrides: dict[str, Any]) -> ExperimentConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(raw)


def parse_triplet(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"triplet must be three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise ConfigError(f"triplet must have three values, got {text!r}")
    return parts


# --------------------------------------------------------------------------
# file layout

def _tag(x: float) -> str:
    return format(x, "g")


def component_path(cfg: ExperimentConfig, component: str, eps_c: float | None = None,
                   eps_f: float | None = None) -> Path:
    d = cfg.out_dir / "components"
    if component == "f1":
        return d / "f1.tsgp"
    if component in ("f2", "denoiser"):
        return d / f"{component}_ef{_tag(eps_f)}.tsgp"
    return d / f"classifier_ec{_tag(eps_c)}_ef{_tag(eps_f)}.tsgp"


def _load_component(path: Path, component: str) -> Params:
    if not path.exists():
        raise MissingPrerequisite(f"{component} parameters not found at {path}; "
                                  f"run `train --component {component}` first")
    return load_params(path)


def load_series(cfg: ExperimentConfig) -> list[data_mod.StationSeries]:
    path = cfg.data_path
    if not path.exists():
        raise MissingPrerequisite(f"dataset not found at {path}; run `synth` first or set data.path")
    series = data_mod.load_csv(path)
    if cfg.data.stations is not None and cfg.data.stations != len(series):
        if cfg.data.stations > len(series):
            raise ConfigError(f"config asks for {cfg.data.stations} stations, "
                              f"dataset has {len(series)}")
        series = data_mod.select_stations(series, cfg.data.stations, cfg.data.station_seed)
    return series


def load_splits(cfg: ExperimentConfig) -> tuple[data_mod.WindowedDataset, data_mod.WindowedDataset]:
    return data_mod.prepare(load_series(cfg), cfg.data.train_weeks, cfg.data.test_weeks)


def _pool_seed(seed: int, eps_f: float) -> int:
    return int(np.random.SeedSequence([seed, 1, round(eps_f * 1e6)]).generate_state(1)[0])


# --------------------------------------------------------------------------
# stages

def cmd_synth(cfg: ExperimentConfig) -> Path:
    d = cfg.data
    series = data_mod.generate_synthetic(d.n_stations, d.n_weeks, cfg.seed, d.noise_scale)
    path = cfg.data_path
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        data_mod.write_csv(series, path)
    except OSError as e:
        raise ConfigError(f"cannot write {path}: {e}") from e
    stat = data_mod.mean_normalized_std(series)
    print(f"wrote {path}: {len(series)} stations x {len(series[0].values)} hours, "
          f"mean normalized std {stat:.4f}")
    return path


def _train_one(task: tuple) -> tuple[str, bytes, str]:
    """Train one component; returns (target path, parameter bytes, log text).

    Runs in worker processes, so everything it needs travels in ``task``.
    """
    import io
    import tempfile

    kind, cfg, f1, train, pool, eps_c, eps_f, path = task
    stream = io.StringIO()
    if kind == "f2":
        p = train_f2(train, f1, cfg.forecaster, cfg.hp("f2"), eps_f, cfg.attack, pool=pool,
                     log_stream=stream)
    elif kind == "denoiser":
        p = train_denoiser(train, f1, cfg.denoiser, cfg.hp("denoiser"), eps_f, cfg.attack,
                           pool=pool, log_stream=stream)
    else:
        p = train_classifier(train, f1, cfg.classifier, cfg.hp("classifier"), eps_c, eps_f,
                             cfg.attack, pool=pool, log_stream=stream)
    with tempfile.TemporaryDirectory() as tmp:
        target = Path(tmp) / "p.tsgp"
        save_params(p, target)
        blob = target.read_bytes()
    return path, blob, stream.getvalue()


def _write(path: Path, blob: bytes, log_text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    path.with_suffix(".log.jsonl").write_text(log_text, encoding="utf-8")
    log.info("wrote %s", path)


def cmd_train(cfg: ExperimentConfig, component: str) -> list[Path]:
    if component not in COMPONENTS + ("all",):
        raise ConfigError(f"unknown component {component!r}")
    train, _ = load_splits(cfg)
    written = []
    f1_path = component_path(cfg, "f1")
    if component in ("f1", "all"):
        import io
        stream = io.StringIO()
        f1 = train_f1(train, cfg.forecaster, cfg.hp("f1"), log_stream=stream)
        f1_path.parent.mkdir(parents=True, exist_ok=True)
        save_params(f1, f1_path)
        f1_path.with_suffix(".log.jsonl").write_text(stream.getvalue(), encoding="utf-8")
        log.info("wrote %s", f1_path)
        written.append(f1_path)
        if component == "f1":
            return written
    f1 = _load_component(f1_path, "f1")

    kinds = COMPONENTS[1:] if component == "all" else (component,)
    tasks = []
    pools: dict[float, AdversarialPool] = {}
    for kind in kinds:
        targets = ([(ec, ef) for ec, ef in cfg.pairs] if kind == "classifier"
                   else [(None, ef) for ef in cfg.eps_fs])
        for ec, ef in targets:
            if ef not in pools:
                log.info("attacking the training set at eps_f=%g", ef)
                pools[ef] = build_pool(f1, train, ef, cfg.attack, seed=_pool_seed(cfg.seed, ef))
            tasks.append((kind, cfg, f1, train, pools[ef], ec, ef,
                          str(component_path(cfg, kind, ec, ef))))
    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(tasks))) as ex:
            outputs = list(ex.map(_train_one, tasks))
    else:
        outputs = [_train_one(t) for t in tasks]
    for path, blob, log_text in outputs:
        _write(Path(path), blob, log_text)
        written.append(Path(path))
    return written


def load_components(cfg: ExperimentConfig) -> dict[tuple[float, float], dict[str, Params]]:
    f1 = _load_component(component_path(cfg, "f1"), "f1")
    comps = {}
    for ec, ef in cfg.pairs:
        comps[(ec, ef)] = {
            "f1": f1,
            "f2": _load_component(component_path(cfg, "f2", eps_f=ef), "f2"),
            "denoiser": _load_component(component_path(cfg, "denoiser", eps_f=ef),
                                        "denoiser"),
            "classifier": _load_component(component_path(cfg, "classifier", ec, ef),
                                          "classifier"),
        }
    return comps


def cmd_eval(cfg: ExperimentConfig) -> Path:
    comps = load_components(cfg)
    _, test = load_splits(cfg)
    results = run_grid(cfg.grid(), comps, test)
    out = cfg.out_dir / "results.csv"
    out.write_text(render_csv(results), encoding="utf-8")
    (cfg.out_dir / "report.md").write_text(render_markdown(results), encoding="utf-8")
    log.info("wrote %s and report.md (%d grid rows)", out, len(results))
    return out


def cmd_report(cfg: ExperimentConfig, fmt: str = "markdown") -> str:
    path = cfg.out_dir / "results.csv"
    if not path.exists():
        raise MissingPrerequisite(f"{path} not found; run `eval` first")
    results = read_csv(path.read_text(encoding="utf-8"))
    md = render_markdown(results)
    (cfg.out_dir / "report.md").write_text(md, encoding="utf-8")
    text = md if fmt == "markdown" else render_csv(results)
    sys.stdout.write(text)
    return text


# --------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="max concurrent component trainings")
    common.add_argument("--triplet", action="append", metavar="EC,EF,ET",
                        help="restrict to this (eps_c, eps_f, eps_t); repeatable")

    parser = argparse.ArgumentParser(prog="tsguard", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset CSV")
    tp = sub.add_parser("train", parents=[common], help="train components")
    tp.add_argument("--component", required=True, choices=COMPONENTS + ("all",))
    sub.add_parser("eval", parents=[common], help="run the evaluation grid")
    rp = sub.add_parser("report", parents=[common], help="render results.csv")
    rp.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("TSGUARD_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"TSGUARD_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        triplets = [parse_triplet(t) for t in args.triplet] if args.triplet else None
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "jobs": args.jobs,
                                        "triplets": triplets})
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.component)
        elif args.command == "eval":
            cmd_eval(cfg)
        else:
            cmd_report(cfg, args.format)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except MissingPrerequisite as e:
        log.error("missing prerequisite: %s", e)
        return EXIT_MISSING
    except (NumericsError, FloatingPointError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    except (data_mod.DataError, ArchitectureError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
