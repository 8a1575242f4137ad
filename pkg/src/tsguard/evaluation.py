"""Evaluation grid over (eps_c, eps_f, eps_t), k and %pseq, plus report rendering."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

from .assembly import Classifier, ModelVariant, _labels, assemble, predict
from .attack import EXACT_K, AttackConfig, linf_distance, pgd_attack, sample_mask, apply_mask
from .data import WindowedDataset
from .networks import Params

MODELS = ("M1", "M2", "M3", "M4")
CSV_COLUMNS = ("eps_c", "eps_f", "eps_t", "k", "pseq", "model", "mse",
               "classifier_accuracy", "n_perturbed", "n_clean", "seed")
AUDIT_TOL = 1e-9

Predictor = Union[ModelVariant, Callable[[np.ndarray], np.ndarray]]


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    triplets: tuple[tuple[float, float, float], ...]
    ks: tuple[int, ...] = (1, 2, 3)
    pseqs: tuple[int, ...] = (20, 50, 100)
    attack: AttackConfig = AttackConfig()
    seed: int = 0
    models: tuple[str, ...] = MODELS

    def __post_init__(self):
        for ec, ef, et in self.triplets:
            if not 0 <= ec <= ef or et < 0:
                raise EvaluationError(f"invalid triplet {(ec, ef, et)}")
        if any(not 0 <= k <= 3 for k in self.ks):
            raise EvaluationError(f"k values must lie in 0..3: {self.ks}")
        if any(not 0 <= p <= 100 for p in self.pseqs):
            raise EvaluationError(f"pseq values must lie in 0..100: {self.pseqs}")
        unknown = set(self.models) - set(MODELS)
        if unknown:
            raise EvaluationError(f"unknown models {sorted(unknown)}")


@dataclass
class GridResult:
    eps_c: float
    eps_f: float
    eps_t: float
    k: int
    pseq: int
    mse: dict[str, float] = field(default_factory=dict)
    classifier_accuracy: float | None = None
    n_perturbed: int = 0
    n_clean: int = 0
    seed: int = 0

    @property
    def clean(self) -> bool:
        return self.k == 0 or self.pseq == 0


def cell_seed(grid_seed: int, *coords) -> int:
    """Order-independent seed for one grid cell."""
    ints = [int(grid_seed)] + [int(round(float(c) * 1_000_000)) for c in coords]
    return int(np.random.SeedSequence(ints).generate_state(1, dtype=np.uint32)[0])


def perturb_test_set(f1: Params, test: WindowedDataset, eps_t: float, k: int, pseq_percent: float,
                     attack_cfg: AttackConfig = AttackConfig(), seed: int = 0,
                     adversarial: np.ndarray | None = None,
                     ) -> tuple[WindowedDataset, np.ndarray]:
    """Poison ``floor(pseq * N / 100)`` random rows on exactly ``k`` random steps each.

    ``adversarial`` may carry precomputed PGD outputs for all rows at radius
    ``eps_t``; otherwise only the selected rows are attacked.
    """
    if not 0 <= pseq_percent <= 100:
        raise EvaluationError(f"pseq must be in [0, 100], got {pseq_percent}")
    n_rows, n = test.X.shape
    if not 0 <= k <= n:
        raise EvaluationError(f"k must be in [0, {n}], got {k}")
    flags = np.zeros(n_rows, dtype=np.int64)
    if k == 0 or pseq_percent == 0 or n_rows == 0:
        return test, flags
    rng = np.random.default_rng(seed)
    count = int(pseq_percent * n_rows // 100)
    rows = np.sort(rng.choice(n_rows, size=count, replace=False))
    masks = sample_mask(n, EXACT_K, rng, k=k, size=count)
    if adversarial is None:
        x_adv, _ = pgd_attack(f1, test.X[rows], test.Y[rows], attack_cfg, eps_t, eps_t, seed=rng)
    else:
        x_adv = np.asarray(adversarial)[rows]
    X = test.X.copy()
    X[rows] = apply_mask(test.X[rows], x_adv, masks)
    flags[rows] = 1
    return test.with_inputs(X), flags


def audit_bounds(original: WindowedDataset, perturbed: WindowedDataset, flags: np.ndarray,
                 eps_t: float) -> None:
    """Re-check the radius bound on every row and that unflagged rows are untouched."""
    dist = linf_distance(perturbed.X, original.X)
    if np.any(dist[flags == 1] > eps_t + AUDIT_TOL):
        raise EvaluationError(f"perturbed row exceeds eps_t={eps_t}")
    if np.any(dist[flags == 0] != 0):
        raise EvaluationError("unflagged row was modified")


def station_mse(pred: np.ndarray, dataset: WindowedDataset) -> float:
    """Per-station MSE, averaged uniformly over stations."""
    if len(dataset) == 0:
        raise EvaluationError("empty test set")
    err = (np.asarray(pred) - dataset.Y) ** 2
    _, inverse = np.unique(dataset.station_ids, return_inverse=True)
    sums = np.bincount(inverse, weights=err)
    counts = np.bincount(inverse)
    return float(np.mean(sums / counts))


def evaluate_mse(model: Predictor, dataset: WindowedDataset) -> float:
    if len(dataset) == 0:
        raise EvaluationError("empty test set")
    pred = predict(model, dataset.X) if isinstance(model, ModelVariant) else np.asarray(model(dataset.X))
    return station_mse(pred, dataset)


def evaluate_classifier_accuracy(c: Classifier, X, flags) -> float:
    X = np.asarray(X, dtype=np.float64)
    flags = np.asarray(flags)
    if flags.shape != (len(X),):
        raise EvaluationError(f"{len(flags)} flags for {len(X)} rows")
    if len(X) == 0:
        raise EvaluationError("empty test set")
    return float(np.mean(_labels(c, X) == flags))


def _models_for(spec: GridSpec, comps: Mapping[str, Params]) -> dict[str, ModelVariant]:
    return {tag: assemble(tag, **comps) for tag in spec.models}


def run_grid(spec: GridSpec, components: Mapping[tuple[float, float], Mapping[str, Params]],
             test: WindowedDataset) -> list[GridResult]:
    """One clean row per triplet followed by every (k, pseq) perturbed cell.

    ``components`` maps ``(eps_c, eps_f)`` to the trained ``f1``, ``f2``,
    ``classifier`` and ``denoiser``. Within a cell every model sees the same
    perturbed test set.
    """
    results = []
    attacked: dict[tuple[int, float], np.ndarray] = {}
    for triplet in spec.triplets:
        ec, ef, et = triplet
        try:
            comps = components[(ec, ef)]
        except KeyError:
            raise EvaluationError(f"no trained components for (eps_c, eps_f) = {(ec, ef)}") from None
        models = _models_for(spec, comps)
        clf = comps.get("classifier")
        cells = [(0, 0)] + [(k, p) for k in spec.ks for p in spec.pseqs if k and p]
        for k, pseq in cells:
            seed = 0 if (k, pseq) == (0, 0) else cell_seed(spec.seed, ec, ef, et, k, pseq)
            if (k, pseq) == (0, 0):
                ds, flags = test, np.zeros(len(test), dtype=np.int64)
            else:
                key = (id(comps["f1"]), et)
                if key not in attacked:
                    attacked[key], _ = pgd_attack(comps["f1"], test.X, test.Y, spec.attack, et, et,
                                                  seed=cell_seed(spec.seed, et))
                ds, flags = perturb_test_set(comps["f1"], test, et, k, pseq, spec.attack, seed,
                                             adversarial=attacked[key])
                audit_bounds(test, ds, flags, et)
            res = GridResult(ec, ef, et, k, pseq, seed=seed,
                             n_perturbed=int(flags.sum()), n_clean=int(len(flags) - flags.sum()))
            for tag, model in models.items():
                res.mse[tag] = evaluate_mse(model, ds)
            if clf is not None:
                res.classifier_accuracy = evaluate_classifier_accuracy(clf, ds.X, flags)
            results.append(res)
    return results


# --------------------------------------------------------------------------
# reports

def _fmt_float(x: float) -> str:
    return repr(float(x))


def to_rows(results: Iterable[GridResult]) -> list[dict]:
    rows = []
    for r in results:
        for model, mse in r.mse.items():
            rows.append({
                "eps_c": r.eps_c, "eps_f": r.eps_f, "eps_t": r.eps_t, "k": r.k, "pseq": r.pseq,
                "model": model, "mse": mse,
                "classifier_accuracy": r.classifier_accuracy,
                "n_perturbed": r.n_perturbed, "n_clean": r.n_clean, "seed": r.seed,
            })
    return rows


def render_csv(results: Sequence[GridResult]) -> str:
    if not results:
        raise EvaluationError("no results to render")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in to_rows(results):
        acc = row["classifier_accuracy"]
        writer.writerow([
            _fmt_float(row["eps_c"]), _fmt_float(row["eps_f"]), _fmt_float(row["eps_t"]),
            row["k"], row["pseq"], row["model"], _fmt_float(row["mse"]),
            "" if acc is None else _fmt_float(acc),
            row["n_perturbed"], row["n_clean"], row["seed"],
        ])
    return buf.getvalue()


def read_csv(text: str) -> list[GridResult]:
    """Inverse of :func:`render_csv`."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
        raise EvaluationError(f"unexpected results header: {reader.fieldnames}")
    out: dict[tuple, GridResult] = {}
    for row in reader:
        key = (float(row["eps_c"]), float(row["eps_f"]), float(row["eps_t"]), int(row["k"]), int(row["pseq"]))
        res = out.get(key)
        if res is None:
            acc = row["classifier_accuracy"]
            res = out[key] = GridResult(*key, classifier_accuracy=float(acc) if acc else None,
                                        n_perturbed=int(row["n_perturbed"]),
                                        n_clean=int(row["n_clean"]), seed=int(row["seed"]))
        res.mse[row["model"]] = float(row["mse"])
    return list(out.values())


def format_mse(x: float) -> str:
    return f"{x:.4f}"


def format_accuracy(x: float) -> str:
    """Fraction rendered as a percentage with two decimals (0.60934 -> '60.93')."""
    return f"{100.0 * x:.2f}"


def _triplet_label(r: GridResult) -> str:
    return f"({r.eps_c:g}, {r.eps_f:g}, {r.eps_t:g})"


def render_markdown(results: Sequence[GridResult]) -> str:
    """Pivot tables: %pseq down the rows, (triplet, k) across the columns.

    The clean row (pseq 0) repeats its value under every k of its triplet.
    """
    if not results:
        raise EvaluationError("no results to render")
    triplets = list(dict.fromkeys((r.eps_c, r.eps_f, r.eps_t) for r in results))
    ks = sorted({r.k for r in results if not r.clean}) or [0]
    pseqs = sorted({0 if r.clean else r.pseq for r in results})
    models = list(dict.fromkeys(m for r in results for m in r.mse))
    lookup = {}
    for r in results:
        t = (r.eps_c, r.eps_f, r.eps_t)
        if r.clean:
            for k in ks:
                lookup[(t, k, 0)] = r
        else:
            lookup[(t, r.k, r.pseq)] = r
    columns = [(t, k) for t in triplets for k in ks]
    header = "| %pseq | " + " | ".join(
        f"({t[0]:g}, {t[1]:g}, {t[2]:g}) k={k}" for t, k in columns) + " |"
    rule = "|---|" + "---|" * len(columns)

    def table(cell) -> list[str]:
        lines = [header, rule]
        for p in pseqs:
            vals = []
            for t, k in columns:
                r = lookup.get((t, k, p))
                vals.append(cell(r) if r is not None else "")
            lines.append(f"| {p} | " + " | ".join(vals) + " |")
        return lines

    out = ["# Evaluation report", ""]
    for m in models:
        out += [f"## {m} MSE", ""]
        out += table(lambda r, m=m: format_mse(r.mse[m]) if m in r.mse else "")
        out.append("")
    if any(r.classifier_accuracy is not None for r in results):
        out += ["## Classifier accuracy (%)", ""]
        out += table(lambda r: "" if r.classifier_accuracy is None else format_accuracy(r.classifier_accuracy))
        out.append("")
    return "\n".join(out)


def render_report(results: Sequence[GridResult], format: str = "markdown") -> str:
    if format == "csv":
        return render_csv(results)
    if format == "markdown":
        return render_markdown(results)
    raise EvaluationError(f"unknown report format {format!r}")
