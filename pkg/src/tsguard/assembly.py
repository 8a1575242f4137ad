"""Inference models M1-M4 built from separately trained components."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .networks import EVAL, Params, classify, denoiser_forward, forecaster_forward, load_params

Classifier = Union[Params, Callable[[np.ndarray], np.ndarray]]

REQUIRED = {
    "M1": ("f1",),
    "M2": ("f2",),
    "M3": ("classifier", "denoiser", "f1"),
    "M4": ("classifier", "f1", "f2"),
}

DIRECT = "F1"
DENOISED = "D->F1"
ROBUST = "F2"


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class ModelVariant:
    tag: str
    f1: Params | None = None
    f2: Params | None = None
    classifier: Classifier | None = None
    denoiser: Params | None = None

    def __post_init__(self):
        if self.tag not in REQUIRED:
            raise AssemblyError(f"unknown model tag {self.tag!r}")
        missing = [c for c in REQUIRED[self.tag] if getattr(self, c) is None]
        if missing:
            raise AssemblyError(f"{self.tag} is missing component(s): {', '.join(missing)}")
        windows = {p.arch.window for p in (self.f1, self.f2, self.denoiser, self.classifier)
                   if isinstance(p, Params)}
        if len(windows) > 1:
            raise AssemblyError(f"components disagree on window length: {sorted(windows)}")

    @property
    def has_classifier(self) -> bool:
        return self.tag in ("M3", "M4")


def assemble(tag: str, **components) -> ModelVariant:
    """Build a variant, ignoring components the tag does not use."""
    if tag not in REQUIRED:
        raise AssemblyError(f"unknown model tag {tag!r}")
    return ModelVariant(tag, **{k: components.get(k) for k in REQUIRED[tag]})


def _labels(c: Classifier, X: np.ndarray) -> np.ndarray:
    labels = classify(c, X) if isinstance(c, Params) else np.asarray(c(X))
    if labels.shape != (len(X),):
        raise AssemblyError(f"classifier returned shape {labels.shape} for {len(X)} rows")
    return labels.astype(np.int64)


def _forecast(p: Params, X: np.ndarray) -> np.ndarray:
    if len(X) == 0:
        return np.zeros(0)
    return forecaster_forward(p, X, EVAL).data


def predict(model: ModelVariant, X) -> np.ndarray:
    """Route each row independently and return one forecast per row."""
    X = np.asarray(X, dtype=np.float64)
    if model.tag == "M1":
        return _forecast(model.f1, X)
    if model.tag == "M2":
        return _forecast(model.f2, X)
    flagged = _labels(model.classifier, X) == 1
    out = np.empty(len(X))
    out[~flagged] = _forecast(model.f1, X[~flagged])
    if flagged.any():
        if model.tag == "M3":
            cleaned = denoiser_forward(model.denoiser, X[flagged], EVAL).data
            out[flagged] = _forecast(model.f1, cleaned)
        else:
            out[flagged] = _forecast(model.f2, X[flagged])
    return out


def routing_report(model: ModelVariant, X) -> dict[str, np.ndarray]:
    """Per-row classifier decision and the path taken (``F1``, ``D->F1`` or ``F2``)."""
    if not model.has_classifier:
        raise AssemblyError(f"{model.tag} has no classifier to route with")
    labels = _labels(model.classifier, np.asarray(X, dtype=np.float64))
    flagged_route = DENOISED if model.tag == "M3" else ROBUST
    routes = np.where(labels == 1, flagged_route, DIRECT).astype(object)
    return {"classification": labels, "route": routes}


# --------------------------------------------------------------------------
# manifests

def write_manifest(path, tag: str, component_paths: dict[str, str]) -> None:
    missing = [c for c in REQUIRED[tag] if c not in component_paths]
    if missing:
        raise AssemblyError(f"manifest for {tag} lacks {', '.join(missing)}")
    body = {"tag": tag, "components": {c: str(component_paths[c]) for c in REQUIRED[tag]}}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> ModelVariant:
    """Load a ``{"tag": ..., "components": {name: param_file}}`` manifest.

    Relative parameter paths resolve against the manifest's directory.
    """
    path = Path(path)
    body = json.loads(path.read_text(encoding="utf-8"))
    tag = body.get("tag")
    if tag not in REQUIRED:
        raise AssemblyError(f"{path}: unknown model tag {tag!r}")
    comps = body.get("components", {})
    loaded = {}
    for name in REQUIRED[tag]:
        if name not in comps:
            raise AssemblyError(f"{path}: {tag} needs component {name!r}")
        p = Path(comps[name])
        loaded[name] = load_params(p if p.is_absolute() else path.parent / p)
    return ModelVariant(tag, **loaded)
