"""Masked PGD poisoning against the clean forecaster.

The attack ascends the sign of the input gradient of the forecaster's MSE,
projecting onto an l-infinity ball around the clean batch. The final iterate
is emitted twice: projected onto the forecaster radius and onto the (smaller)
classifier radius.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from . import numerics as nx
from .networks import EVAL, Params, forecaster_forward

Predictor = Union[Params, Callable[[nx.Tensor], nx.Tensor]]

ZERO = "zero"
UNIFORM = "uniform"

UNIFORM_NONZERO = "uniform_nonzero"
UNIFORM_ALL = "uniform_all"
EXACT_K = "exact_k"

BALL_TOL = 1e-9


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class EpsilonBudget:
    """l-infinity radii as fractions of the normalised range.

    ``eps_d`` always equals ``eps_f``.
    """

    eps_c: float = 0.3
    eps_f: float = 0.3
    eps_t: float = 0.3

    def __post_init__(self):
        if min(self.eps_c, self.eps_f, self.eps_t) < 0:
            raise AttackError(f"radii must be nonnegative: {self}")
        if self.eps_c > self.eps_f:
            raise AttackError(f"eps_c={self.eps_c} exceeds eps_f={self.eps_f}")

    @property
    def eps_d(self) -> float:
        return self.eps_f

    def triplet(self) -> tuple[float, float, float]:
        return (self.eps_c, self.eps_f, self.eps_t)


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 10
    alpha: float | None = None  # None -> 2.5 * eps / steps
    init: str = UNIFORM
    clamp_domain: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise AttackError("steps must be >= 1")
        if self.alpha is not None and self.alpha <= 0:
            raise AttackError("alpha must be positive")
        if self.init not in (ZERO, UNIFORM):
            raise AttackError(f"init must be 'zero' or 'uniform', got {self.init!r}")

    def step_size(self, eps: float) -> float:
        return self.alpha if self.alpha is not None else 2.5 * eps / self.steps


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _predict(f1: Predictor, X: nx.Tensor) -> nx.Tensor:
    if isinstance(f1, Params):
        return forecaster_forward(f1, X, EVAL)
    return f1(X)


def input_gradient(f1: Predictor, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Gradient of MSE(f1(X), Y) with respect to X, with f1 in eval mode."""
    Xt = nx.Tensor(X, requires_grad=True)
    loss = nx.mse_loss(_predict(f1, Xt), Y)
    (g,) = nx.grad(loss, [Xt])
    return g


def pgd_init(X, init: str = UNIFORM, eps: float = 0.0, seed=0) -> np.ndarray:
    if eps < 0:
        raise AttackError("eps must be nonnegative")
    X = np.asarray(X, dtype=np.float64)
    if init == ZERO:
        return X.copy()
    if init != UNIFORM:
        raise AttackError(f"unknown init {init!r}")
    return X + _rng(seed).uniform(-eps, eps, size=X.shape)


def pgd_step(f1: Predictor, X_t, X0, Y, alpha: float, eps: float,
             clamp_domain: bool = False) -> np.ndarray:
    """One signed-gradient ascent step followed by projection onto the eps-ball around ``X0``."""
    X_t = np.asarray(X_t, dtype=np.float64)
    X0 = np.asarray(X0, dtype=np.float64)
    if X_t.shape != X0.shape:
        raise AttackError(f"iterate shape {X_t.shape} != clean shape {X0.shape}")
    if np.max(np.abs(X_t - X0), initial=0.0) > eps + BALL_TOL:
        raise AttackError("iterate lies outside the eps-ball")
    g = input_gradient(f1, X_t, Y)
    return project(X_t + alpha * np.sign(g), X0, eps, clamp_domain)


def project(v, X0, eps: float, clamp_domain: bool = False) -> np.ndarray:
    out = nx.clamp(v, X0 - eps, X0 + eps)
    if clamp_domain:
        out = np.clip(out, 0.0, 1.0)
    return out


def pgd_attack(f1: Predictor, X, Y, cfg: AttackConfig = AttackConfig(),
               eps_f: float = 0.3, eps_c: float | None = None,
               seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Run ``cfg.steps`` PGD steps inside the eps_f ball and return ``(X_f, X_c)``.

    ``X_c`` is the final iterate re-projected onto the eps_c ball. ``seed``
    overrides ``cfg.seed`` for the random start.
    """
    eps_c = eps_f if eps_c is None else eps_c
    if eps_c < 0 or eps_f < 0:
        raise AttackError("radii must be nonnegative")
    if eps_c > eps_f:
        raise AttackError(f"eps_c={eps_c} exceeds eps_f={eps_f}")
    X0 = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if eps_f == 0:
        return X0.copy(), X0.copy()
    alpha = cfg.step_size(eps_f)
    Xt = pgd_init(X0, cfg.init, eps_f, cfg.seed if seed is None else seed)
    for _ in range(cfg.steps):
        Xt = pgd_step(f1, Xt, X0, Y, alpha, eps_f, cfg.clamp_domain)
    return Xt, project(Xt, X0, eps_c, cfg.clamp_domain)


# --------------------------------------------------------------------------
# masks

def all_masks(n: int, include_zero: bool = True) -> np.ndarray:
    masks = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
    return masks if include_zero else masks[1:]


def sample_mask(n: int, policy: str = UNIFORM_NONZERO, seed=0, k: int | None = None,
                size: int | None = None) -> np.ndarray:
    """Draw one mask (or ``size`` masks as rows) of length ``n``.

    Policies: ``uniform_all`` over all 2^n masks, ``uniform_nonzero`` over the
    2^n - 1 nonzero masks, ``exact_k`` uniform over masks with ``k`` ones.
    """
    rng = _rng(seed)
    count = 1 if size is None else size
    if policy == UNIFORM_ALL:
        out = rng.integers(0, 2, size=(count, n))
    elif policy == UNIFORM_NONZERO:
        pool = all_masks(n, include_zero=False)
        out = pool[rng.integers(0, len(pool), size=count)]
    elif policy == EXACT_K:
        if k is None or not 0 <= k <= n:
            raise AttackError(f"exact_k needs 0 <= k <= {n}, got {k}")
        scores = rng.random((count, n))
        out = np.zeros((count, n), dtype=np.int64)
        if k:
            top = np.argsort(scores, axis=1)[:, :k]
            np.put_along_axis(out, top, 1, axis=1)
    else:
        raise AttackError(f"unknown mask policy {policy!r}")
    out = out.astype(np.int64)
    return out[0] if size is None else out


def apply_mask(X, X_adv, q) -> np.ndarray:
    """``X + q * (X_adv - X)``: perturbed values where ``q`` is 1, clean ones elsewhere.

    ``q`` is either one mask of length n (shared by all rows) or an (m, n)
    array with one mask per row. Columns with ``q == 0`` come back
    bit-identical to ``X``.
    """
    X = np.asarray(X, dtype=np.float64)
    X_adv = np.asarray(X_adv, dtype=np.float64)
    q = np.asarray(q)
    if X.shape != X_adv.shape or q.shape not in (X.shape[-1:], X.shape):
        raise AttackError(f"shape mismatch: X {X.shape}, X_adv {X_adv.shape}, mask {q.shape}")
    if not np.all((q == 0) | (q == 1)):
        raise AttackError("mask entries must be 0 or 1")
    return X + q.astype(np.float64) * (X_adv - X)


def linf_distance(A, B) -> np.ndarray:
    """Per-row l-infinity distance."""
    return np.max(np.abs(np.asarray(A) - np.asarray(B)), axis=-1)
