"""Training loops for the clean forecaster, robust forecaster, classifier and denoiser.

Every regimen computes gradients batch by batch but applies a single Adam
step at the end of each epoch, using the mean of the per-batch gradients.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable, Mapping, TextIO

import numpy as np

from . import numerics as nx
from .attack import (AttackConfig, UNIFORM_NONZERO, apply_mask, pgd_attack, project,
                     sample_mask)
from .data import WindowedDataset
from .networks import (TRAIN, ClassifierArch, DenoiserArch, ForecasterArch, Params,
                       classifier_forward, denoiser_forward, forecaster_forward, identity_denoiser,
                       init_params)

log = logging.getLogger(__name__)

FULL_MASK = "full"

IDENTITY_START = "identity"
RANDOM_START = "random"


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    epochs: int
    learning_rate: float
    weight_decay: float
    gamma: float
    scheduler_step: int
    batch_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.scheduler_step < 1:
            raise TrainingError(f"invalid hyperparameters: {self}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise TrainingError(f"invalid hyperparameters: {self}")

    @classmethod
    def defaults(cls, component: str, **overrides) -> "HyperParams":
        return replace(DEFAULTS[component], **overrides)


DEFAULTS = {
    "f1": HyperParams(10, 0.008, 0.2, 0.5, 5),
    "f2": HyperParams(15, 0.008, 0.2, 0.5, 5),
    "classifier": HyperParams(40, 0.01, 0.02, 0.5, 10),
    "denoiser": HyperParams(40, 0.005, 0.1, 0.5, 5),
}


def lr_schedule(epoch: int, base_lr: float, gamma: float, step_size: int) -> float:
    """Step decay: ``base_lr * gamma ** (epoch // step_size)``."""
    if step_size <= 0:
        raise TrainingError("scheduler step size must be positive")
    if epoch < 0:
        raise TrainingError("epoch must be nonnegative")
    return base_lr * gamma ** (epoch // step_size)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, tensors: Mapping[str, np.ndarray], **kw) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in tensors.items()},
                   {k: np.zeros_like(v) for k, v in tensors.items()}, **kw)


def epoch_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                 opt: OptimizerState, lr: float, weight_decay: float,
                 ) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam step, then decoupled decay ``p *= 1 - lr * weight_decay``."""
    if params.keys() != grads.keys():
        raise TrainingError("gradient names do not match parameter names")
    step = opt.step + 1
    b1, b2 = opt.beta1, opt.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = b1 * opt.m[name] + (1 - b1) * g
        v = b2 * opt.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        updated = p - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        new_p[name] = updated * (1.0 - lr * weight_decay)
        new_m[name], new_v[name] = m, v
    return new_p, OptimizerState(new_m, new_v, step, b1, b2, opt.eps)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    batches: list[np.ndarray]
    grads: dict[str, np.ndarray]
    before: Params
    after: Params


BatchLoss = Callable[[Params, Mapping[str, nx.Tensor], np.ndarray, np.random.Generator], nx.Tensor]


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    # separate streams so attack/mask draws never shift shuffling or dropout
    shuffle, drop, attack = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(shuffle), np.random.default_rng(drop),
            np.random.default_rng(attack))


def fit(params: Params, n: int, hp: HyperParams, batch_loss: BatchLoss,
        before_epoch: Callable[[int], None] | None = None,
        log_stream: TextIO | None = None,
        on_epoch: Callable[[EpochRecord], None] | None = None,
        shuffle_rng: np.random.Generator | None = None,
        dropout_rng: np.random.Generator | None = None) -> Params:
    """Generic epoch loop shared by all regimens.

    ``batch_loss(params, leaves, idx, rng)`` builds the loss of one batch of
    row indices using ``leaves`` as differentiable parameters.
    """
    if n < 1:
        raise TrainingError("empty dataset")
    params = params.copy()
    s_rng, d_rng, _ = _streams(hp.seed)
    shuffle_rng = shuffle_rng or s_rng
    dropout_rng = dropout_rng or d_rng
    opt = OptimizerState.create(params.tensors)
    for epoch in range(hp.epochs):
        lr = lr_schedule(epoch, hp.learning_rate, hp.gamma, hp.scheduler_step)
        if before_epoch is not None:
            before_epoch(epoch)
        order = shuffle_rng.permutation(n)
        batches = [order[i:i + hp.batch_size] for i in range(0, n, hp.batch_size)]
        total = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        losses = []
        for idx in batches:
            leaves = params.leaves()
            loss = batch_loss(params, leaves, idx, dropout_rng)
            grads = nx.grad(loss, [leaves[k] for k in total])
            for k, g in zip(total, grads):
                total[k] += g
            losses.append(float(loss.data))
        mean_grads = {k: g / len(batches) for k, g in total.items()}
        tensors, opt = epoch_update(params.tensors, mean_grads, opt, lr, hp.weight_decay)
        before = params
        params = params.copy()
        params.tensors = tensors
        epoch_loss = float(np.mean(losses))
        record = {"epoch": epoch, "loss": epoch_loss, "lr": lr}
        log.debug("epoch %d loss %.6f lr %g", epoch, epoch_loss, lr)
        if log_stream is not None:
            log_stream.write(json.dumps(record) + "\n")
        if on_epoch is not None:
            on_epoch(EpochRecord(epoch, lr, epoch_loss, batches, mean_grads, before, params))
    return params


# --------------------------------------------------------------------------
# adversarial examples shared by F2, C and D

@dataclass
class AdversarialPool:
    """PGD outputs at radius ``eps_f`` for every training window.

    The classifier's inputs are obtained by re-projecting onto ``eps_c``,
    which equals the second output of the attack.
    """

    X: np.ndarray
    X_adv: np.ndarray
    eps_f: float

    def at_radius(self, eps: float) -> np.ndarray:
        if eps > self.eps_f:
            raise TrainingError(f"pool radius {self.eps_f} is smaller than requested {eps}")
        return project(self.X_adv, self.X, eps)


def build_pool(f1: Params, dataset: WindowedDataset, eps_f: float,
               attack_cfg: AttackConfig = AttackConfig(), seed=None,
               chunk: int = 4096) -> AdversarialPool:
    """Attack ``f1`` on every window of ``dataset``.

    Rows are processed in chunks; the sign of the input gradient of a mean
    loss does not depend on how rows are grouped.
    """
    _require_trained(f1)
    rng = np.random.default_rng(attack_cfg.seed if seed is None else seed)
    parts = []
    for start in range(0, len(dataset), chunk):
        sl = slice(start, start + chunk)
        xf, _ = pgd_attack(f1, dataset.X[sl], dataset.Y[sl], attack_cfg, eps_f, eps_f, seed=rng)
        parts.append(xf)
    X_adv = np.concatenate(parts) if parts else dataset.X.copy()
    return AdversarialPool(dataset.X.copy(), X_adv, eps_f)


def _require_trained(f1: Params | None) -> None:
    if f1 is None or f1.kind != "forecaster":
        raise TrainingError("a trained clean forecaster (F1) is required")
    if not f1.meta.get("trained", False):
        raise TrainingError("F1 has not been trained")


def _draw_masks(rng: np.random.Generator, count: int, n: int, policy: str) -> np.ndarray:
    if policy == FULL_MASK:
        return np.ones((count, n), dtype=np.int64)
    return sample_mask(n, policy, rng, size=count)


class _PoolSource:
    """Per-epoch view of adversarial inputs: refreshed pool (optional) and fresh masks."""

    def __init__(self, f1, dataset, eps_f, attack_cfg, pool, refresh, mask_policy, rng):
        self.f1, self.dataset, self.eps_f = f1, dataset, eps_f
        self.attack_cfg, self.refresh, self.mask_policy, self.rng = attack_cfg, refresh, mask_policy, rng
        if pool is not None and pool.eps_f < eps_f:
            raise TrainingError("supplied pool was built with a smaller radius")
        self.pool = pool
        self.masks = None

    def start_epoch(self, epoch: int) -> None:
        if self.pool is None or self.refresh:
            seed = int(self.rng.integers(2**63))
            self.pool = build_pool(self.f1, self.dataset, self.eps_f, self.attack_cfg, seed)
        n_rows, n = self.dataset.X.shape
        self.masks = _draw_masks(self.rng, n_rows, n, self.mask_policy)

    def masked(self, idx: np.ndarray, eps: float) -> np.ndarray:
        return apply_mask(self.dataset.X[idx], self.pool.at_radius(eps)[idx], self.masks[idx])


# --------------------------------------------------------------------------
# regimens

def _finish(params: Params, component: str, hp: HyperParams, **extra) -> Params:
    params.meta = {"trained": True, "component": component, "epochs": hp.epochs,
                   "hyperparams": asdict(hp), **extra}
    return params


def train_f1(dataset: WindowedDataset, arch: ForecasterArch = ForecasterArch(),
             hp: HyperParams | None = None, log_stream=None, on_epoch=None) -> Params:
    """Empirical risk minimisation on clean windows."""
    hp = hp or HyperParams.defaults("f1")
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    X, Y = dataset.X, dataset.Y

    def batch_loss(p, leaves, idx, rng):
        return nx.mse_loss(forecaster_forward(p, X[idx], TRAIN, rng, leaves), Y[idx])

    params = fit(init_params(arch, hp.seed), len(dataset), hp, batch_loss,
                 log_stream=log_stream, on_epoch=on_epoch)
    return _finish(params, "f1", hp)


def train_f2(dataset: WindowedDataset, f1: Params, arch: ForecasterArch = ForecasterArch(),
             hp: HyperParams | None = None, eps_f: float = 0.3,
             attack_cfg: AttackConfig = AttackConfig(), pool: AdversarialPool | None = None,
             refresh_attack: bool = False, log_stream=None, on_epoch=None) -> Params:
    """Adversarial risk minimisation on fully poisoned, randomly masked windows.

    Inputs come from attacking ``f1``; F2's own parameters never enter the attack.
    """
    hp = hp or HyperParams.defaults("f2")
    _require_trained(f1)
    if eps_f < 0:
        raise TrainingError("eps_f must be nonnegative")
    _, _, attack_rng = _streams(hp.seed)
    src = _PoolSource(f1, dataset, eps_f, attack_cfg, pool, refresh_attack, UNIFORM_NONZERO, attack_rng)
    Y = dataset.Y

    def batch_loss(p, leaves, idx, rng):
        return nx.mse_loss(forecaster_forward(p, src.masked(idx, eps_f), TRAIN, rng, leaves), Y[idx])

    params = fit(init_params(arch, hp.seed), len(dataset), hp, batch_loss, src.start_epoch,
                 log_stream, on_epoch)
    return _finish(params, "f2", hp, eps_f=eps_f)


def classifier_batch(X_clean: np.ndarray, X_perturbed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First ceil(m/2) rows clean (label 0), the remaining floor(m/2) rows perturbed (label 1)."""
    m = len(X_clean)
    n_clean = (m + 1) // 2
    X = np.concatenate([X_clean[:n_clean], X_perturbed[n_clean:]])
    labels = np.concatenate([np.zeros(n_clean, dtype=np.int64), np.ones(m - n_clean, dtype=np.int64)])
    return X, labels


def train_classifier(dataset: WindowedDataset, f1: Params, arch: ClassifierArch = ClassifierArch(),
                     hp: HyperParams | None = None, eps_c: float = 0.3, eps_f: float = 0.3,
                     attack_cfg: AttackConfig = AttackConfig(), pool: AdversarialPool | None = None,
                     refresh_attack: bool = False, mask_policy: str = UNIFORM_NONZERO,
                     log_stream=None, on_epoch=None) -> Params:
    """Cross-entropy on half-clean, half-poisoned batches (poison at radius ``eps_c``)."""
    hp = hp or HyperParams.defaults("classifier")
    _require_trained(f1)
    if not 0 <= eps_c <= eps_f:
        raise TrainingError(f"need 0 <= eps_c <= eps_f, got eps_c={eps_c}, eps_f={eps_f}")
    _, _, attack_rng = _streams(hp.seed)
    src = _PoolSource(f1, dataset, eps_f, attack_cfg, pool, refresh_attack, mask_policy, attack_rng)
    X = dataset.X

    def batch_loss(p, leaves, idx, rng):
        xb, labels = classifier_batch(X[idx], src.masked(idx, eps_c))
        return nx.cross_entropy_loss(classifier_forward(p, xb, TRAIN, rng, leaves), labels)

    params = fit(init_params(arch, hp.seed), len(dataset), hp, batch_loss, src.start_epoch,
                 log_stream, on_epoch)
    return _finish(params, "classifier", hp, eps_c=eps_c, eps_f=eps_f)


def train_denoiser(dataset: WindowedDataset, f1: Params, arch: DenoiserArch = DenoiserArch(),
                   hp: HyperParams | None = None, eps_d: float = 0.3,
                   attack_cfg: AttackConfig = AttackConfig(), pool: AdversarialPool | None = None,
                   refresh_attack: bool = False, mask_policy: str = UNIFORM_NONZERO,
                   start: str = IDENTITY_START, log_stream=None, on_epoch=None) -> Params:
    """MSE reconstruction of clean windows from poisoned ones.

    ``mask_policy='full'`` perturbs every step. With ``start='identity'`` the
    network begins as the identity map on the training distribution; with one
    small Adam step per epoch a random start cannot travel far enough to beat
    simply returning the input.
    """
    hp = hp or HyperParams.defaults("denoiser")
    _require_trained(f1)
    if eps_d < 0:
        raise TrainingError("eps_d must be nonnegative")
    if start not in (IDENTITY_START, RANDOM_START):
        raise TrainingError(f"start must be 'identity' or 'random', got {start!r}")
    _, _, attack_rng = _streams(hp.seed)
    src = _PoolSource(f1, dataset, eps_d, attack_cfg, pool, refresh_attack, mask_policy, attack_rng)
    X = dataset.X

    def batch_loss(p, leaves, idx, rng):
        return nx.mse_loss(denoiser_forward(p, src.masked(idx, eps_d), TRAIN, rng, leaves), X[idx])

    if start == IDENTITY_START:
        initial = identity_denoiser(arch, X.mean(axis=0), X.std(axis=0), hp.seed)
    else:
        initial = init_params(arch, hp.seed)
    params = fit(initial, len(dataset), hp, batch_loss, src.start_epoch,
                 log_stream, on_epoch)
    return _finish(params, "denoiser", hp, eps_d=eps_d, start=start)
