"""Forecaster, classifier and denoiser architectures on top of :mod:`tsguard.numerics`."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import BatchNormState, Tensor

WINDOW = 3

TRAIN = "train"
EVAL = "eval"
MODES = (TRAIN, EVAL)


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ForecasterArch:
    hidden: int = 32
    dropout: float = 0.1
    window: int = WINDOW
    kind: str = field(default="forecaster", init=False)


@dataclass(frozen=True)
class ClassifierArch:
    blocks: int = 2
    channels: int = 8
    dropout: float = 0.1
    window: int = WINDOW
    kind: str = field(default="classifier", init=False)


@dataclass(frozen=True)
class DenoiserArch:
    hidden: int = 8
    dropout: float = 0.1
    window: int = WINDOW
    kind: str = field(default="denoiser", init=False)


ARCH_TYPES = {"forecaster": ForecasterArch, "classifier": ClassifierArch, "denoiser": DenoiserArch}


def arch_from_dict(d: Mapping) -> ForecasterArch | ClassifierArch | DenoiserArch:
    d = dict(d)
    kind = d.pop("kind")
    try:
        return ARCH_TYPES[kind](**d)
    except KeyError:
        raise ArchitectureError(f"unknown architecture kind {kind!r}") from None


class Params:
    """Trainable arrays plus batch-norm running statistics of one component.

    ``tensors`` preserves insertion order, which is also the serialization
    order.
    """

    def __init__(self, arch, tensors: dict[str, np.ndarray],
                 bn: dict[str, BatchNormState] | None = None, meta: dict | None = None):
        self.arch = arch
        self.tensors = tensors
        self.bn = bn or {}
        self.meta = meta or {}

    @property
    def kind(self) -> str:
        return self.arch.kind

    def copy(self) -> "Params":
        bn = {}
        for name, st in self.bn.items():
            new = BatchNormState(st.running_mean.size, st.momentum)
            new.running_mean = st.running_mean.copy()
            new.running_var = st.running_var.copy()
            bn[name] = new
        return Params(self.arch, {k: v.copy() for k, v in self.tensors.items()}, bn, dict(self.meta))

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "Params":
        out = self.copy()
        out.tensors = {k: np.array(tensors[k], dtype=np.float64) for k in self.tensors}
        return out

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad) for k, v in self.tensors.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Trainable tensors followed by running statistics, in file order."""
        out = dict(self.tensors)
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def equals(self, other: "Params") -> bool:
        a, b = self.state_arrays(), other.state_arrays()
        return (self.arch == other.arch and a.keys() == b.keys()
                and all(np.array_equal(a[k], b[k]) for k in a))


def parameter_count(arch) -> int:
    """Number of trainable scalars implied by an architecture descriptor."""
    if isinstance(arch, ForecasterArch):
        h = arch.hidden
        lstm1 = 1 * 4 * h + h * 4 * h + 4 * h
        lstm2 = h * 4 * h + h * 4 * h + 4 * h
        return lstm1 + lstm2 + 2 * (2 * h) + h + 1
    if isinstance(arch, ClassifierArch):
        c, total, c_in = arch.channels, 0, 1
        for _ in range(arch.blocks):
            total += (c * c_in * 1 + c) + (c * c_in * 3 + c) + 2 * (2 * c)
            c_in = 2 * c
        return total + c_in * 2 + 2
    if isinstance(arch, DenoiserArch):
        n, h = arch.window, arch.hidden
        return (n * h + h + 2 * h) + (h * n + n + 2 * n)
    raise ArchitectureError(f"not an architecture descriptor: {arch!r}")


def _validate(arch) -> None:
    dims = [arch.window] + [getattr(arch, a) for a in ("hidden", "blocks", "channels") if hasattr(arch, a)]
    if any(int(d) <= 0 for d in dims):
        raise ArchitectureError(f"dimensions must be positive: {arch}")
    if not 0.0 <= arch.dropout < 1.0:
        raise ArchitectureError(f"dropout must be in [0, 1): {arch}")


def init_params(arch, seed: int) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, forget bias 1.

    The forecaster's output layer starts at zero.
    """
    _validate(arch)
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    t: dict[str, np.ndarray] = {}
    bn: dict[str, BatchNormState] = {}
    if isinstance(arch, ForecasterArch):
        h = arch.hidden
        for layer, n_in in (("lstm1", 1), ("lstm2", h)):
            # gate column blocks are ordered input, forget, cell, output
            t[f"{layer}.w_ih"] = uniform((n_in, 4 * h), n_in)
            t[f"{layer}.w_hh"] = uniform((h, 4 * h), h)
            b = np.zeros(4 * h)
            b[h:2 * h] = 1.0
            t[f"{layer}.b"] = b
            t[f"{layer}.ln_gain"] = np.ones(h)
            t[f"{layer}.ln_bias"] = np.zeros(h)
        # zero head: the first epoch-level Adam step then moves only the head
        t["fc.w"] = np.zeros((h, 1))
        t["fc.b"] = np.zeros(1)
    elif isinstance(arch, ClassifierArch):
        c, c_in = arch.channels, 1
        for i in range(arch.blocks):
            t[f"block{i}.k1.w"] = uniform((c, c_in, 1), c_in)
            t[f"block{i}.k1.b"] = np.zeros(c)
            t[f"block{i}.k3.w"] = uniform((c, c_in, 3), 3 * c_in)
            t[f"block{i}.k3.b"] = np.zeros(c)
            t[f"block{i}.bn.gain"] = np.ones(2 * c)
            t[f"block{i}.bn.bias"] = np.zeros(2 * c)
            bn[f"block{i}.bn"] = BatchNormState(2 * c)
            c_in = 2 * c
        t["fc.w"] = uniform((c_in, 2), c_in)
        t["fc.b"] = np.zeros(2)
    elif isinstance(arch, DenoiserArch):
        n, h = arch.window, arch.hidden
        t["enc.w"] = uniform((n, h), n)
        t["enc.b"] = np.zeros(h)
        t["enc.bn.gain"] = np.ones(h)
        t["enc.bn.bias"] = np.zeros(h)
        bn["enc.bn"] = BatchNormState(h)
        t["dec.w"] = uniform((h, n), h)
        t["dec.b"] = np.zeros(n)
        t["dec.bn.gain"] = np.ones(n)
        t["dec.bn.bias"] = np.zeros(n)
        bn["dec.bn"] = BatchNormState(n)
    else:
        raise ArchitectureError(f"not an architecture descriptor: {arch!r}")
    return Params(arch, t, bn)


def identity_denoiser(arch: DenoiserArch, mean, std, seed: int) -> Params:
    """Denoiser parameters that reproduce their input (up to batch-norm epsilon).

    Encoder units ``2j`` and ``2j+1`` read ``+x_j`` and ``-x_j``; after batch
    norm and ReLU they hold the positive and negative parts of the standardised
    step, which the decoder subtracts. The output batch norm then rescales by
    ``std`` and shifts by ``mean`` (per-step statistics of the clean data).
    Spare hidden units keep their random encoder weights and feed nothing.
    """
    n, h = arch.window, arch.hidden
    if h < 2 * n:
        raise ArchitectureError(f"identity start needs hidden >= {2 * n}, got {h}")
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (n,))
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), (n,))
    p = init_params(arch, seed)
    enc = p.tensors["enc.w"]
    dec = np.zeros((h, n))
    for j in range(n):
        enc[:, 2 * j: 2 * j + 2] = 0.0
        enc[j, 2 * j], enc[j, 2 * j + 1] = 1.0, -1.0
        dec[2 * j, j], dec[2 * j + 1, j] = 1.0, -1.0
    p.tensors["dec.w"] = dec
    p.tensors["dec.bn.gain"] = std.copy()
    p.tensors["dec.bn.bias"] = mean.copy()
    return p


# --------------------------------------------------------------------------
# forward passes

def _inputs(params: Params, X, expected_kind: str) -> Tensor:
    if params.kind != expected_kind:
        raise ArchitectureError(f"expected {expected_kind} parameters, got {params.kind}")
    X = nx.as_tensor(X)
    if X.data.ndim != 2 or X.shape[1] != params.arch.window:
        raise ArchitectureError(
            f"expected input of shape (m, {params.arch.window}), got {X.shape}")
    return X


def _check_mode(mode: str) -> bool:
    if mode not in MODES:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == TRAIN


def _weights(params: Params, leaves: Mapping[str, Tensor] | None) -> Mapping[str, Tensor]:
    return leaves if leaves is not None else params.leaves(requires_grad=False)


def _lstm_layer(w, prefix, steps, h_size, m):
    w_ih, w_hh, b = w[f"{prefix}.w_ih"], w[f"{prefix}.w_hh"], w[f"{prefix}.b"]
    h = Tensor(np.zeros((m, h_size)))
    c = Tensor(np.zeros((m, h_size)))
    out = []
    for x_t in steps:
        z = nx.add(nx.add(nx.matmul(x_t, w_ih), nx.matmul(h, w_hh)), b)
        i = nx.sigmoid(nx.slice_(z, (slice(None), slice(0, h_size))))
        f = nx.sigmoid(nx.slice_(z, (slice(None), slice(h_size, 2 * h_size))))
        g = nx.tanh(nx.slice_(z, (slice(None), slice(2 * h_size, 3 * h_size))))
        o = nx.sigmoid(nx.slice_(z, (slice(None), slice(3 * h_size, 4 * h_size))))
        c = nx.add(nx.mul(f, c), nx.mul(i, g))
        h = nx.mul(o, nx.tanh(c))
        out.append(h)
    return out


def forecaster_forward(params: Params, X, mode: str = EVAL, rng=None,
                       leaves: Mapping[str, Tensor] | None = None) -> Tensor:
    """Two LSTM layers with layer norm and dropout, dense head on the last step, sigmoid.

    ``leaves`` substitutes differentiable tensors for the stored parameters.
    ``rng`` (int or Generator) drives dropout in train mode.
    """
    X = _inputs(params, X, "forecaster")
    training = _check_mode(mode)
    w = _weights(params, leaves)
    m, n = X.shape
    hs = params.arch.hidden
    p = params.arch.dropout
    if training:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    steps = [nx.slice_(X, (slice(None), slice(j, j + 1))) for j in range(n)]
    seq = _lstm_layer(w, "lstm1", steps, hs, m)
    seq = [nx.dropout(nx.layer_norm(h, w["lstm1.ln_gain"], w["lstm1.ln_bias"]), p, rng, training)
           for h in seq]
    seq = _lstm_layer(w, "lstm2", seq, hs, m)
    # only the final step feeds the head, so only it is normalised
    last = nx.layer_norm(seq[-1], w["lstm2.ln_gain"], w["lstm2.ln_bias"])
    last = nx.dropout(last, p, rng, training)
    out = nx.sigmoid(nx.add(nx.matmul(last, w["fc.w"]), w["fc.b"]))
    return nx.slice_(out, (slice(None), 0))


def classifier_forward(params: Params, X, mode: str = EVAL, rng=None,
                       leaves: Mapping[str, Tensor] | None = None) -> Tensor:
    """Inception-style 1D conv blocks, global average pooling, dense layer to 2 logits."""
    X = _inputs(params, X, "classifier")
    training = _check_mode(mode)
    w = _weights(params, leaves)
    arch = params.arch
    if training:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    m, n = X.shape
    h = nx.reshape(X, (m, 1, n))
    for i in range(arch.blocks):
        a = nx.conv1d(h, w[f"block{i}.k1.w"], w[f"block{i}.k1.b"], padding=0)
        b = nx.conv1d(h, w[f"block{i}.k3.w"], w[f"block{i}.k3.b"], padding=1)
        h = nx.concat([a, b], axis=1)
        h = nx.batch_norm(h, w[f"block{i}.bn.gain"], w[f"block{i}.bn.bias"],
                          params.bn[f"block{i}.bn"], training)
        h = nx.dropout(nx.relu(h), arch.dropout, rng, training)
    pooled = nx.global_avg_pool(h)
    return nx.add(nx.matmul(pooled, w["fc.w"]), w["fc.b"])


def classify(params: Params, X) -> np.ndarray:
    """0 for clean, 1 for perturbed; ties go to 0."""
    logits = classifier_forward(params, X, EVAL).data
    return labels_from_logits(logits)


def labels_from_logits(logits: np.ndarray) -> np.ndarray:
    return (logits[:, 1] > logits[:, 0]).astype(np.int64)


def denoiser_forward(params: Params, X, mode: str = EVAL, rng=None,
                     leaves: Mapping[str, Tensor] | None = None) -> Tensor:
    """Linear, batch norm, ReLU, dropout; then the mirrored decoder."""
    X = _inputs(params, X, "denoiser")
    training = _check_mode(mode)
    w = _weights(params, leaves)
    p = params.arch.dropout
    if training:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    h = X
    for part in ("enc", "dec"):
        h = nx.add(nx.matmul(h, w[f"{part}.w"]), w[f"{part}.b"])
        h = nx.batch_norm(h, w[f"{part}.bn.gain"], w[f"{part}.bn.bias"], params.bn[f"{part}.bn"], training)
        h = nx.dropout(nx.relu(h), p, rng, training)
    return h


FORWARD = {
    "forecaster": forecaster_forward,
    "classifier": classifier_forward,
    "denoiser": denoiser_forward,
}


def forward(params: Params, X, mode: str = EVAL, rng=None, leaves=None) -> Tensor:
    return FORWARD[params.kind](params, X, mode, rng, leaves)


# --------------------------------------------------------------------------
# serialization

_MAGIC = b"TSGP"


def save_params(params: Params, path) -> None:
    """Write a length-prefixed JSON header followed by little-endian float64 data."""
    arrays = params.state_arrays()
    header = {
        "arch": asdict(params.arch),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "bn": {k: {"momentum": st.momentum} for k, st in params.bn.items()},
        "meta": params.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    Path(path).write_bytes(_MAGIC + struct.pack("<Q", len(blob)) + blob + body)


def load_params(path) -> Params:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ArchitectureError(f"{path}: not a parameter file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    arch = arch_from_dict(header["arch"])
    offset = 12 + hlen
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(raw):
            raise ArchitectureError(f"{path}: truncated data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(raw):
        raise ArchitectureError(f"{path}: trailing data")
    bn = {}
    # file order, not the (sorted) header order, so a reload re-saves byte-identically
    bn_names = [e["name"][:-len(".running_mean")] for e in header["tensors"]
                if e["name"].endswith(".running_mean")]
    for name in bn_names:
        meta = header["bn"][name]
        st = BatchNormState(arrays[f"{name}.running_mean"].size, meta["momentum"])
        st.running_mean = arrays.pop(f"{name}.running_mean")
        st.running_var = arrays.pop(f"{name}.running_var")
        bn[name] = st
    return Params(arch, arrays, bn, header.get("meta", {}))
