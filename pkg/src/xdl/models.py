"""Tanh MLP classifiers with hand-written backprop and low-rank adapters.

The same class plays student, teacher, and (with two outputs) the switch.
Parameters are addressed by flat names: ``W{l}``, ``b{l}`` for host layers and
``A{l}``, ``B{l}`` for the adapter on layer ``l``.
"""

from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dataset import SceneSet

CHECKPOINT_MAGIC = b"XDLCKPT1\n"


@dataclass
class LoraAdapter:
    A: np.ndarray  # (rank, in)
    B: np.ndarray  # (out, rank)
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)


@dataclass
class MlpClassifier:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    modality: str = "audio"
    adapters: list[LoraAdapter | None] = field(default_factory=list)
    # host weights and biases frozen; only adapters train
    finetune: bool = False

    def __post_init__(self):
        if not self.adapters:
            self.adapters = [None] * len(self.weights)
        if len(self.biases) != len(self.weights) or len(self.adapters) != len(self.weights):
            raise ValueError("weights, biases and adapters must have one entry per layer")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[0],):
                raise ValueError(f"layer {l}: bias shape {b.shape} does not match weight {W.shape}")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input dim {W.shape[1]} does not chain")
            ad = self.adapters[l]
            if ad is not None and (ad.A.shape[1] != W.shape[1] or ad.B.shape[0] != W.shape[0]):
                raise ValueError(f"layer {l}: adapter shape does not match host weight")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def has_adapters(self) -> bool:
        return any(a is not None for a in self.adapters)

    def effective_weight(self, l: int) -> np.ndarray:
        ad = self.adapters[l]
        W = self.weights[l]
        return W if ad is None else W + ad.delta()

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{l}"], out[f"b{l}"] = W, b
            ad = self.adapters[l]
            if ad is not None:
                out[f"A{l}"], out[f"B{l}"] = ad.A, ad.B
        return out

    def trainable(self) -> list[str]:
        names = []
        for l in range(len(self.weights)):
            if not self.finetune:
                names += [f"W{l}", f"b{l}"]
            if self.adapters[l] is not None:
                names += [f"A{l}", f"B{l}"]
        return names

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for name, value in params.items():
            kind, l = name[0], int(name[1:])
            if kind == "W":
                self.weights[l] = value
            elif kind == "b":
                self.biases[l] = value
            elif kind == "A":
                self.adapters[l].A = value
            elif kind == "B":
                self.adapters[l].B = value
            else:
                raise KeyError(name)

    def copy(self) -> "MlpClassifier":
        return copy.deepcopy(self)


def init_classifier(
    input_dim: int,
    hidden_dims: Sequence[int],
    num_classes: int,
    seed: int,
    modality: str = "audio",
) -> MlpClassifier:
    """Fan-in scaled normal weights (std ``1/sqrt(fan_in)``), zero biases."""
    dims = [input_dim, *hidden_dims, num_classes]
    if any(int(d) < 1 for d in dims):
        raise ValueError(f"all layer dims must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return MlpClassifier(weights, biases, modality=modality)


def _check_input(model: MlpClassifier, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} does not match model input {model.input_dim}")
    return x, single


def _forward_trace(model: MlpClassifier, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    acts, eff = [x], []
    h = x
    last = len(model.weights) - 1
    for l in range(len(model.weights)):
        W = model.effective_weight(l)
        eff.append(W)
        h = h @ W.T + model.biases[l]
        if l < last:
            h = np.tanh(h)
        acts.append(h)
    return acts, eff


def forward(model: MlpClassifier, view) -> np.ndarray:
    """Logits for one view ``(D,)`` or a batch ``(N, D)``."""
    x, single = _check_input(model, view)
    logits = _forward_trace(model, x)[0][-1]
    return logits[0] if single else logits


def backward(model: MlpClassifier, view, dlogits) -> dict[str, np.ndarray]:
    """Gradients of the trainable parameters given ``dLoss/dlogits``.

    For a batch, ``dlogits`` rows are summed over, so pass per-row gradients
    already divided by the batch size when the loss is a mean.
    """
    x, single = _check_input(model, view)
    d = np.asarray(dlogits, dtype=np.float64)
    if single:
        d = d[None, :]
    if d.shape != (x.shape[0], model.num_classes):
        raise ValueError(f"dlogits shape {d.shape} does not match ({x.shape[0]}, {model.num_classes})")
    acts, eff = _forward_trace(model, x)
    wanted = set(model.trainable())
    grads: dict[str, np.ndarray] = {}
    for l in range(len(model.weights) - 1, -1, -1):
        a_in = acts[l]
        dW = d.T @ a_in
        if f"W{l}" in wanted:
            grads[f"W{l}"] = dW
            grads[f"b{l}"] = d.sum(axis=0)
        ad = model.adapters[l]
        if ad is not None and f"A{l}" in wanted:
            grads[f"B{l}"] = ad.scale * (dW @ ad.A.T)
            grads[f"A{l}"] = ad.scale * (ad.B.T @ dW)
        if l:
            d = (d @ eff[l]) * (1.0 - acts[l] ** 2)
    return grads


def attach_lora(
    model: MlpClassifier,
    rank: int,
    alpha: float | None = None,
    seed: int = 0,
    layers: Sequence[int] | None = None,
) -> MlpClassifier:
    """Return a copy with LoRA adapters attached and host weights frozen.

    Adapters go on every layer unless ``layers`` picks a subset. ``A`` is drawn
    with std ``1/sqrt(in)``; ``B`` starts at exactly zero so the forward pass is
    unchanged at attach time. ``alpha`` defaults to ``rank``.
    """
    targets = range(len(model.weights)) if layers is None else sorted(set(layers))
    for l in targets:
        if not 0 <= l < len(model.weights):
            raise ValueError(f"no layer {l} in a {len(model.weights)}-layer model")
        W = model.weights[l]
        if not 1 <= rank <= min(W.shape):
            raise ValueError(f"rank {rank} exceeds min dim {min(W.shape)} of layer {l} weight {W.shape}")
    alpha = float(rank if alpha is None else alpha)
    rng = np.random.default_rng(seed)
    out = model.copy()
    out.adapters = [None] * len(model.weights)
    for l in targets:
        W = model.weights[l]
        A = rng.standard_normal((rank, W.shape[1])) / math.sqrt(W.shape[1])
        out.adapters[l] = LoraAdapter(A, np.zeros((W.shape[0], rank)), alpha)
    out.finetune = True
    return out


def merge_lora(model: MlpClassifier) -> MlpClassifier:
    """Fold adapters into host weights and drop them."""
    out = model.copy()
    out.weights = [model.effective_weight(l) for l in range(len(model.weights))]
    out.adapters = [None] * len(model.weights)
    out.finetune = False
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    warmup_fraction: float = 0.1
    optimizer: str = "adam"
    weight_decay: float = 0.01
    seed: int = 0
    # labelled budget: use only the first n train scenes of each class
    max_per_class: int | None = None


def take_per_class(labels: np.ndarray, n: int | None) -> np.ndarray:
    """Indices of the first ``n`` occurrences of each label, in original order."""
    if n is None:
        return np.arange(labels.size)
    seen: dict[int, int] = {}
    keep = []
    for i, y in enumerate(labels):
        if seen.get(int(y), 0) < n:
            seen[int(y)] = seen.get(int(y), 0) + 1
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)


def fit(
    model: MlpClassifier,
    x: np.ndarray,
    y: np.ndarray,
    hyper: TrainHyper,
) -> tuple[MlpClassifier, list[float]]:
    """Mini-batch cross-entropy training on raw arrays; returns a new model."""
    if len(y) == 0:
        raise ValueError("cannot train on an empty split")
    model = model.copy()
    rng = np.random.default_rng(hyper.seed)
    n = len(y)
    per_epoch = math.ceil(n / hyper.batch_size)
    schedule = nx.LrSchedule(hyper.lr, hyper.epochs * per_epoch, hyper.warmup_fraction)
    state = nx.OptimizerState(mode=hyper.optimizer, weight_decay=hyper.weight_decay)
    curve = []
    step = 0
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            xb = x[idx]
            losses, dlog = nx.cross_entropy_rows(forward(model, xb), y[idx])
            total += losses.sum()
            grads = backward(model, xb, dlog / len(idx))
            model.set_params(nx.optimizer_step(state, model.params(), grads, nx.lr_at(schedule, step)))
            step += 1
        curve.append(total / n)
    return model, curve


def train_classifier(
    model: MlpClassifier,
    scenes: SceneSet,
    modality: str | None = None,
    hyper: TrainHyper = TrainHyper(),
    split: str = "train",
) -> tuple[MlpClassifier, list[float]]:
    """Train on one split's ``modality`` view; per-epoch mean loss is returned."""
    modality = modality or model.modality
    part = scenes.split(split)
    keep = take_per_class(part.class_ids, hyper.max_per_class)
    x = part.views(modality)[keep]
    y = part.class_ids[keep]
    trained, curve = fit(model, x, y, hyper)
    trained.modality = modality
    return trained, curve


def accuracy(model: MlpClassifier, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(forward(model, x), axis=1) == y))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _checkpoint_arrays(model: MlpClassifier) -> list[tuple[str, np.ndarray]]:
    return sorted(model.params().items())


def save_checkpoint(model: MlpClassifier, path) -> Path:
    """Binary dump: magic line, length-prefixed JSON header, raw little-endian float64."""
    arrays = _checkpoint_arrays(model)
    header = {
        "version": 1,
        "modality": model.modality,
        "finetune": model.finetune,
        "layers": len(model.weights),
        "alphas": [None if a is None else a.alpha for a in model.adapters],
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(len(blob).to_bytes(8, "little"))
    buf.write(blob)
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path = Path(path)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> MlpClassifier:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an xdl checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    n = int.from_bytes(raw[pos : pos + 8], "little")
    pos += 8
    header = json.loads(raw[pos : pos + n])
    pos += n
    if header.get("version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    arrays = {}
    for name, shape in header["arrays"]:
        size = int(np.prod(shape)) * 8
        arrays[name] = np.frombuffer(raw[pos : pos + size], dtype="<f8").reshape(shape).astype(np.float64)
        pos += size
    if pos != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    L = header["layers"]
    adapters = []
    for l in range(L):
        alpha = header["alphas"][l]
        adapters.append(None if alpha is None else LoraAdapter(arrays[f"A{l}"], arrays[f"B{l}"], alpha))
    return MlpClassifier(
        [arrays[f"W{l}"] for l in range(L)],
        [arrays[f"b{l}"] for l in range(L)],
        modality=header["modality"],
        adapters=adapters,
        finetune=header["finetune"],
    )
