"""Small deterministic numeric kernel: losses, optimizers, schedules, gradient oracle.

Everything runs in float64. Vector functions take 1-D arrays; the ``*_rows``
variants take a ``(N, C)`` batch and return per-row losses and per-row
gradients so callers decide how to reduce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

Array = np.ndarray


class NonFiniteError(FloatingPointError, ValueError):
    """Raised when a NaN or Inf enters or leaves a numeric operation."""


def check_finite(x: Array, what: str = "value") -> Array:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite {what}")
    return x


def _as_vector(x, what: str) -> Array:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{what} must be a non-empty 1-D vector, got shape {arr.shape}")
    return check_finite(arr, what)


def _as_rows(x, what: str) -> Array:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ValueError(f"{what} must be a (N, C) matrix with C > 0, got shape {arr.shape}")
    return check_finite(arr, what)


def log_softmax_rows(logits: Array) -> Array:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_rows(logits: Array) -> Array:
    logits = _as_rows(logits, "logits")
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits) -> Array:
    """Max-shifted softmax of a single logit vector."""
    z = _as_vector(logits, "logits")
    e = np.exp(z - z.max())
    return e / e.sum()


def cross_entropy(logits, target: int) -> tuple[float, Array]:
    """Return ``(-log softmax(logits)[target], softmax(logits) - onehot(target))``."""
    z = _as_vector(logits, "logits")
    target = int(target)
    if not 0 <= target < z.size:
        raise ValueError(f"target {target} out of range for {z.size} classes")
    logp = log_softmax_rows(z)
    grad = np.exp(logp)
    grad[target] -= 1.0
    return float(-logp[target]), grad


def cross_entropy_rows(logits, targets) -> tuple[Array, Array]:
    z = _as_rows(logits, "logits")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (z.shape[0],):
        raise ValueError(f"targets shape {t.shape} does not match {z.shape[0]} rows")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise ValueError(f"target out of range for {z.shape[1]} classes")
    logp = log_softmax_rows(z)
    rows = np.arange(z.shape[0])
    grad = np.exp(logp)
    grad[rows, t] -= 1.0
    return -logp[rows, t], grad


def kl_distill_loss(teacher_logits, student_logits, temperature: float) -> tuple[float, Array]:
    """Temperature-scaled forward KL, ``T^2 * KL(softmax(t/T) || softmax(s/T))``.

    The gradient is with respect to the student logits and equals
    ``T * (softmax(s/T) - softmax(t/T))``.
    """
    t = _as_vector(teacher_logits, "teacher logits")
    s = _as_vector(student_logits, "student logits")
    losses, grads = kl_distill_rows(t[None, :], s[None, :], temperature)
    return float(losses[0]), grads[0]


def kl_distill_rows(teacher_logits, student_logits, temperature: float) -> tuple[Array, Array]:
    t = _as_rows(teacher_logits, "teacher logits")
    s = _as_rows(student_logits, "student logits")
    if t.shape != s.shape:
        raise ValueError(f"teacher/student shape mismatch: {t.shape} vs {s.shape}")
    if not (temperature > 0 and math.isfinite(temperature)):
        raise ValueError(f"temperature must be positive, got {temperature}")
    log_p = log_softmax_rows(t / temperature)
    log_q = log_softmax_rows(s / temperature)
    p = np.exp(log_p)
    kl = np.sum(p * (log_p - log_q), axis=1)
    # clamp the tiny negative rounding residue of identical distributions
    kl = np.maximum(kl, 0.0)
    grad = temperature * (np.exp(log_q) - p)
    return temperature**2 * kl, grad


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup followed by cosine decay to zero."""

    peak_lr: float
    total_steps: int
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be non-negative")

    @property
    def warmup_steps(self) -> float:
        return self.warmup_fraction * self.total_steps


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    warm = schedule.warmup_steps
    if step < warm:
        return schedule.peak_lr * step / warm
    progress = (step - warm) / (schedule.total_steps - warm)
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Adam / AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    mode: str = "adam"  # "adam" or "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")


def optimizer_step(
    state: OptimizerState,
    params: Mapping[str, Array],
    grads: Mapping[str, Array],
    lr: float,
) -> dict[str, Array]:
    """Apply one bias-corrected Adam(W) update.

    Only names present in ``grads`` are updated; the rest of ``params`` is
    passed through untouched. ``state`` is advanced in place and new arrays are
    returned for the updated parameters.
    """
    missing = set(grads) - set(params)
    if missing:
        raise KeyError(f"gradients for unknown parameters: {sorted(missing)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name}: grad {g.shape} vs param {params[name].shape}")
        if name in state.m and state.m[name].shape != g.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = dict(params)
    for name in sorted(grads):
        g = check_finite(np.asarray(grads[name], dtype=np.float64), f"gradient {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = params[name]
        if state.mode == "adamw" and state.weight_decay:
            p = p - lr * state.weight_decay * p
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def accumulate_gradients(micro_grads: Sequence[Mapping[str, Array]]) -> dict[str, Array]:
    """Element-wise mean over a window of micro-batch gradient sets."""
    if not micro_grads:
        raise ValueError("cannot accumulate an empty list of gradients")
    keys = set(micro_grads[0])
    for g in micro_grads[1:]:
        if set(g) != keys:
            raise ValueError("micro-batch gradient sets have different parameter names")
        for k in keys:
            if g[k].shape != micro_grads[0][k].shape:
                raise ValueError(f"shape mismatch in micro-batch gradients for {k}")
    n = len(micro_grads)
    return {k: sum(g[k] for g in micro_grads) / n for k in sorted(keys)}


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Array], float], params, h: float = 1e-5, order: int = 2) -> Array:
    """Central-difference gradient of scalar ``f`` at ``params`` (any shape).

    ``order=2`` is the three-point stencil; ``order=4`` the five-point one, whose O(h^4) truncation
    allows a larger ``h`` and so less rounding noise on small gradient entries.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    offsets = (1, -1) if order == 2 else (2, 1, -1, -2)
    weights = (1, -1) if order == 2 else (-1, 8, -8, 1)
    denom = 2 * h if order == 2 else 12 * h
    x = np.array(params, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for k in offsets:
            flat[i] = orig + k * h
            vals.append(float(f(x)))
        flat[i] = orig
        if not all(math.isfinite(v) for v in vals):
            raise NonFiniteError(f"f returned a non-finite value at coordinate {i}")
        gflat[i] = sum(w * v for w, v in zip(weights, vals)) / denom
    return grad


def max_relative_error(a: Array, b: Array, floor: float = 1e-8) -> float:
    """``max |a-b| / max(|a|, |b|, floor)``, the metric used for gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
