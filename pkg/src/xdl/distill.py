"""Switch-routed cross-modal distillation and its ablation table.

A frozen teacher reads one view of each scene; a LoRA-adapted student reads
the other. Scenes the switch routes to DISTILL train the student on the
teacher's output; KEEP scenes use the student's own pre-finetuning prediction
(anti-forgetting) or are skipped.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dataset import Scene, SceneSet
from .gap import GapLabels
from .mcq import ClasswiseReport, evaluate
from .models import MlpClassifier, attach_lora, backward, forward
from .switch import Decision, SwitchModel, oracle_decide

log = logging.getLogger(__name__)

MODES = ("teacher_labels", "kl_logits", "kl_logits_plus_labels", "ground_truth")
SWITCHES = ("trained", "oracle", "always")


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "teacher_labels"
    anti_forgetting: bool = True
    temperature: float = 2.0
    epochs: int = 1
    micro_batch: int = 2
    accumulation: int = 4
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    lora_rank: int = 16
    lora_alpha: float | None = None
    lora_layers: tuple[int, ...] | None = None
    switch: str = "trained"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown distillation mode {self.mode!r}; expected one of {MODES}")
        if self.switch not in SWITCHES:
            raise ValueError(f"unknown switch kind {self.switch!r}; expected one of {SWITCHES}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.micro_batch < 1 or self.accumulation < 1 or self.epochs < 1:
            raise ValueError("micro_batch, accumulation and epochs must be >= 1")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation


# The five rows of the ablation table, in display order.
ABLATION_ROWS: dict[str, dict] = {
    "kl_logits": {"mode": "kl_logits"},
    "kl_logits_plus_labels": {"mode": "kl_logits_plus_labels"},
    "ground_truth_upper_bound": {"mode": "ground_truth"},
    "teacher_labels": {"mode": "teacher_labels"},
    "teacher_labels_no_anti_forgetting": {"mode": "teacher_labels", "anti_forgetting": False},
}


def _check_modalities(student: MlpClassifier, teacher: MlpClassifier) -> None:
    if student.modality == teacher.modality:
        raise ValueError(f"student and teacher both read the {student.modality} view")


def loss_rows(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    self_labels: np.ndarray,
    true_labels: np.ndarray,
    distill: np.ndarray,
    config: DistillConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row losses and dLoss/dlogits for the routed objective."""
    n, C = student_logits.shape
    losses = np.zeros(n)
    grads = np.zeros((n, C))
    d = np.asarray(distill, dtype=bool)
    if d.any():
        s, t = student_logits[d], teacher_logits[d]
        if config.mode == "ground_truth":
            l, g = nx.cross_entropy_rows(s, true_labels[d])
        elif config.mode == "teacher_labels":
            l, g = nx.cross_entropy_rows(s, np.argmax(t, axis=1))
        elif config.mode == "kl_logits":
            l, g = nx.kl_distill_rows(t, s, config.temperature)
        else:
            l1, g1 = nx.kl_distill_rows(t, s, config.temperature)
            l2, g2 = nx.cross_entropy_rows(s, np.argmax(t, axis=1))
            l, g = l1 + l2, g1 + g2
        losses[d], grads[d] = l, g
    k = ~d
    if config.anti_forgetting and k.any():
        l, g = nx.cross_entropy_rows(student_logits[k], self_labels[k])
        losses[k], grads[k] = l, g
    return losses, grads


def per_sample_loss(
    student: MlpClassifier,
    teacher: MlpClassifier,
    scene: Scene,
    decision: Decision,
    config: DistillConfig,
    snapshot: MlpClassifier,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and student gradients for one scene.

    ``snapshot`` is the frozen pre-finetuning student that supplies the
    anti-forgetting self-label.
    """
    _check_modalities(student, teacher)
    xs = scene.view(student.modality)
    s_logits = forward(student, xs)
    t_logits = forward(teacher, scene.view(teacher.modality))
    self_label = int(np.argmax(forward(snapshot, scene.view(snapshot.modality))))
    losses, dlog = loss_rows(
        s_logits[None, :],
        t_logits[None, :],
        np.array([self_label]),
        np.array([scene.class_id]),
        np.array([decision == Decision.DISTILL]),
        config,
    )
    return float(losses[0]), backward(student, xs, dlog[0])


@dataclass
class Router:
    """Turns a batch of scenes into DISTILL (True) / KEEP (False) decisions."""

    kind: str
    switch: SwitchModel | None = None
    gap: GapLabels | None = None

    def __post_init__(self):
        if self.kind not in SWITCHES:
            raise ValueError(f"unknown switch kind {self.kind!r}")
        if self.kind == "trained" and self.switch is None:
            raise ValueError("a trained router needs a switch model")
        if self.kind == "oracle" and self.gap is None:
            raise ValueError("an oracle router needs gap labels")

    def route(self, scenes: SceneSet) -> np.ndarray:
        if self.kind == "always":
            return np.ones(len(scenes), dtype=bool)
        if self.kind == "oracle":
            return oracle_decide(self.gap, scenes.class_ids)
        return self.switch.decide_many(scenes.views(self.switch.model.modality))


@dataclass
class DistillOutcome:
    config: DistillConfig
    student_before: MlpClassifier
    student_after: MlpClassifier
    before: dict[str, ClasswiseReport]
    after: dict[str, ClasswiseReport]
    distill_fraction: float
    batch_losses: list[float] = field(default_factory=list)

    def gain(self, split: str = "analysis") -> float:
        return self.after[split].overall - self.before[split].overall

    def class_deltas(self, split: str = "analysis") -> dict[int, float]:
        b, a = self.before[split], self.after[split]
        return {c: a.accuracy[c] - b.accuracy[c] for c in b.classes()}

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "student_modality": self.student_before.modality,
            "distill_fraction": self.distill_fraction,
            "splits": {
                split: {
                    "before": self.before[split].overall,
                    "after": self.after[split].overall,
                    "gain": self.gain(split),
                    "items_digest": self.before[split].items_digest,
                    "class_deltas": {str(c): d for c, d in self.class_deltas(split).items()},
                }
                for split in sorted(self.before)
            },
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _minibatch_grads(student, x, s_labels, t_logits, y, route, config) -> tuple[float, dict]:
    losses, dlog = loss_rows(forward(student, x), t_logits, s_labels, y, route, config)
    return float(losses.mean()), backward(student, x, dlog / len(y))


def distill_run(
    student: MlpClassifier,
    teacher: MlpClassifier,
    router: Router,
    scenes: SceneSet,
    config: DistillConfig = DistillConfig(),
    *,
    eval_k: int = 10,
    eval_seed: int = 0,
    eval_splits: tuple[str, ...] = ("analysis", "test"),
) -> DistillOutcome:
    """Finetune LoRA adapters on the student over the train split.

    Teacher logits, self-labels and routing decisions are computed once up
    front; all three models they come from are frozen for the whole run.
    """
    _check_modalities(student, teacher)
    if student.has_adapters:
        raise ValueError("distill_run expects an adapter-free base student")
    train = scenes.split("train")
    x = train.views(student.modality)
    y = train.class_ids
    t_logits = forward(teacher, train.views(teacher.modality))
    s_labels = np.argmax(forward(student, x), axis=1)
    route = router.route(train)

    live = attach_lora(student, config.lora_rank, config.lora_alpha, seed=config.seed, layers=config.lora_layers)
    rng = np.random.default_rng(config.seed)
    n = len(y)
    window = config.effective_batch
    steps_per_epoch = math.ceil(n / window)
    schedule = nx.LrSchedule(config.lr, config.epochs * steps_per_epoch, config.warmup_fraction)
    state = nx.OptimizerState(mode="adamw", weight_decay=config.weight_decay)
    step = 0
    batch_losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, window):
            idx = order[start : start + window]
            micro = []
            window_loss = 0.0
            # a ragged final window splits unevenly; weight parts so the mean stays per-sample
            parts = np.array_split(idx, min(config.accumulation, len(idx)))
            for part in parts:
                loss, g = _minibatch_grads(live, x[part], s_labels[part], t_logits[part], y[part], route[part], config)
                w = len(part) * len(parts) / len(idx)
                micro.append({k: v * w for k, v in g.items()})
                window_loss += loss * len(part) / len(idx)
            grads = nx.accumulate_gradients(micro)
            live.set_params(nx.optimizer_step(state, live.params(), grads, nx.lr_at(schedule, step)))
            batch_losses.append(window_loss)
            step += 1

    before, after = {}, {}
    for split in eval_splits:
        before[split] = evaluate(student, scenes, split, student.modality, eval_k, eval_seed, "before")
        after[split] = evaluate(live, scenes, split, student.modality, eval_k, eval_seed, "after")
    return DistillOutcome(config, student, live, before, after, float(route.mean()), batch_losses)


def run_ablation(
    student0: MlpClassifier,
    teacher: MlpClassifier,
    router: Router,
    scenes: SceneSet,
    base: DistillConfig = DistillConfig(),
    rows: tuple[str, ...] = tuple(ABLATION_ROWS),
    **eval_kwargs,
) -> dict[str, DistillOutcome]:
    """One outcome per ablation row, all from the same base student and seed."""
    out = {}
    for name in rows:
        cfg = replace(base, **ABLATION_ROWS[name])
        log.info("ablation row %s", name)
        out[name] = distill_run(student0, teacher, router, scenes, cfg, **eval_kwargs)
    return out


def ablation_csv(outcomes: dict[str, DistillOutcome]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    splits = sorted(next(iter(outcomes.values())).after)
    w.writerow(["setting", *[f"{s}_accuracy" for s in splits]])
    for name in ABLATION_ROWS:
        if name in outcomes:
            w.writerow([name, *[f"{outcomes[name].after[s].overall:.6f}" for s in splits]])
    return buf.getvalue()
