"""The heuristic switch: a two-class MLP deciding, per scene, whether to distill."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import numerics as nx
from .gap import GapLabels, SwitchDataset
from .models import MlpClassifier, TrainHyper, fit, forward, init_classifier, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class Decision(str, Enum):
    DISTILL = "distill"
    KEEP = "keep"


@dataclass(frozen=True)
class SwitchHyper:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    warmup_fraction: float = 0.1
    hidden: tuple[int, ...] = (128,)
    seed: int = 0


@dataclass
class SwitchModel:
    model: MlpClassifier
    threshold: float = 0.5
    # set for degenerate (single-label) training data
    constant: int | None = None

    def p_distill(self, views) -> np.ndarray:
        x = np.atleast_2d(np.asarray(views, dtype=np.float64))
        if x.shape[1] != self.model.input_dim:
            raise ValueError(f"view dim {x.shape[1]} does not match switch input {self.model.input_dim}")
        if self.constant is not None:
            return np.full(x.shape[0], float(self.constant))
        return nx.softmax_rows(forward(self.model, x))[:, 1]

    def decide_many(self, views) -> np.ndarray:
        """Boolean array, True where the scene is routed to distillation."""
        return self.p_distill(views) > self.threshold


def switch_decide(switch: SwitchModel, view) -> Decision:
    """Distill iff P(distill) is strictly above the threshold."""
    view = np.asarray(view, dtype=np.float64)
    if view.ndim != 1:
        raise ValueError("switch_decide takes a single view")
    return Decision.DISTILL if switch.decide_many(view)[0] else Decision.KEEP


def oracle_decide(gap: GapLabels, class_ids) -> np.ndarray:
    """Routing read straight from the class-level gap labels."""
    return np.array([gap.labels[int(c)] == 1 for c in np.atleast_1d(class_ids)], dtype=bool)


def train_switch(dataset: SwitchDataset, hyper: SwitchHyper = SwitchHyper()) -> tuple[SwitchModel, float]:
    """Cross-entropy training with Adam and warmup+cosine; returns (switch, val accuracy)."""
    if len(dataset.train_y) == 0:
        raise ValueError("empty switch dataset")
    net = init_classifier(dataset.train_x.shape[1], hyper.hidden, 2, hyper.seed, modality=dataset.modality)
    if dataset.degenerate:
        majority = int(np.bincount(dataset.train_y, minlength=2).argmax())
        log.warning("switch trained on a single label; falling back to constant %d", majority)
        sw = SwitchModel(net, constant=majority)
    else:
        train_hyper = TrainHyper(
            epochs=hyper.epochs,
            lr=hyper.lr,
            batch_size=hyper.batch_size,
            warmup_fraction=hyper.warmup_fraction,
            optimizer="adam",
            seed=hyper.seed,
        )
        net, _ = fit(net, dataset.train_x, dataset.train_y, train_hyper)
        sw = SwitchModel(net)
    val_acc = float(np.mean(sw.decide_many(dataset.val_x) == dataset.val_y.astype(bool)))
    return sw, val_acc


def decision_log_csv(scene_ids, p_distill, threshold: float = 0.5) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scene_id", "p_distill", "decision"])
    for sid, p in zip(scene_ids, p_distill):
        w.writerow([int(sid), f"{p:.6f}", (Decision.DISTILL if p > threshold else Decision.KEEP).value])
    return buf.getvalue()


def write_decision_log(path, scene_ids, p_distill, threshold: float = 0.5) -> Path:
    path = Path(path)
    path.write_text(decision_log_csv(scene_ids, p_distill, threshold))
    return path


def save_switch(switch: SwitchModel, path) -> tuple[Path, Path]:
    """Network weights as a checkpoint plus a JSON sidecar with the threshold."""
    path = Path(path)
    meta = path.with_suffix(".json")
    save_checkpoint(switch.model, path)
    meta.write_text(json.dumps({"threshold": switch.threshold, "constant": switch.constant}, sort_keys=True) + "\n")
    return path, meta


def load_switch(path) -> SwitchModel:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return SwitchModel(load_checkpoint(path), meta["threshold"], meta["constant"])
