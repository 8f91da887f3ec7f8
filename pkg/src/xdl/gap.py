"""Class-wise gap analysis between a teacher and a student report."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import SceneSet
from .mcq import ClasswiseReport

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GapLabels:
    labels: dict[int, int]
    margins: dict[int, float]
    threshold: float = 0.0

    def classes(self) -> list[int]:
        return sorted(self.labels)

    def positive(self) -> list[int]:
        return [c for c in self.classes() if self.labels[c] == 1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "label", "margin"])
        for c in self.classes():
            w.writerow([c, self.labels[c], repr(float(self.margins[c]))])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def read(cls, path, threshold: float = 0.0) -> "GapLabels":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            {int(r["class_id"]): int(r["label"]) for r in rows},
            {int(r["class_id"]): float(r["margin"]) for r in rows},
            threshold,
        )


def compare_classwise(
    teacher: ClasswiseReport, student: ClasswiseReport, threshold: float = 0.0
) -> GapLabels:
    """Label a class 1 ("to distill") iff teacher accuracy beats student by more than ``threshold``."""
    if set(teacher.accuracy) != set(student.accuracy):
        raise ValueError("teacher and student reports cover different classes")
    if teacher.split != student.split:
        raise ValueError(f"reports come from different splits: {teacher.split} vs {student.split}")
    margins = {c: teacher.accuracy[c] - student.accuracy[c] for c in teacher.classes()}
    labels = {c: int(m > threshold) for c, m in margins.items()}
    return GapLabels(labels, margins, threshold)


@dataclass
class SwitchDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    train_ids: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    val_ids: np.ndarray
    modality: str = "audio"

    @property
    def degenerate(self) -> bool:
        return len(np.unique(np.concatenate([self.train_y, self.val_y]))) < 2


def build_switch_dataset(
    analysis: SceneSet,
    gap: GapLabels,
    per_class_train: int = 45,
    per_class_val: int = 5,
    seed: int = 0,
    modality: str = "audio",
) -> SwitchDataset:
    """Split each class's analysis scenes into switch train/val; every scene inherits its class label."""
    if np.any(analysis.splits != "analysis"):
        raise ValueError("switch data must come from the analysis split only")
    rng = np.random.default_rng(seed)
    views = analysis.views(modality)
    tr, va = [], []
    for c in range(analysis.num_classes):
        idx = np.flatnonzero(analysis.class_ids == c)
        need = per_class_train + per_class_val
        if idx.size < need:
            raise ValueError(f"class {c} has {idx.size} analysis scenes, need {need}")
        idx = idx[rng.permutation(idx.size)]
        tr.append(idx[:per_class_train])
        va.append(idx[per_class_train:need])
    tr_idx, va_idx = np.sort(np.concatenate(tr)), np.sort(np.concatenate(va))
    label_of = np.array([gap.labels[c] for c in range(analysis.num_classes)], dtype=np.int64)
    ds = SwitchDataset(
        views[tr_idx].copy(),
        label_of[analysis.class_ids[tr_idx]],
        analysis.ids[tr_idx].copy(),
        views[va_idx].copy(),
        label_of[analysis.class_ids[va_idx]],
        analysis.ids[va_idx].copy(),
        modality,
    )
    if ds.degenerate:
        log.warning("degenerate switch target: every class carries the same gap label")
    return ds


def gap_chart_data(gap: GapLabels, k: int) -> dict[str, list[int]]:
    """Pick ``k`` comparable, teacher-better and student-better classes, disjointly.

    Comparable classes (smallest |margin|) are chosen first; the rest are
    ranked by signed margin. Ties always fall back to class-id order.
    """
    classes = gap.classes()
    if k > len(classes):
        raise ValueError(f"k={k} exceeds {len(classes)} classes")
    m = gap.margins
    comparable = sorted(classes, key=lambda c: (abs(m[c]), c))[:k]
    rest = [c for c in classes if c not in comparable]
    teacher_better = sorted(rest, key=lambda c: (-m[c], c))[:k]
    rest = [c for c in rest if c not in teacher_better]
    student_better = sorted(rest, key=lambda c: (m[c], c))[:k]
    return {
        "teacher_better": teacher_better,
        "comparable": comparable,
        "student_better": student_better,
    }
