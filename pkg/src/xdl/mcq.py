"""K-way multiple-choice protocol: item construction, answering, letter parsing, scoring."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import SceneSet, class_frequencies
from .models import MlpClassifier, forward

log = logging.getLogger(__name__)

LETTERS = string.ascii_uppercase


class ParseFailure(ValueError):
    """A free-text response that is not exactly one valid option letter."""


@dataclass(frozen=True)
class McqItem:
    scene_id: int
    options: tuple[int, ...]
    answer_slot: int

    def __post_init__(self):
        if len(self.options) < 2:
            raise ValueError("an item needs at least two options")
        if len(set(self.options)) != len(self.options):
            raise ValueError(f"duplicate options in {self.options}")
        if not 0 <= self.answer_slot < len(self.options):
            raise ValueError("answer slot out of range")

    @property
    def k(self) -> int:
        return len(self.options)

    @property
    def answer_class(self) -> int:
        return self.options[self.answer_slot]

    def prompt(self, class_names: Sequence[str]) -> str:
        """Render the item as the text a language model would receive."""
        lines = ["Classify the sounding object into one of the categories below:"]
        lines += [f"{LETTERS[i]}. {class_names[c]}" for i, c in enumerate(self.options)]
        lines.append(f"Respond only with a single letter from A to {LETTERS[self.k - 1]}.")
        return "\n".join(lines)


def build_mcq(scene_id: int, true_class: int, frequencies, k: int, rng: np.random.Generator) -> McqItem:
    """Draw ``k - 1`` distinct distractors by successive sampling and place the truth uniformly.

    Distractors are drawn one at a time without replacement, each draw
    proportional to ``frequencies`` over the classes not yet used (the ground
    truth is excluded from the start).
    """
    freq = np.asarray(frequencies, dtype=np.float64)
    C = freq.size
    if k < 2:
        raise ValueError(f"K must be >= 2, got {k}")
    if k > C:
        raise ValueError(f"K={k} exceeds the number of classes C={C}")
    if not 0 <= true_class < C:
        raise ValueError(f"class {true_class} outside 0..{C - 1}")
    if np.any(freq < 0) or not np.isfinite(freq).all() or freq.sum() <= 0:
        raise ValueError("frequencies must be a non-negative distribution")

    weights = freq.copy()
    weights[true_class] = 0.0
    distractors = []
    for _ in range(k - 1):
        total = weights.sum()
        if total <= 0:
            # zero-frequency classes fill the remaining slots uniformly
            pool = [c for c in range(C) if c != true_class and c not in distractors]
            pick = int(pool[rng.integers(len(pool))])
        else:
            pick = int(np.searchsorted(np.cumsum(weights / total), rng.random(), side="right"))
            pick = min(pick, C - 1)
            while weights[pick] == 0:  # guard against cumsum rounding at the tail
                pick -= 1
        distractors.append(pick)
        weights[pick] = 0.0
    slot = int(rng.integers(k))
    options = distractors[:slot] + [int(true_class)] + distractors[slot:]
    return McqItem(int(scene_id), tuple(options), slot)


def item_rng(seed: int, scene_id: int) -> np.random.Generator:
    """Per-scene stream so an item depends only on (seed, scene id), never on order."""
    return np.random.default_rng([int(seed), int(scene_id)])


def build_items(scenes: SceneSet, k: int, seed: int, frequencies=None) -> list[McqItem]:
    freq = class_frequencies(scenes) if frequencies is None else frequencies
    return [
        build_mcq(sid, cid, freq, k, item_rng(seed, sid))
        for sid, cid in zip(scenes.ids.tolist(), scenes.class_ids.tolist())
    ]


def items_digest(items: Sequence[McqItem]) -> str:
    h = hashlib.sha256()
    for it in items:
        h.update(f"{it.scene_id}:{','.join(map(str, it.options))}:{it.answer_slot};".encode())
    return h.hexdigest()


def choose_slot(logits: np.ndarray, item: McqItem) -> int:
    """Argmax over the option classes; ``np.argmax`` already breaks ties to the lowest slot."""
    if max(item.options) >= logits.shape[-1]:
        raise ValueError(f"option class {max(item.options)} outside the model's {logits.shape[-1]} labels")
    return int(np.argmax(logits[list(item.options)]))


def answer_mcq(model: MlpClassifier, view, item: McqItem) -> int:
    if max(item.options) >= model.num_classes:
        raise ValueError(f"option class {max(item.options)} outside the model's {model.num_classes} labels")
    return choose_slot(forward(model, view), item)


_STRIP = string.whitespace + string.punctuation


def parse_letter(text: str, k: int) -> int:
    """Map a response like ``"B"`` or ``" c. "`` to a slot; anything else is a ParseFailure."""
    core = text.strip(_STRIP)
    if len(core) != 1 or core.upper() not in LETTERS[:k]:
        raise ParseFailure(f"not a single letter A-{LETTERS[k - 1]}: {text!r}")
    return LETTERS.index(core.upper())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class ClasswiseReport:
    accuracy: dict[int, float]
    counts: dict[int, int]
    correct: dict[int, int]
    overall: float
    modality: str
    model_tag: str
    split: str = "analysis"
    class_names: list[str] = field(default_factory=list)
    items_digest: str = ""
    parse_failures: int = 0

    def classes(self) -> list[int]:
        return sorted(self.accuracy)

    def mean_over(self, classes: Sequence[int]) -> float:
        return float(np.mean([self.accuracy[c] for c in classes]))

    def to_dict(self) -> dict:
        return {
            "model": self.model_tag,
            "modality": self.modality,
            "split": self.split,
            "overall": self.overall,
            "items_digest": self.items_digest,
            "parse_failures": self.parse_failures,
            "classes": [
                {
                    "class_id": c,
                    "class_name": self._name(c),
                    "n": self.counts[c],
                    "correct": self.correct[c],
                    "accuracy": self.accuracy[c],
                }
                for c in self.classes()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClasswiseReport":
        rows = d["classes"]
        return cls(
            accuracy={r["class_id"]: r["accuracy"] for r in rows},
            counts={r["class_id"]: r["n"] for r in rows},
            correct={r["class_id"]: r["correct"] for r in rows},
            overall=d["overall"],
            modality=d["modality"],
            model_tag=d["model"],
            split=d["split"],
            class_names=[r["class_name"] for r in rows],
            items_digest=d.get("items_digest", ""),
            parse_failures=d.get("parse_failures", 0),
        )

    def _name(self, c: int) -> str:
        return self.class_names[c] if c < len(self.class_names) else str(c)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "class_name", "n", "correct", "accuracy"])
        for c in self.classes():
            w.writerow([c, self._name(c), self.counts[c], self.correct[c], f"{self.accuracy[c]:.6f}"])
        n = sum(self.counts.values())
        w.writerow(["overall", "", n, sum(self.correct.values()), f"{self.overall:.6f}"])
        return buf.getvalue()

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def score(
    items: Sequence[McqItem],
    chosen: Sequence[int | None],
    class_ids: Sequence[int],
    num_classes: int,
    *,
    modality: str,
    model_tag: str,
    split: str,
    class_names: Sequence[str] = (),
    parse_failures: int = 0,
) -> ClasswiseReport:
    """Aggregate per-item choices (``None`` = unparseable, scored wrong) per class."""
    counts = np.zeros(num_classes, dtype=np.int64)
    correct = np.zeros(num_classes, dtype=np.int64)
    for item, pick, c in zip(items, chosen, class_ids):
        counts[c] += 1
        correct[c] += pick is not None and pick == item.answer_slot
    present = [c for c in range(num_classes) if counts[c]]
    return ClasswiseReport(
        accuracy={c: correct[c] / counts[c] for c in present},
        counts={c: int(counts[c]) for c in present},
        correct={c: int(correct[c]) for c in present},
        overall=float(correct.sum() / counts.sum()),
        modality=modality,
        model_tag=model_tag,
        split=split,
        class_names=list(class_names),
        items_digest=items_digest(items),
        parse_failures=parse_failures,
    )


def score_responses(
    scenes: SceneSet,
    items: Sequence[McqItem],
    responses: Sequence[str],
    *,
    modality: str,
    model_tag: str,
    split: str,
) -> ClasswiseReport:
    """Score free-text letter responses (e.g. from an external model) against items."""
    if len(responses) != len(items):
        raise ValueError(f"{len(responses)} responses for {len(items)} items")
    chosen: list[int | None] = []
    failures = 0
    for item, text in zip(items, responses):
        try:
            chosen.append(parse_letter(text, item.k))
        except ParseFailure:
            log.warning("scene %d: unparseable response %r", item.scene_id, text)
            chosen.append(None)
            failures += 1
    labels = [scenes.scene(it.scene_id).class_id for it in items]
    return score(
        items, chosen, labels, scenes.num_classes,
        modality=modality, model_tag=model_tag, split=split,
        class_names=scenes.class_names, parse_failures=failures,
    )


def evaluate(
    model: MlpClassifier,
    scenes: SceneSet,
    split: str,
    modality: str | None = None,
    k: int = 10,
    seed: int = 0,
    model_tag: str = "model",
) -> ClasswiseReport:
    """One item per scene of ``split`` (fixed by seed and scene id), answered from ``modality``."""
    modality = modality or model.modality
    freq = class_frequencies(scenes)
    part = scenes.split(split)
    items = build_items(part, k, seed, freq)
    if max(max(it.options) for it in items) >= model.num_classes:
        raise ValueError(f"option class outside the model's {model.num_classes} labels")
    logits = forward(model, part.views(modality))
    chosen = [choose_slot(z, it) for z, it in zip(logits, items)]
    return score(
        items, chosen, part.class_ids.tolist(), scenes.num_classes,
        modality=modality, model_tag=model_tag, split=split, class_names=scenes.class_names,
    )
