"""Synthetic dual-view scenes with a per-class modality gap, plus feature-file I/O.

Each class owns one random unit prototype per view. A scene of class ``c`` has

    audio  = s_a[c] * p_a[c] + N(0, sigma^2 I)
    visual = s_v[c] * p_v[c] + N(0, sigma^2 I)

so the per-class strengths are the knob that decides which view is easier.
Views are stored on the float32 grid so the text feature format (9 significant
digits) round-trips bit-exactly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SPLITS = ("train", "analysis", "test")
MODALITIES = ("audio", "visual")


class FeatureFileError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    num_classes: int
    audio_strength: tuple[float, ...]
    visual_strength: tuple[float, ...]
    audio_dim: int = 64
    visual_dim: int = 64
    noise_sigma: float = 1.0
    class_weights: tuple[float, ...] | None = None
    train_per_class: int = 200
    analysis_per_class: int = 50
    test_per_class: int = 50
    seed: int = 0
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        c = self.num_classes
        if c < 2:
            raise ValueError(f"need at least 2 classes, got {c}")
        if self.audio_dim < 1 or self.visual_dim < 1:
            raise ValueError("view dimensions must be positive")
        for name in ("audio_strength", "visual_strength"):
            s = np.asarray(getattr(self, name), dtype=np.float64)
            if s.shape != (c,):
                raise ValueError(f"{name} must have {c} entries, got {s.size}")
            if not np.all(np.isfinite(s)) or np.any(s < 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if not (self.noise_sigma > 0 and math.isfinite(self.noise_sigma)):
            raise ValueError("noise_sigma must be positive")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.shape != (c,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise ValueError("class_weights must be C positive finite numbers")
        for split in SPLITS:
            if self.per_class(split) < 1:
                raise ValueError(f"{split} samples per class must be >= 1")
        if self.class_names is not None and len(self.class_names) != c:
            raise ValueError("class_names must have one entry per class")

    def per_class(self, split: str) -> int:
        return getattr(self, f"{split}_per_class")

    @property
    def weights(self) -> np.ndarray:
        if self.class_weights is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        w = np.asarray(self.class_weights, dtype=np.float64)
        return w / w.sum()

    def names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        return [f"class_{c:02d}" for c in range(self.num_classes)]


@dataclass(frozen=True)
class Scene:
    id: int
    class_id: int
    audio_view: np.ndarray
    visual_view: np.ndarray
    split: str

    def view(self, modality: str) -> np.ndarray:
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        return self.audio_view if modality == "audio" else self.visual_view


@dataclass
class SceneSet:
    """Column-oriented collection of scenes.

    Arrays are kept side by side (``ids``, ``class_ids``, ``splits``, ``audio``,
    ``visual``) because every consumer works on whole splits at once.
    """

    ids: np.ndarray
    class_ids: np.ndarray
    splits: np.ndarray
    audio: np.ndarray
    visual: np.ndarray
    num_classes: int
    class_names: list[str]
    spec: ScenarioSpec | None = None
    _index: dict[int, int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.ids)
        if n == 0:
            raise ValueError("no scenes")
        for name in ("class_ids", "splits"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match ids")
        if self.audio.shape[0] != n or self.visual.shape[0] != n:
            raise ValueError("view arrays do not match number of scenes")
        if len(np.unique(self.ids)) != n:
            raise ValueError("scene ids must be unique")
        if self.class_ids.min() < 0 or self.class_ids.max() >= self.num_classes:
            raise ValueError("class id out of range")
        bad = set(np.unique(self.splits)) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags: {sorted(bad)}")
        for a in (self.ids, self.class_ids, self.splits, self.audio, self.visual):
            a.setflags(write=False)
        self._index = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Scene]:
        for k in range(len(self)):
            yield self.scene_at(k)

    @property
    def audio_dim(self) -> int:
        return self.audio.shape[1]

    @property
    def visual_dim(self) -> int:
        return self.visual.shape[1]

    def scene_at(self, k: int) -> Scene:
        return Scene(
            int(self.ids[k]),
            int(self.class_ids[k]),
            self.audio[k],
            self.visual[k],
            str(self.splits[k]),
        )

    def scene(self, scene_id: int) -> Scene:
        return self.scene_at(self._index[int(scene_id)])

    @property
    def scenes(self) -> list[Scene]:
        return list(self)

    def views(self, modality: str) -> np.ndarray:
        if modality == "audio":
            return self.audio
        if modality == "visual":
            return self.visual
        raise ValueError(f"unknown modality {modality!r}")

    def subset(self, mask: np.ndarray) -> "SceneSet":
        mask = np.asarray(mask)
        return SceneSet(
            self.ids[mask].copy(),
            self.class_ids[mask].copy(),
            self.splits[mask].copy(),
            self.audio[mask].copy(),
            self.visual[mask].copy(),
            self.num_classes,
            self.class_names,
            self.spec,
        )

    def split(self, name: str) -> "SceneSet":
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        mask = self.splits == name
        if not mask.any():
            raise ValueError(f"split {name!r} is empty")
        return self.subset(mask)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.class_ids, minlength=self.num_classes)


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` items by ``weights`` (ties to lower class id)."""
    raw = total * weights
    counts = np.floor(raw).astype(np.int64)
    remainder = raw - counts
    short = total - counts.sum()
    order = sorted(range(len(weights)), key=lambda c: (-remainder[c], c))
    for c in order[:short]:
        counts[c] += 1
    return counts


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    p = rng.standard_normal((n, dim))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def _to_storage(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def generate(spec: ScenarioSpec) -> SceneSet:
    """Draw a deterministic SceneSet from ``spec``.

    Split sizes are ``per_class * C`` and are apportioned to classes by
    ``class_weights``; with uniform weights every class gets exactly
    ``per_class`` scenes. Scene order inside a split is shuffled.
    """
    rng = np.random.default_rng(spec.seed)
    C = spec.num_classes
    proto_a = _unit_rows(rng, C, spec.audio_dim)
    proto_v = _unit_rows(rng, C, spec.visual_dim)
    s_a = np.asarray(spec.audio_strength, dtype=np.float64)
    s_v = np.asarray(spec.visual_strength, dtype=np.float64)

    ids, labels, splits, audio, visual = [], [], [], [], []
    next_id = 0
    for split in SPLITS:
        counts = _apportion(spec.per_class(split) * C, spec.weights)
        if np.any(counts == 0):
            raise ValueError(f"class weights leave a class with no {split} scenes")
        y = np.repeat(np.arange(C), counts)
        y = y[rng.permutation(y.size)]
        n = y.size
        a = s_a[y, None] * proto_a[y] + spec.noise_sigma * rng.standard_normal((n, spec.audio_dim))
        v = s_v[y, None] * proto_v[y] + spec.noise_sigma * rng.standard_normal((n, spec.visual_dim))
        ids.append(np.arange(next_id, next_id + n))
        next_id += n
        labels.append(y)
        splits.append(np.full(n, split, dtype=object))
        audio.append(_to_storage(a))
        visual.append(_to_storage(v))

    return SceneSet(
        np.concatenate(ids),
        np.concatenate(labels),
        np.concatenate(splits),
        np.concatenate(audio),
        np.concatenate(visual),
        C,
        spec.names(),
        spec,
    )


def prototypes(spec: ScenarioSpec) -> tuple[np.ndarray, np.ndarray]:
    """Re-derive the (audio, visual) class prototypes used by ``generate``."""
    rng = np.random.default_rng(spec.seed)
    proto_a = _unit_rows(rng, spec.num_classes, spec.audio_dim)
    proto_v = _unit_rows(rng, spec.num_classes, spec.visual_dim)
    return proto_a, proto_v


# Archetype strengths of the default scenario. "strong" views are near-perfectly
# separable; "weak" views carry a real but faint signal that a small labelled
# budget cannot exploit, which is what distillation later recovers.
STRONG = 10.0
WEAK_AUDIO = 2.6
WEAK_VISUAL = 5.0


def bayes_accuracy(spec: ScenarioSpec, modality: str, draws: int = 10_000, seed: int = 0) -> np.ndarray:
    """Monte-Carlo per-class accuracy of the nearest-unit-prototype rule on one view.

    The noise draws depend only on ``seed`` (not on strengths), so sweeping a
    strength reuses the same noise.
    """
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    proto_a, proto_v = prototypes(spec)
    protos = proto_a if modality == "audio" else proto_v
    strength = np.asarray(spec.audio_strength if modality == "audio" else spec.visual_strength)
    rng = np.random.default_rng(seed)
    acc = np.empty(spec.num_classes)
    for c in range(spec.num_classes):
        x = strength[c] * protos[c] + spec.noise_sigma * rng.standard_normal((draws, protos.shape[1]))
        acc[c] = np.mean(np.argmax(x @ protos.T, axis=1) == c)
    return acc


def archetype_scenario(
    seed: int = 0,
    group_size: int = 10,
    strong: float = STRONG,
    weak_audio: float = WEAK_AUDIO,
    weak_visual: float = WEAK_VISUAL,
    **overrides,
) -> ScenarioSpec:
    """Three equal groups of classes: both-strong, audio-strong, visual-strong.

    ``overrides`` are passed through to ``ScenarioSpec`` (dims, noise, split sizes).
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    groups = [("both", strong, strong), ("audio", strong, weak_visual), ("visual", weak_audio, strong)]
    s_a, s_v, names = [], [], []
    for tag, a, v in groups:
        for _ in range(group_size):
            s_a.append(a)
            s_v.append(v)
            names.append(f"{tag}-strong-{len(names):02d}")
    fields = dict(
        audio_dim=64,
        visual_dim=64,
        noise_sigma=1.0,
        train_per_class=500,
        analysis_per_class=50,
        test_per_class=50,
    )
    fields.update(overrides)
    return ScenarioSpec(
        num_classes=3 * group_size,
        audio_strength=tuple(s_a),
        visual_strength=tuple(s_v),
        seed=seed,
        class_names=tuple(names),
        **fields,
    )


def default_scenario(seed: int = 0) -> ScenarioSpec:
    """30 classes in three groups of 10: both-strong, audio-strong, visual-strong."""
    return archetype_scenario(seed)


def archetype_groups(spec: ScenarioSpec) -> dict[str, list[int]]:
    """Classify classes by which view carries the stronger signal."""
    groups: dict[str, list[int]] = {"both": [], "audio": [], "visual": []}
    for c, (a, v) in enumerate(zip(spec.audio_strength, spec.visual_strength)):
        key = "audio" if a > v else "visual" if v > a else "both"
        groups[key].append(c)
    return groups


def class_frequencies(scenes: SceneSet) -> np.ndarray:
    """Empirical label frequencies over the train split (sums to 1)."""
    train = scenes.class_ids[scenes.splits == "train"]
    if train.size == 0:
        raise ValueError("train split is empty")
    counts = np.bincount(train, minlength=scenes.num_classes).astype(np.float64)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

_HEADER = re.compile(r"^#xdl v1 C=(\d+) Da=(\d+) Dv=(\d+)\s*$")


def _fmt(row: np.ndarray) -> str:
    return ";".join(f"{x:.9g}" for x in row)


def export_features(scenes: SceneSet, path) -> Path:
    path = Path(path)
    lines = [f"#xdl v1 C={scenes.num_classes} Da={scenes.audio_dim} Dv={scenes.visual_dim}"]
    for k in range(len(scenes)):
        lines.append(
            f"{scenes.ids[k]},{scenes.class_ids[k]},{scenes.splits[k]},"
            f"{_fmt(scenes.audio[k])},{_fmt(scenes.visual[k])}"
        )
    path.write_text("\n".join(lines) + "\n")
    return path


def _parse_floats(field_text: str, dim: int, lineno: int, scene_id: str, what: str) -> list[float]:
    parts = field_text.split(";")
    if len(parts) != dim:
        raise FeatureFileError(
            f"line {lineno}: scene {scene_id}: {what} view has {len(parts)} values, expected {dim}"
        )
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise FeatureFileError(f"line {lineno}: scene {scene_id}: malformed {what} value") from None


def ingest_features(path, class_names: Sequence[str] | None = None) -> SceneSet:
    """Read a feature file into a SceneSet; values are held at float32 precision."""
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines or not any(l.strip() for l in lines):
        raise FeatureFileError(f"{path}: no scenes")
    m = _HEADER.match(lines[0])
    if not m:
        raise FeatureFileError(f"{path}: line 1: malformed header {lines[0][:60]!r}")
    C, Da, Dv = (int(g) for g in m.groups())

    ids, labels, splits, audio, visual = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 5:
            raise FeatureFileError(f"line {lineno}: expected 5 comma-separated fields, got {len(fields)}")
        sid, cid, split, a_text, v_text = fields
        try:
            ids.append(int(sid))
            labels.append(int(cid))
        except ValueError:
            raise FeatureFileError(f"line {lineno}: malformed scene id or class id") from None
        if not 0 <= labels[-1] < C:
            raise FeatureFileError(f"line {lineno}: scene {sid}: class id {cid} outside 0..{C - 1}")
        if split not in SPLITS:
            raise FeatureFileError(f"line {lineno}: scene {sid}: unknown split tag {split!r}")
        splits.append(split)
        audio.append(_parse_floats(a_text, Da, lineno, sid, "audio"))
        visual.append(_parse_floats(v_text, Dv, lineno, sid, "visual"))
    if not ids:
        raise FeatureFileError(f"{path}: no scenes")
    if len(set(ids)) != len(ids):
        raise FeatureFileError(f"{path}: duplicate scene ids")

    names = list(class_names) if class_names is not None else [f"class_{c:02d}" for c in range(C)]
    return SceneSet(
        np.asarray(ids, dtype=np.int64),
        np.asarray(labels, dtype=np.int64),
        np.asarray(splits, dtype=object),
        _to_storage(np.asarray(audio, dtype=np.float64)),
        _to_storage(np.asarray(visual, dtype=np.float64)),
        C,
        names,
    )
