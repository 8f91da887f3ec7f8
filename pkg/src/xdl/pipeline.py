"""Config parsing, staged pipeline execution with caching, and the run manifest.

Every stage writes its artifacts under the output directory and records a
stamp keyed by the hash of the config sections it depends on. A stage whose
stamp matches and whose outputs all exist is skipped.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import shutil
import traceback
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable

from . import __version__
from . import dataset as ds
from . import distill as dl
from . import gap as gp
from . import mcq
from . import models as md
from . import report as rp
from . import switch as sw

log = logging.getLogger(__name__)

STAGES = ("generate", "train-base", "evaluate", "analyze-gap", "train-switch", "distill", "ablate", "report")
STAMP_DIR = ".xdl-stages"
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A stage failed; the message names the stage, the module and the offending input."""

    def __init__(self, stage: str, module: str, inputs: str, cause: BaseException):
        self.stage, self.module, self.inputs, self.cause = stage, module, inputs, cause
        super().__init__(f"stage {stage} failed in module {module} (input: {inputs}): {cause}")


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(",", " ").split())


def _opt_float(text: str) -> float | None:
    return None if text.strip() == "" else float(text)


def _names(text: str) -> tuple[str, ...]:
    return tuple(p for p in text.replace(",", " ").split())


# section -> key -> (parser, default text)
SCHEMA: dict[str, dict[str, tuple[Callable, str]]] = {
    "run": {"seed": (int, "0"), "out": (str, "runs/default")},
    "scenario": {
        "features": (str, ""),
        "group_size": (int, "10"),
        "strong": (float, repr(ds.STRONG)),
        "weak_audio": (float, repr(ds.WEAK_AUDIO)),
        "weak_visual": (float, repr(ds.WEAK_VISUAL)),
        "noise_sigma": (float, "1.0"),
        "audio_dim": (int, "64"),
        "visual_dim": (int, "64"),
        "train_per_class": (int, "500"),
        "analysis_per_class": (int, "50"),
        "test_per_class": (int, "50"),
    },
    "base": {
        "hidden": (_ints, "128"),
        "epochs": (int, "60"),
        "lr": (float, "0.01"),
        "batch_size": (int, "32"),
        "warmup_fraction": (float, "0.1"),
        "labelled_per_class": (int, "1"),
    },
    "mcq": {"k": (int, "10")},
    "switch": {
        "hidden": (_ints, "128"),
        "epochs": (int, "30"),
        "lr": (float, "0.001"),
        "batch_size": (int, "32"),
        "warmup_fraction": (float, "0.1"),
        "per_class_train": (int, "45"),
        "per_class_val": (int, "5"),
        "threshold": (float, "0.5"),
    },
    "distill": {
        "student": (str, "audio"),
        "reverse": (_bool, "true"),
        "mode": (str, "teacher_labels"),
        "anti_forgetting": (_bool, "true"),
        "temperature": (float, "2.0"),
        "epochs": (int, "1"),
        "micro_batch": (int, "2"),
        "accumulation": (int, "4"),
        "lr": (float, "0.003"),
        "weight_decay": (float, "0.01"),
        "warmup_fraction": (float, "0.1"),
        "lora_rank": (int, "16"),
        "lora_alpha": (_opt_float, ""),
        "switch": (str, "trained"),
    },
    "ablate": {"rows": (_names, " ".join(dl.ABLATION_ROWS))},
    "report": {"chart_k": (int, "5")},
}

# config sections each stage (and everything downstream of it) depends on
STAGE_SECTIONS = {
    "generate": ("run", "scenario"),
    "train-base": ("base",),
    "evaluate": ("mcq",),
    "analyze-gap": (),
    "train-switch": ("switch",),
    "distill": ("distill",),
    "ablate": ("ablate",),
    "report": ("report",),
}


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class ExperimentConfig:
    values: dict[str, dict]
    source: str = "<defaults>"

    # -- typed views ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["run"]["out"])

    @property
    def features(self) -> Path | None:
        f = self.values["scenario"]["features"]
        return Path(f) if f else None

    def scenario(self) -> ds.ScenarioSpec:
        s = dict(self.values["scenario"])
        s.pop("features")
        return ds.archetype_scenario(self.seed, **s)

    def base_hyper(self, offset: int = 0) -> md.TrainHyper:
        b = self.values["base"]
        return md.TrainHyper(
            epochs=b["epochs"], lr=b["lr"], batch_size=b["batch_size"], warmup_fraction=b["warmup_fraction"],
            seed=self.seed + offset, max_per_class=b["labelled_per_class"],
        )

    def switch_hyper(self) -> sw.SwitchHyper:
        s = self.values["switch"]
        return sw.SwitchHyper(
            epochs=s["epochs"], lr=s["lr"], batch_size=s["batch_size"], warmup_fraction=s["warmup_fraction"],
            hidden=s["hidden"], seed=self.seed,
        )

    def distill_config(self) -> dl.DistillConfig:
        d = {k: v for k, v in self.values["distill"].items() if k not in ("student", "reverse")}
        return dl.DistillConfig(**d, seed=self.seed)

    @property
    def student(self) -> str:
        return self.values["distill"]["student"]

    @property
    def teacher(self) -> str:
        return "visual" if self.student == "audio" else "audio"

    # -- hashing -------------------------------------------------------------

    def config_hash(self) -> str:
        """Hash of the resolved values; key order, formatting and the output location do not matter."""
        values = {**self.values, "run": {"seed": self.seed}}
        return _sha(_canonical(values))

    def stage_hash(self, stage: str) -> str:
        upto = STAGES[: STAGES.index(stage) + 1]
        secs = sorted({s for st in upto for s in STAGE_SECTIONS[st]})
        view = {s: self.values[s] for s in secs}
        # the output location does not change what a stage computes
        view["run"] = {"seed": self.seed}
        if "scenario" in view and self.features is not None:
            view["features_sha256"] = hashlib.sha256(self.features.read_bytes()).hexdigest()
        return _sha(_canonical({"stage": stage, "version": __version__, "config": view}))

    def with_overrides(self, out: str | None = None, seed: int | None = None) -> "ExperimentConfig":
        values = json.loads(json.dumps(self.values))
        values["run"]["seed"] = values["run"]["seed"] if seed is None else int(seed)
        values["run"]["out"] = values["run"]["out"] if out is None else str(out)
        for sec in ("base", "switch"):
            values[sec]["hidden"] = tuple(values[sec]["hidden"])
        values["ablate"]["rows"] = tuple(values["ablate"]["rows"])
        return ExperimentConfig(values, self.source)


def _validate(cfg: ExperimentConfig) -> None:
    v = cfg.values
    if v["distill"]["student"] not in ("audio", "visual"):
        raise ConfigError(f"[distill] student: expected audio or visual, got {v['distill']['student']!r}")
    for row in v["ablate"]["rows"]:
        if row not in dl.ABLATION_ROWS:
            raise ConfigError(f"[ablate] rows: unknown row {row!r}; expected some of {list(dl.ABLATION_ROWS)}")
    if cfg.features is not None and not cfg.features.is_file():
        raise ConfigError(f"[scenario] features: file {str(cfg.features)!r} does not exist")
    try:
        cfg.distill_config()
        if cfg.features is None:
            cfg.scenario()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str, source: str = "<string>", base_dir: Path | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    unknown = [s for s in cp.sections() if s not in SCHEMA]
    if unknown:
        raise ConfigError(f"{source}: unknown section [{unknown[0]}]")
    values: dict[str, dict] = {}
    for sec, keys in SCHEMA.items():
        have = cp[sec] if cp.has_section(sec) else {}
        for key in have:
            if key not in keys:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]")
        values[sec] = {}
        for key, (conv, default) in keys.items():
            raw = have.get(key, default)
            try:
                values[sec][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{sec}] {key} = {raw!r}: {exc}") from None
    # relative paths in a config file are relative to that file
    if base_dir is not None:
        for sec, key in (("run", "out"), ("scenario", "features")):
            p = values[sec][key]
            if p and not Path(p).is_absolute():
                values[sec][key] = str(base_dir / p)
    cfg = ExperimentConfig(values, source)
    _validate(cfg)
    return cfg


def load_config(path=None) -> ExperimentConfig:
    """Read an INI config; ``None`` loads the bundled default."""
    if path is None:
        return parse_config(default_config_text(), "<bundled default.ini>")
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    return parse_config(text, str(path), path.parent)


def default_config_text() -> str:
    return resources.files("xdl").joinpath("default.ini").read_text()


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    started_at: str = ""
    finished_at: str = ""
    artifacts: dict[str, str] = field(default_factory=dict)  # relative path -> sha256
    stages: dict[str, dict] = field(default_factory=dict)
    status: str = "running"

    def content_hash(self) -> str:
        """Covers the config, version, stage hashes and artifact digests; never timestamps or run status."""
        return _sha(_canonical({
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "artifacts": self.artifacts,
            "stages": {k: v.get("hash") for k, v in self.stages.items()},
        }))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["content_hash"] = self.content_hash()
        return d

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        d.pop("content_hash", None)
        return cls(**d)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


class Run:
    """Artifact paths and loaders shared by the stages of one output directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = cfg.out_dir
        self._scenes: ds.SceneSet | None = None

    def p(self, rel: str) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def scenes(self) -> ds.SceneSet:
        if self._scenes is None:
            names = json.loads((self.out / "data/scenario.json").read_text())["class_names"]
            self._scenes = ds.ingest_features(self.out / "data/scenes.features", names)
        return self._scenes

    def model(self, tag: str) -> md.MlpClassifier:
        return md.load_checkpoint(self.out / f"models/{tag}.ckpt")

    def report(self, tag: str, split: str) -> mcq.ClasswiseReport:
        return mcq.ClasswiseReport.from_dict(json.loads((self.out / f"reports/{tag}_{split}.json").read_text()))

    def gap(self, student: str) -> gp.GapLabels:
        return gp.GapLabels.read(self.out / f"gap/gap_{student}_student.csv")

    def router(self, student: str) -> dl.Router:
        kind = self.cfg.values["distill"]["switch"]
        if kind == "trained":
            return dl.Router("trained", switch=sw.load_switch(self.out / f"switch/switch_{student}.ckpt"))
        if kind == "oracle":
            return dl.Router("oracle", gap=self.gap(student))
        return dl.Router("always")

    def directions(self) -> list[tuple[str, str]]:
        pairs = [(self.cfg.student, self.cfg.teacher)]
        if self.cfg.values["distill"]["reverse"]:
            pairs.append((self.cfg.teacher, self.cfg.student))
        return pairs


def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def stage_generate(run: Run) -> list[Path]:
    cfg = run.cfg
    if cfg.features is not None:
        scenes = ds.ingest_features(cfg.features)
        names = list(scenes.class_names)
        meta = {"source": "features", "class_names": names, "num_classes": scenes.num_classes}
    else:
        spec = cfg.scenario()
        scenes = ds.generate(spec)
        meta = {"source": "synthetic", "class_names": spec.names(), "num_classes": spec.num_classes,
                "spec": asdict(spec), "groups": ds.archetype_groups(spec)}
    feat = ds.export_features(scenes, run.p("data/scenes.features"))
    run._scenes = None
    return [feat, _dump(run.p("data/scenario.json"), meta)]


def stage_train_base(run: Run) -> list[Path]:
    cfg, scenes = run.cfg, run.scenes()
    hidden = cfg.values["base"]["hidden"]
    out, curves = [], {}
    for offset, modality in enumerate(("audio", "visual")):
        dim = scenes.audio_dim if modality == "audio" else scenes.visual_dim
        net = md.init_classifier(dim, hidden, scenes.num_classes, cfg.seed + offset, modality)
        net, curve = md.train_classifier(net, scenes, modality, cfg.base_hyper(offset))
        out.append(md.save_checkpoint(net, run.p(f"models/{modality}_base.ckpt")))
        curves[modality] = curve
    out.append(_dump(run.p("models/base_losses.json"), curves))
    return out


def stage_evaluate(run: Run) -> list[Path]:
    cfg, scenes = run.cfg, run.scenes()
    out = []
    for modality in ("audio", "visual"):
        net = run.model(f"{modality}_base")
        for split in ("analysis", "test"):
            rep = mcq.evaluate(net, scenes, split, modality, cfg.values["mcq"]["k"], cfg.seed, f"{modality}_base")
            out.extend(rep.write(run.p(f"reports/{modality}_base_{split}")))
    return out


def stage_analyze_gap(run: Run) -> list[Path]:
    out = []
    for student, teacher in (("audio", "visual"), ("visual", "audio")):
        g = gp.compare_classwise(run.report(f"{teacher}_base", "analysis"), run.report(f"{student}_base", "analysis"))
        out.append(g.write(run.p(f"gap/gap_{student}_student.csv")))
    return out


def stage_train_switch(run: Run) -> list[Path]:
    cfg, scenes = run.cfg, run.scenes()
    s = cfg.values["switch"]
    analysis, train = scenes.split("analysis"), scenes.split("train")
    out, metrics = [], {}
    for student, _ in run.directions():
        data = gp.build_switch_dataset(
            analysis, run.gap(student), s["per_class_train"], s["per_class_val"], cfg.seed, student
        )
        model, val_acc = sw.train_switch(data, cfg.switch_hyper())
        model.threshold = s["threshold"]
        out.extend(sw.save_switch(model, run.p(f"switch/switch_{student}.ckpt")))
        p = model.p_distill(train.views(student))
        out.append(sw.write_decision_log(run.p(f"switch/decisions_{student}.csv"), train.ids, p, model.threshold))
        metrics[student] = {"val_accuracy": val_acc, "train_distill_fraction": float((p > model.threshold).mean())}
    out.append(_dump(run.p("switch/switch_metrics.json"), metrics))
    return out


def stage_distill(run: Run) -> list[Path]:
    cfg, scenes = run.cfg, run.scenes()
    names = scenes.class_names
    out = []
    for student, teacher in run.directions():
        res = dl.distill_run(
            run.model(f"{student}_base"), run.model(f"{teacher}_base"), run.router(student), scenes,
            cfg.distill_config(), eval_k=cfg.values["mcq"]["k"], eval_seed=cfg.seed,
        )
        tag = f"{student}_from_{teacher}"
        out.append(res.write_json(run.p(f"distill/{tag}.json")))
        out.append(md.save_checkpoint(res.student_after, run.p(f"models/{student}_distilled.ckpt")))
        for split, rep in res.after.items():
            rep = mcq.ClasswiseReport(**{**vars(rep), "model_tag": f"{student}_distilled"})
            out.extend(rep.write(run.p(f"reports/{student}_distilled_{split}")))
        chart = run.p(f"charts/{tag}.svg")
        rp.outcome_chart(res, "analysis", names, chart)
        out.append(chart)
    return out


def stage_ablate(run: Run) -> list[Path]:
    cfg, scenes = run.cfg, run.scenes()
    student, teacher = cfg.student, cfg.teacher
    outcomes = dl.run_ablation(
        run.model(f"{student}_base"), run.model(f"{teacher}_base"), run.router(student), scenes,
        cfg.distill_config(), cfg.values["ablate"]["rows"], eval_k=cfg.values["mcq"]["k"], eval_seed=cfg.seed,
    )
    out = [res.write_json(run.p(f"ablation/{name}.json")) for name, res in outcomes.items()]
    table = run.p("ablation/ablation.csv")
    table.write_text(dl.ablation_csv(outcomes))
    out.append(table)
    return out


def stage_report(run: Run) -> list[Path]:
    cfg, scenes = run.cfg, run.scenes()
    names = scenes.class_names
    inputs: list[Path] = sorted((run.out / "reports").glob("*_analysis.json"))
    inputs += sorted((run.out / "reports").glob("*_test.json"))
    inputs += sorted((run.out / "distill").glob("*.json"))
    inputs += sorted((run.out / "gap").glob("*.csv"))
    inputs.append(run.out / "ablation")
    out = list(rp.emit_report(inputs, run.out / "summary"))
    k = min(cfg.values["report"]["chart_k"], scenes.num_classes // 3)
    student, teacher = cfg.student, cfg.teacher
    reports = {
        f"{student}_base": run.report(f"{student}_base", "analysis"),
        f"{teacher}_base": run.report(f"{teacher}_base", "analysis"),
    }
    out.append(run.p("charts/classwise_gap.svg"))
    rp.gap_chart(run.gap(student), reports, k, names, out[-1])
    return out


STAGE_FUNCS: dict[str, Callable[[Run], list[Path]]] = {
    "generate": stage_generate,
    "train-base": stage_train_base,
    "evaluate": stage_evaluate,
    "analyze-gap": stage_analyze_gap,
    "train-switch": stage_train_switch,
    "distill": stage_distill,
    "ablate": stage_ablate,
    "report": stage_report,
}

STAGE_INPUTS = {
    "generate": "[scenario] section",
    "train-base": "data/scenes.features, [base] section",
    "evaluate": "models/*_base.ckpt, [mcq] section",
    "analyze-gap": "reports/*_base_analysis.json",
    "train-switch": "gap/*.csv, [switch] section",
    "distill": "models/*_base.ckpt, switch/*.ckpt, [distill] section",
    "ablate": "models/*_base.ckpt, switch/*.ckpt, [ablate] section",
    "report": "reports/, distill/, gap/, ablation/, [report] section",
}


def _failing_module(exc: BaseException) -> str:
    """Innermost package module in the traceback, e.g. ``xdl.mcq``."""
    module = "xdl.pipeline"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("xdl."):
            module = name
    return module


def _stamp_ok(run: Run, stage: str, h: str) -> list[str] | None:
    path = run.out / STAMP_DIR / f"{stage}.json"
    if not path.is_file():
        return None
    stamp = json.loads(path.read_text())
    if stamp.get("hash") != h:
        return None
    for rel, digest in stamp["outputs"].items():
        f = run.out / rel
        if not f.is_file() or _file_sha(f) != digest:
            return None
    return list(stamp["outputs"])


def run_pipeline(config, until: str = "report", *, force: bool = False) -> RunManifest:
    """Run every stage up to and including ``until``, reusing cached stages."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}; expected one of {STAGES}")
    run = Run(cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    old = run.out / MANIFEST
    artifacts: dict[str, str] = {}
    if old.is_file():
        try:
            prev = RunManifest.read(old)
            if prev.config_hash == cfg.config_hash():
                artifacts = dict(prev.artifacts)
        except (ValueError, TypeError, KeyError):
            pass
    manifest = RunManifest(cfg.config_hash(), __version__, _now(), artifacts=artifacts)
    for stage in STAGES[: STAGES.index(until) + 1]:
        h = cfg.stage_hash(stage)
        cached = None if force else _stamp_ok(run, stage, h)
        if cached is not None:
            log.info("stage %s: cached", stage)
            manifest.stages[stage] = {"status": "skipped", "hash": h}
            for rel in cached:
                manifest.artifacts[rel] = _file_sha(run.out / rel)
            continue
        log.info("stage %s: running", stage)
        try:
            produced = STAGE_FUNCS[stage](run)
        except Exception as exc:
            err = StageError(stage, _failing_module(exc), f"{cfg.source}; {STAGE_INPUTS[stage]}", exc)
            manifest.stages[stage] = {"status": "failed", "hash": h, "error": str(err)}
            manifest.status = "failed"
            manifest.finished_at = _now()
            manifest.write(run.out)
            raise err from exc
        outputs = {}
        for path in produced:
            rel = path.relative_to(run.out).as_posix()
            outputs[rel] = manifest.artifacts[rel] = _file_sha(path)
        stamp = run.p(f"{STAMP_DIR}/{stage}.json")
        stamp.write_text(json.dumps({"hash": h, "outputs": outputs}, indent=2, sort_keys=True) + "\n")
        manifest.stages[stage] = {"status": "ran", "hash": h}
    manifest.status = "ok"
    manifest.finished_at = _now()
    manifest.write(run.out)
    return manifest


def clean(out_dir) -> None:
    """Remove stage stamps so the next run recomputes everything."""
    shutil.rmtree(Path(out_dir) / STAMP_DIR, ignore_errors=True)
