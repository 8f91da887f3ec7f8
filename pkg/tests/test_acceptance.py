"""End-to-end acceptance checks, one per criterion.

Each check prints a single PASS/FAIL line. Run standalone with ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

sys.path.insert(0, str(Path(__file__).parent))

from xdl import dataset as ds  # noqa: E402
from xdl import mcq  # noqa: E402
from xdl import models as md  # noqa: E402
from xdl import numerics as nx  # noqa: E402
from xdl import pipeline as pl  # noqa: E402

from chain import SEEDS, ablation, chain, reverse_outcome  # noqa: E402


def report(n: int, ok: bool, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)
    return ok


# ---------------------------------------------------------------------------
# 1. gradient oracle
# ---------------------------------------------------------------------------


def _random_model(rng, case):
    din = int(rng.integers(2, 7))
    C = int(rng.integers(2, 6))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=rng.integers(0, 3)))
    m = md.init_classifier(din, hidden, C, case)
    if case % 2:
        r = int(rng.integers(1, min([din, C, *hidden]) + 1))
        m = md.attach_lora(m, r, alpha=float(rng.uniform(0.5, 3)), seed=case)
        for a in m.adapters:
            a.B = rng.normal(0, 0.5, a.B.shape)
    return m, din, C


def _loss(kind, x, y, t, T):
    def f(model):
        z = md.forward(model, x)
        parts = []
        if kind in ("ce", "combined"):
            parts.append(nx.cross_entropy_rows(z, y))
        if kind in ("kl", "combined"):
            parts.append(nx.kl_distill_rows(t, z, T))
        return float(sum(l.sum() for l, _ in parts)), sum(g for _, g in parts)

    return f


def criterion_1(cases: int = 100) -> tuple[bool, str]:
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for case in range(cases):
        m, din, C = _random_model(rng, case)
        kind = ("ce", "kl", "combined")[case % 3]
        x = rng.normal(size=(3, din))
        y = rng.integers(0, C, 3)
        t = rng.normal(0, 2, size=(3, C))
        f = _loss(kind, x, y, t, float(rng.uniform(0.5, 4)))
        _, g = f(m)
        for name, analytic in md.backward(m, x, g).items():
            def scalar(v, name=name):
                mm = m.copy()
                p = mm.params()
                p[name] = v
                mm.set_params(p)
                return f(mm)[0]

            fd = nx.finite_diff_grad(scalar, m.params()[name], 1e-3, order=4)
            worst = max(worst, nx.max_relative_error(analytic, fd))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 10
    return ok, f"{cases} cases, max relative error {worst:.2e} (< 1e-6), {elapsed:.1f}s (< 10s)"


# ---------------------------------------------------------------------------
# 2. loss identities
# ---------------------------------------------------------------------------


def criterion_2() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    failures = []
    for _ in range(200):
        k = int(rng.integers(2, 40))
        z = rng.normal(0, 5, k)
        T = float(rng.uniform(0.2, 8))
        loss, grad = nx.kl_distill_loss(z, z, T)
        if loss != 0.0 or np.any(grad != 0.0):
            failures.append("KL(p||p) != 0")
        c = float(rng.normal(0, 50))
        if abs(nx.cross_entropy(np.full(k, c), int(rng.integers(k)))[0] - np.log(k)) > 1e-12:
            failures.append("CE at uniform logits != ln K")
        p, q = nx.softmax(z), nx.softmax(z + c)
        if np.argmax(p) != np.argmax(q) or np.max(np.abs(p - q)) > 1e-12:
            failures.append("softmax shift invariance")

    for case in range(20):
        m = md.init_classifier(8, (6, 5), 4, case)
        x = rng.normal(size=(7, 8))
        before = md.forward(m, x)
        lora = md.attach_lora(m, 3, seed=case)
        if md.forward(lora, x).tobytes() != before.tobytes():
            failures.append("LoRA attach changed forward")
        for a in lora.adapters:
            a.B = rng.normal(size=a.B.shape)
        adapted = md.forward(lora, x)
        merged = md.merge_lora(lora)
        if merged.has_adapters or np.max(np.abs(md.forward(merged, x) - adapted)) > 1e-12:
            failures.append("LoRA merge+detach")
    ok = not failures
    return ok, "KL identity, CE ln K, softmax shift, LoRA no-op and merge" + ("" if ok else f": {sorted(set(failures))}")


# ---------------------------------------------------------------------------
# 3. MCQ statistics
# ---------------------------------------------------------------------------


def _reference_marginals(freq, gt, k, draws, seed=12):
    """Distractor marginals from numpy's weighted sampling without replacement, an independent sampler."""
    rng = np.random.default_rng(seed)
    others = np.array([c for c in range(len(freq)) if c != gt])
    w = freq[others] / freq[others].sum()
    target = np.zeros(len(freq))
    for _ in range(draws):
        target[others[rng.choice(len(others), k - 1, replace=False, p=w)]] += 1
    return target / target.sum()


def criterion_3(n: int = 10_000) -> tuple[bool, str]:
    C, K, gt = 30, 10, 4
    freq = 1.0 / np.arange(1, C + 1)
    freq /= freq.sum()
    start = time.perf_counter()
    counts = np.zeros(C)
    slots = np.zeros(K, dtype=int)
    for i in range(n):
        item = mcq.build_mcq(i, gt, freq, K, mcq.item_rng(3, i))
        slots[item.answer_slot] += 1
        for s, c in enumerate(item.options):
            if s != item.answer_slot:
                counts[c] += 1
    p_slot = stats.chisquare(slots).pvalue
    elapsed = time.perf_counter() - start
    target = _reference_marginals(freq, gt, K, 50_000)
    tv = 0.5 * np.abs(counts / counts.sum() - target).sum()
    ok = p_slot > 0.01 and tv <= 0.02 and elapsed < 30
    return ok, (f"{n} items, answer-slot chi-square p={p_slot:.3f} (> 0.01), "
                f"distractor TV {tv:.4f} (<= 0.02), {elapsed:.1f}s (< 30s)")


# ---------------------------------------------------------------------------
# 4. sensory gap
# ---------------------------------------------------------------------------


def criterion_4() -> tuple[bool, str]:
    start = time.perf_counter()
    rows, ok = [], True
    for seed in SEEDS:
        c = chain(seed)
        gap = c.reports["visual", "analysis"].overall - c.reports["audio", "analysis"].overall
        vis = sum(c.gap.labels[k] for k in c.groups["visual"])
        aud = sum(1 - c.gap.labels[k] for k in c.groups["audio"])
        ok &= gap >= 0.08 and vis >= 8 and aud >= 8
        rows.append(f"seed {seed}: gap {100 * gap:.1f}pt, visual-strong 1s {vis}/10, audio-strong 0s {aud}/10")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 180
    return ok, "; ".join(rows) + f" ({elapsed:.1f}s)"


# ---------------------------------------------------------------------------
# 5. switch quality
# ---------------------------------------------------------------------------


def criterion_5() -> tuple[bool, str]:
    from xdl import switch as sw

    rows, ok = [], True
    for seed in SEEDS:
        c = chain(seed)
        analysis = c.scenes.split("analysis")
        truth = sw.oracle_decide(c.gap, analysis.class_ids)
        oracle = float(np.mean(sw.oracle_decide(c.gap, analysis.class_ids) == truth))
        trained = float(np.mean(c.switch.decide_many(analysis.audio) == truth))
        ok &= c.switch_val >= 0.85 and oracle >= trained
        rows.append(f"seed {seed}: val {c.switch_val:.3f}, agreement oracle {oracle:.3f} >= trained {trained:.3f}")
    return ok, "; ".join(rows)


# ---------------------------------------------------------------------------
# 6. distillation gain
# ---------------------------------------------------------------------------


def criterion_6() -> tuple[bool, str]:
    start = time.perf_counter()
    rows, ok = [], True
    for seed in SEEDS:
        c = chain(seed)
        out = ablation(seed)["teacher_labels"]
        rev = reverse_outcome(seed)
        strong = c.groups["audio"]
        drop = out.before["analysis"].mean_over(strong) - out.after["analysis"].mean_over(strong)
        gain, rgain = out.gain("analysis"), rev.gain("analysis")
        ok &= gain >= 0.15 and drop <= 0.03 and 0 < rgain < gain
        rows.append(f"seed {seed}: gain {100 * gain:.1f}pt, audio-strong drop {100 * drop:.1f}pt, "
                    f"reverse gain {100 * rgain:.1f}pt")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 300
    return ok, "; ".join(rows) + f" ({elapsed:.1f}s)"


# ---------------------------------------------------------------------------
# 7. ablation ordering
# ---------------------------------------------------------------------------


def criterion_7() -> tuple[bool, str]:
    rows, ok = [], True
    for seed in SEEDS:
        c = chain(seed)
        outs = ablation(seed)
        strong = c.groups["audio"]
        after = {k: o.after["analysis"].overall for k, o in outs.items()}
        baseline = outs["teacher_labels"].before["analysis"].overall
        others = max(v for k, v in after.items() if k != "ground_truth_upper_bound")
        gt = after["ground_truth_upper_bound"]

        def regression(name):
            o = outs[name]
            return o.before["analysis"].mean_over(strong) - o.after["analysis"].mean_over(strong)

        reg_default, reg_off = regression("teacher_labels"), regression("teacher_labels_no_anti_forgetting")
        above = all(v >= baseline for v in after.values())
        seed_ok = gt >= others - 0.005 and above and reg_off >= reg_default
        ok &= seed_ok
        rows.append(f"seed {seed}: upper bound {100 * gt:.1f} vs best other {100 * others:.1f}, "
                    f"all modes >= baseline {100 * baseline:.1f}: {above}, "
                    f"regression without anti-forgetting {100 * reg_off:.1f}pt >= default {100 * reg_default:.1f}pt")
    return ok, "; ".join(rows)


# ---------------------------------------------------------------------------
# 8. determinism and persistence
# ---------------------------------------------------------------------------


def _numeric_artifacts(out: Path) -> dict[str, bytes]:
    return {
        p.relative_to(out).as_posix(): p.read_bytes()
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json" and ".xdl-stages" not in p.parts
    }


def criterion_8() -> tuple[bool, str]:
    failures = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = pl.load_config()
        a = pl.run_pipeline(cfg.with_overrides(out=str(tmp / "a")))
        b = pl.run_pipeline(cfg.with_overrides(out=str(tmp / "b")))
        files_a, files_b = _numeric_artifacts(tmp / "a"), _numeric_artifacts(tmp / "b")
        if files_a != files_b or a.content_hash() != b.content_hash():
            failures.append("pipeline artifacts differ between identical runs")

        m = md.load_checkpoint(tmp / "a/models/audio_distilled.ckpt")
        md.save_checkpoint(m, tmp / "again.ckpt")
        back = md.load_checkpoint(tmp / "again.ckpt")
        same = set(back.params()) == set(m.params()) and all(
            back.params()[k].tobytes() == v.tobytes() for k, v in m.params().items()
        )
        if not same or (tmp / "again.ckpt").read_bytes() != (tmp / "a/models/audio_distilled.ckpt").read_bytes():
            failures.append("checkpoint round trip")

        scenes = ds.generate(ds.default_scenario(0))
        path = ds.export_features(scenes, tmp / "s.features")
        back_s = ds.ingest_features(path, scenes.class_names)
        if not (back_s.audio.tobytes() == scenes.audio.tobytes()
                and back_s.visual.tobytes() == scenes.visual.tobytes()
                and np.array_equal(back_s.ids, scenes.ids)
                and np.array_equal(back_s.class_ids, scenes.class_ids)
                and list(back_s.splits) == list(scenes.splits)):
            failures.append("feature file round trip")
        n = len(files_a)
    ok = not failures
    return ok, (f"{n} artifacts byte-identical across two default runs, checkpoint and feature round trips bit-exact"
                if ok else "; ".join(failures))


CRITERIA = {n: globals()[f"criterion_{n}"] for n in range(1, 9)}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, capsys):
    ok, detail = CRITERIA[n]()
    with capsys.disabled():
        print()
        report(n, ok, detail)
    assert ok, detail


def main() -> int:
    results = [report(n, *CRITERIA[n]()) for n in sorted(CRITERIA)]
    print(f"{sum(results)}/{len(results)} criteria passed")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
