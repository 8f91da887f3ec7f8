import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from xdl import dataset as ds
from xdl import mcq
from xdl.models import MlpClassifier


def inclusion_probabilities(freq, gt, k):
    """Exact P(class in distractor set) for successive sampling, by enumerating ordered draws."""
    freq = np.asarray(freq, dtype=float)
    others = [c for c in range(len(freq)) if c != gt]
    incl = np.zeros(len(freq))
    for seq in itertools.permutations(others, k - 1):
        p, left = 1.0, freq[others].sum()
        for c in seq:
            p *= freq[c] / left
            left -= freq[c]
        incl[list(seq)] += p
    return incl


def distractor_histogram(freq, gt, k, n, seed=0):
    counts = np.zeros(len(freq))
    slots = np.zeros(k, dtype=int)
    for i in range(n):
        item = mcq.build_mcq(i, gt, freq, k, mcq.item_rng(seed, i))
        for s, c in enumerate(item.options):
            if s != item.answer_slot:
                counts[c] += 1
        slots[item.answer_slot] += 1
    return counts, slots


def test_two_option_distractor_is_renormalized_frequency():
    counts, _ = distractor_histogram([0.5, 0.25, 0.25], 0, 2, 10_000)
    emp = counts / counts.sum()
    assert 0.5 * np.abs(emp - [0.0, 0.5, 0.5]).sum() <= 0.02


def test_distractor_marginals_match_successive_sampling():
    freq = np.array([0.3, 0.25, 0.15, 0.12, 0.1, 0.08])
    counts, _ = distractor_histogram(freq, 1, 4, 10_000, seed=3)
    target = inclusion_probabilities(freq, 1, 4)
    assert target.sum() == pytest.approx(3.0)
    tv = 0.5 * np.abs(counts / counts.sum() - target / 3).sum()
    assert tv <= 0.02


def test_answer_slot_uniform():
    _, slots = distractor_histogram(np.full(30, 1 / 30), 4, 10, 10_000, seed=1)
    assert stats.chisquare(slots).pvalue > 0.01


def test_k_equals_c_is_a_permutation():
    item = mcq.build_mcq(0, 2, [0.1, 0.2, 0.3, 0.4], 4, np.random.default_rng(0))
    assert sorted(item.options) == [0, 1, 2, 3]
    assert item.options[item.answer_slot] == 2


def test_build_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="exceeds"):
        mcq.build_mcq(0, 0, [0.5, 0.5], 3, rng)
    with pytest.raises(ValueError):
        mcq.build_mcq(0, 0, [0.5, 0.5], 1, rng)
    with pytest.raises(ValueError):
        mcq.build_mcq(0, 5, [0.5, 0.5], 2, rng)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0.0, 1.0), min_size=2, max_size=12).filter(lambda f: sum(f) > 0),
    st.data(),
)
def test_items_satisfy_invariants(freq, data):
    C = len(freq)
    k = data.draw(st.integers(2, C))
    gt = data.draw(st.integers(0, C - 1))
    seed = data.draw(st.integers(0, 2**31))
    item = mcq.build_mcq(7, gt, freq, k, np.random.default_rng(seed))
    assert len(item.options) == k == len(set(item.options))
    assert item.options[item.answer_slot] == gt
    assert 0 <= item.answer_slot < k


def test_items_fixed_per_scene_and_seed():
    s = ds.generate(ds.ScenarioSpec(num_classes=12, audio_strength=(1.0,) * 12, visual_strength=(1.0,) * 12,
                                    audio_dim=2, visual_dim=2, train_per_class=3, analysis_per_class=2,
                                    test_per_class=2))
    part = s.split("analysis")
    a = mcq.build_items(part, 10, 5, ds.class_frequencies(s))
    by_id = {it.scene_id: it for it in a}
    for sid, cid in zip(part.ids[::-1], part.class_ids[::-1]):
        assert mcq.build_mcq(sid, cid, ds.class_frequencies(s), 10, mcq.item_rng(5, sid)) == by_id[sid]
    assert mcq.items_digest(mcq.build_items(part, 10, 6, ds.class_frequencies(s))) != mcq.items_digest(a)


def test_choose_slot_rules():
    item = mcq.McqItem(0, (2, 1, 0), 0)
    logits = np.array([0.1, 0.9, 0.2])
    assert mcq.choose_slot(logits, item) == 1
    assert mcq.choose_slot(np.zeros(3), item) == 0
    for slot in range(3):
        opts = [c for c in (0, 2)]
        opts.insert(slot, 1)
        it = mcq.McqItem(0, tuple(opts), slot)
        assert mcq.choose_slot(logits, it) == slot
    with pytest.raises(ValueError):
        mcq.choose_slot(np.zeros(2), item)


def test_answer_mcq_with_one_hot_model():
    C = 5
    model = MlpClassifier([np.eye(C) * 10], [np.zeros(C)])
    rng = np.random.default_rng(0)
    for sid in range(50):
        gt = int(rng.integers(C))
        item = mcq.build_mcq(sid, gt, np.full(C, 0.2), 4, rng)
        assert mcq.answer_mcq(model, np.eye(C)[gt], item) == item.answer_slot
    big = mcq.McqItem(0, (0, 7), 0)
    with pytest.raises(ValueError):
        mcq.answer_mcq(model, np.zeros(C), big)


@pytest.mark.parametrize(
    "text,slot",
    [("B", 1), (" c. ", 2), ("a", 0), ("(J)", 9), ("D!", 3)],
)
def test_parse_letter_accepts(text, slot):
    assert mcq.parse_letter(text, 10) == slot


@pytest.mark.parametrize("text", ["The answer is A or B", "", "AB", "K", "E", "1", "A B"])
def test_parse_letter_rejects(text):
    with pytest.raises(mcq.ParseFailure):
        mcq.parse_letter(text, 4)


def small_scenes():
    spec = ds.ScenarioSpec(num_classes=6, audio_strength=(6.0,) * 6, visual_strength=(0.0,) * 6,
                           audio_dim=6, visual_dim=6, noise_sigma=1e-3, train_per_class=5,
                           analysis_per_class=400, test_per_class=4, seed=2)
    return spec, ds.generate(spec)


def test_evaluate_perfect_model_and_determinism():
    spec, s = small_scenes()
    proto, _ = ds.prototypes(spec)
    oracle = MlpClassifier([proto], [np.zeros(6)], modality="audio")
    rep = mcq.evaluate(oracle, s, "analysis", k=4, seed=1)
    assert rep.overall == 1.0
    again = mcq.evaluate(oracle, s, "analysis", k=4, seed=1)
    assert again.to_dict() == rep.to_dict()


def test_random_answering_is_chance():
    _, s = small_scenes()
    part = s.split("analysis")
    items = mcq.build_items(part, 4, 0, ds.class_frequencies(s))
    rng = np.random.default_rng(0)
    chosen = rng.integers(0, 4, len(items)).tolist()
    rep = mcq.score(items, chosen, part.class_ids.tolist(), 6, modality="audio", model_tag="rand", split="analysis")
    se = np.sqrt(0.25 * 0.75 / len(items))
    assert abs(rep.overall - 0.25) < 3 * se


def test_report_overall_is_weighted_mean_and_exports(tmp_path):
    _, s = small_scenes()
    part = s.split("analysis")
    items = mcq.build_items(part, 4, 0, ds.class_frequencies(s))
    chosen = np.random.default_rng(1).integers(0, 4, len(items)).tolist()
    rep = mcq.score(items, chosen, part.class_ids.tolist(), 6, modality="audio", model_tag="m",
                    split="analysis", class_names=s.class_names)
    n = sum(rep.counts.values())
    weighted = sum(rep.accuracy[c] * rep.counts[c] for c in rep.classes()) / n
    assert abs(weighted - rep.overall) <= 1e-12
    csv_path, json_path = rep.write(tmp_path / "r")
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "class_id,class_name,n,correct,accuracy"
    assert lines[-1].startswith("overall,")
    assert len(lines) == 6 + 2
    back = mcq.ClasswiseReport.from_dict(json.loads(json_path.read_text()))
    assert back.to_dict() == rep.to_dict()


def test_parse_failures_score_wrong():
    _, s = small_scenes()
    part = s.split("test")
    items = mcq.build_items(part, 4, 0, ds.class_frequencies(s))
    good = [mcq.LETTERS[it.answer_slot] for it in items]
    rep = mcq.score_responses(s, items, good, modality="audio", model_tag="x", split="test")
    assert rep.overall == 1.0 and rep.parse_failures == 0
    bad = ["maybe"] + good[1:]
    rep = mcq.score_responses(s, items, bad, modality="audio", model_tag="x", split="test")
    assert rep.parse_failures == 1
    assert rep.overall == pytest.approx(1 - 1 / len(items))


def test_prompt_lists_letters():
    item = mcq.McqItem(3, (1, 0), 1)
    text = item.prompt(["dog", "cat"])
    assert "A. cat" in text and "B. dog" in text and "A to B" in text
