import json
import math

import numpy as np
import pytest

from vca.core_math import FeatureExtractor, SeededRng
from vca.dialogue import (
    MANIFEST_FILE,
    PREFERENCE_FILE,
    PromptEmbedding,
    SyntheticUser,
    generate_feedback,
    load_dialogues,
    load_manifest,
    refine_prompt,
    run_dialogue,
    save_dialogue,
    synthesize_dataset,
    validate_dialogue,
)
from vca.errors import DatasetError
from vca.latent_dynamics import Denoiser, NoiseSchedule
from vca.preference import Scorer, load_preference_pairs, pairwise_accuracy
from vca.rewards import RewardSchedule, weights_at

M = 4


def unit_gap_start(seed=0, m=M):
    rng = SeededRng(seed)
    target = rng.normal(m)
    step = rng.normal(m)
    return target, PromptEmbedding(target + step / np.linalg.norm(step))


def dialogue_parts(seed=0, d=5, m=M, k=6):
    rng = SeededRng(seed)
    den = Denoiser.random(d, m, rng.child("den"))
    scorer = Scorer.create(rng.child("sc"), m, k, base_std=0.3)
    return den, scorer, FeatureExtractor.from_seed(seed, d, k)


def run(user, psi0, seed=0, max_rounds=30, **kw):
    den, scorer, ext = dialogue_parts(seed)
    return run_dialogue(user, den, None, scorer, ext, NoiseSchedule(), RewardSchedule(), max_rounds,
                        SeededRng(seed + 100), psi0, **kw)


def test_feedback_examples():
    target, psi0 = unit_gap_start()
    user = SyntheticUser(target, gain=0.3)
    assert not np.any(generate_feedback(user, PromptEmbedding(target)))
    fb = generate_feedback(user, psi0)
    assert np.linalg.norm(fb) == pytest.approx(0.3 * user.gap(psi0), abs=1e-15)
    full = SyntheticUser(target, gain=1.0)
    np.testing.assert_allclose(refine_prompt(psi0, generate_feedback(full, psi0), 1.0).psi, target, atol=1e-15)
    with pytest.raises(ValueError):
        generate_feedback(user, PromptEmbedding(np.zeros(M + 1)))
    with pytest.raises(ValueError):
        SyntheticUser(target, gain=0.0)


def test_refine_prompt_blend():
    psi = PromptEmbedding([1.0, 2.0], t=3)
    same = refine_prompt(psi, [0.0, 0.0], 0.7)
    assert np.array_equal(same.psi, psi.psi) and same.t == 4
    assert np.array_equal(refine_prompt(psi, [2.0, -4.0], 0.5).psi, [2.0, 0.0])
    with pytest.raises(ValueError):
        refine_prompt(psi, [0.0, 0.0], 1.5)


def test_geometric_gap_decay_is_exact():
    target, psi = unit_gap_start(3)
    user = SyntheticUser(target, gain=0.2)
    g0 = user.gap(psi)
    for t in range(1, 30):
        psi = refine_prompt(psi, generate_feedback(user, psi), 1.0)
        assert user.gap(psi) == pytest.approx(0.8**t * g0, rel=1e-12)
        if t == 2:
            assert user.gap(psi) / g0 == pytest.approx(0.64, rel=1e-12)
    # partial blend realizes the rate 1 - rho g
    target, psi = unit_gap_start(4)
    user = SyntheticUser(target, gain=0.5)
    for t in range(1, 10):
        psi = refine_prompt(psi, generate_feedback(user, psi), 0.4)
        assert user.gap(psi) == pytest.approx(0.8**t, rel=1e-12)


def test_rounds_to_satisfaction():
    target, psi0 = unit_gap_start()
    assert run(SyntheticUser(target), PromptEmbedding(target)).rounds_to_satisfaction == 0
    assert run(SyntheticUser(target, gain=1.0), psi0).rounds_to_satisfaction == 1
    tr = run(SyntheticUser(target, gain=0.2, threshold=0.05), psi0)
    assert tr.rounds_to_satisfaction == math.ceil(math.log(0.05) / math.log(0.8)) == 14
    assert len(tr.outputs) == len(tr.breakdowns) == len(tr.gaps) == 14
    assert [p.t for p in tr.prompts] == list(range(1, 15))
    assert run(SyntheticUser(target), psi0, max_rounds=5).rounds_to_satisfaction is None
    with pytest.raises(ValueError):
        run(SyntheticUser(target), psi0, max_rounds=0)


def test_dialogue_rewards_use_round_weights():
    target, psi0 = unit_gap_start(1)
    tr = run(SyntheticUser(target), psi0, seed=1)
    first = tr.breakdowns[0]
    assert first.r_div == 0.0 and first.r_cons == 0.0
    for t, bd in enumerate(tr.breakdowns, start=1):
        assert bd.weights == weights_at(RewardSchedule(), t)


def test_dialogue_is_seed_deterministic():
    target, psi0 = unit_gap_start(2)
    a = run(SyntheticUser(target), psi0, seed=2)
    b = run(SyntheticUser(target), psi0, seed=2)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def good_doc():
    return {"dialogue_id": "x", "rounds": [{"prompt_embedding": [1.0, 2.0], "target_feature": [0.5, 0.5, 0.5],
                                            "preference_label": 1}]}


def test_validation_names_the_broken_invariant():
    doc = good_doc()
    doc["rounds"].append({"prompt_embedding": [1.0, 2.0], "target_feature": [0.5]})
    with pytest.raises(ValueError, match=r"rounds\[1\]\.target_feature.*consistent"):
        validate_dialogue(doc)
    with pytest.raises(ValueError, match="at least one round"):
        validate_dialogue({"dialogue_id": "x", "rounds": []})
    with pytest.raises(ValueError, match="dialogue_id"):
        validate_dialogue({"rounds": good_doc()["rounds"]})
    bad = good_doc()
    bad["rounds"][0]["preference_label"] = 2
    with pytest.raises(ValueError, match="preference_label"):
        validate_dialogue(bad)
    bad = good_doc()
    bad["rounds"][0]["prompt_embedding"] = ["a"]
    with pytest.raises(ValueError, match=r"rounds\[0\]"):
        validate_dialogue(bad)


def test_loader_skips_bad_files_and_round_trips(tmp_path):
    rec = validate_dialogue(good_doc())
    save_dialogue(tmp_path / "a.json", rec)
    (tmp_path / "b.json").write_text("{not json")
    broken = good_doc()
    broken["rounds"][0]["target_feature"] = []
    (tmp_path / "c.json").write_text(json.dumps(broken))
    errors = []
    out = load_dialogues(tmp_path, errors)
    assert len(out) == 1 and out[0].to_dict() == rec.to_dict()
    assert [name for name, _ in errors] == ["b.json", "c.json"]
    assert "target_feature" in errors[1][1]


def test_loader_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_dialogues(tmp_path)
    with pytest.raises(FileNotFoundError):
        load_dialogues(tmp_path / "missing")


def synth(path, seed=0, n=5, rounds=3, d=6, m=M, k=5):
    ext = FeatureExtractor.from_seed(seed, d, k)
    return synthesize_dataset(path, n, rounds, d, m, ext, SeededRng(seed)), ext


def test_synthesize_counts_and_split(tmp_path):
    manifest, _ = synth(tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert len(files) == 7 and PREFERENCE_FILE in files and MANIFEST_FILE in files
    recs = load_dialogues(tmp_path)
    assert len(recs) == 5 and all(len(r.rounds) == 3 for r in recs)
    assert len(manifest["train"]) == 4 and len(manifest["test"]) == 1
    assert sorted(manifest["train"] + manifest["test"]) == sorted(r.dialogue_id for r in recs)
    assert load_manifest(tmp_path) == manifest
    assert len(load_preference_pairs(tmp_path / PREFERENCE_FILE)) == 15


def test_planted_direction_scorer_is_perfect(tmp_path):
    manifest, ext = synth(tmp_path, seed=3, n=20)
    u = np.array(manifest["meta"]["planted_feature_direction"])
    base = np.concatenate([np.zeros(M), u])[None, :]
    perfect = Scorer(base, np.zeros((1, 1)), np.zeros((1, M + ext.k)), M, ext.k, 0.25)
    pairs = load_preference_pairs(tmp_path / PREFERENCE_FILE)
    assert pairwise_accuracy(perfect, pairs) == 1.0
    assert all(u @ (p.positive_feature - p.negative_feature) > 0 for p in pairs)


def test_synthesize_is_byte_identical(tmp_path):
    synth(tmp_path / "a", seed=9)
    synth(tmp_path / "b", seed=9)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_synthesize_rejects_bad_input(tmp_path):
    (tmp_path / "file").write_text("")
    with pytest.raises(OSError):
        synth(tmp_path / "file" / "sub")
    with pytest.raises(ValueError):
        synth(tmp_path / "x", n=0)
