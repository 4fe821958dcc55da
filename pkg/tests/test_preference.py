import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_diff, jacobi_singular_values
from vca.core_math import SeededRng
from vca.errors import DatasetError
from vca.preference import (
    PreferencePair,
    Scorer,
    cosine_lr,
    dpo_loss,
    dpo_loss_grad,
    load_preference_pairs,
    load_scorer,
    mi_reward,
    pairwise_accuracy,
    planted_preference_pairs,
    save_preference_pairs,
    save_scorer,
    score,
    train_scorer,
)


def random_scorer(seed, m=3, k=4, h=5, r=2):
    rng = SeededRng(seed)
    return Scorer(rng.normal((h, m + k)), rng.normal((h, r)), rng.normal((r, m + k)), m, k, 0.25)


def test_zero_scorer_scores_zero():
    sc = Scorer.create(SeededRng(0), m=3, k=4)
    rng = SeededRng(1)
    for _ in range(20):
        assert score(sc, rng.normal(3), rng.normal(4)) == 0.0


def test_score_is_mean_of_logits():
    sc = random_scorer(2)
    p, f = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.0, 1.0, -1.0])
    x = np.concatenate([p, f])
    logits = [sum((sc.base[i, j] + 0.25 * sum(sc.B[i, r] * sc.A[r, j] for r in range(2))) * x[j] for j in range(7))
              for i in range(5)]
    assert score(sc, p, f) == pytest.approx(sum(logits) / 5, abs=1e-12)
    assert mi_reward(sc, p, f) == score(sc, p, f)


def test_score_affine_identity():
    sc = random_scorer(3)
    rng = SeededRng(4)
    for _ in range(50):
        p, a, b = rng.normal(3), rng.normal(4), rng.normal(4)
        lhs = score(sc, p, a + b)
        rhs = score(sc, p, a) + score(sc, p, b) - score(sc, p, np.zeros(4))
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_score_dimension_mismatch():
    sc = random_scorer(3)
    with pytest.raises(ValueError):
        score(sc, np.zeros(2), np.zeros(4))


def test_dpo_loss_anchors():
    sc = random_scorer(5)
    p = np.ones(3)
    same = PreferencePair(p, np.ones(4), np.ones(4))
    assert dpo_loss(sc, same) == pytest.approx(math.log(2), abs=1e-15)
    # margin of +50 through a scorer that reads one feature coordinate
    base = np.zeros((1, 7))
    base[0, 3] = 1.0
    lin = Scorer(base, np.zeros((1, 1)), np.zeros((1, 7)), 3, 4, 0.25)
    big = PreferencePair(p, [50.0, 0, 0, 0], [0.0, 0, 0, 0])
    assert 0 <= dpo_loss(lin, big) < 1e-20
    huge = PreferencePair(p, [0.0, 0, 0, 0], [1e6, 0, 0, 0])
    assert dpo_loss(lin, huge) == pytest.approx(1e6)
    with pytest.raises(ValueError):
        dpo_loss(lin, big, beta_dpo=0)


@given(st.lists(st.floats(-200, 200), min_size=2, max_size=2, unique=True))
def test_dpo_loss_decreasing_in_margin(margins):
    lo, hi = sorted(margins)
    base = np.zeros((1, 2))
    base[0, 1] = 1.0
    sc = Scorer(base, np.zeros((1, 1)), np.zeros((1, 2)), 1, 1, 0.25)
    f = lambda m: dpo_loss(sc, PreferencePair([0.0], [m], [0.0]))
    if hi - lo > 1e-9 and f(hi) > 0:
        assert f(hi) < f(lo)
    assert f(hi) <= f(lo)


def test_dpo_gradient_matches_finite_differences():
    for seed in range(10):
        sc = random_scorer(seed)
        rng = SeededRng(100 + seed)
        pair = PreferencePair(rng.normal(3), rng.normal(4), rng.normal(4))
        gB, gA = dpo_loss_grad(sc, pair, 0.7)
        nB = central_diff(lambda b: dpo_loss(sc.with_adapter(np.array(b).reshape(sc.B.shape), sc.A), pair, 0.7),
                          sc.B.ravel())
        nA = central_diff(lambda a: dpo_loss(sc.with_adapter(sc.B, np.array(a).reshape(sc.A.shape)), pair, 0.7),
                          sc.A.ravel())
        assert np.linalg.norm(gB.ravel() - nB) <= 1e-5 * np.linalg.norm(nB)
        assert np.linalg.norm(gA.ravel() - nA) <= 1e-5 * np.linalg.norm(nA)


def test_train_zero_epochs_and_empty():
    sc = Scorer.create(SeededRng(0), 3, 4)
    pairs, _ = planted_preference_pairs(10, 3, 4, SeededRng(1))
    out, curve = train_scorer(sc, pairs, 0, 0.1, SeededRng(2))
    assert out is sc and curve == []
    with pytest.raises(ValueError):
        train_scorer(sc, [], 3, 0.1, SeededRng(2))
    with pytest.raises(ValueError):
        train_scorer(sc, pairs, 3, 0.0, SeededRng(2))


def test_single_pair_descent():
    sc = Scorer.create(SeededRng(3), 3, 4)
    pair = PreferencePair(np.ones(3), [1.0, 0.5, 0, 0], [-1.0, 0, 0.2, 0])
    losses = [dpo_loss(sc, pair)]
    for step in range(20):
        sc, _ = train_scorer(sc, [pair], 1, 1e-2, SeededRng(step))
        losses.append(dpo_loss(sc, pair))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_keeps_base_and_rank():
    rng = SeededRng(6)
    base = rng.normal((8, 32))
    sc = Scorer(base, np.zeros((8, 8)), rng.normal((8, 32)), 16, 16, 0.25)
    pairs, _ = planted_preference_pairs(64, 16, 16, SeededRng(7))
    out, curve = train_scorer(sc, pairs, 5, 0.2, SeededRng(8))
    assert np.array_equal(out.base, base)
    assert len(curve) == 5
    sv = jacobi_singular_values((out.B @ out.A).tolist())
    assert sum(s > 1e-10 * sv[0] for s in sv) <= 8


def test_training_is_seed_deterministic():
    pairs, _ = planted_preference_pairs(50, 4, 4, SeededRng(1))
    a, _ = train_scorer(Scorer.create(SeededRng(2), 4, 4), pairs, 3, 0.3, SeededRng(9))
    b, _ = train_scorer(Scorer.create(SeededRng(2), 4, 4), pairs, 3, 0.3, SeededRng(9))
    assert np.array_equal(a.B, b.B) and np.array_equal(a.A, b.A)


def test_cosine_lr():
    assert cosine_lr(0.4, 0, 10) == 0.4
    assert cosine_lr(0.4, 5, 10) == pytest.approx(0.2)
    assert cosine_lr(0.4, 10, 10) == pytest.approx(0.0, abs=1e-17)


def test_pairwise_accuracy_ties():
    sc = Scorer.create(SeededRng(0), 3, 4)
    pairs, _ = planted_preference_pairs(30, 3, 4, SeededRng(1))
    assert pairwise_accuracy(sc, pairs) == 0.5
    twins = [PreferencePair(p.prompt_embedding, p.positive_feature, p.positive_feature) for p in pairs]
    assert pairwise_accuracy(random_scorer(1), twins) == 0.5
    with pytest.raises(ValueError):
        pairwise_accuracy(sc, [])


def test_planted_direction_scorer_is_perfect():
    pairs, u = planted_preference_pairs(100, 3, 5, SeededRng(2))
    assert all(u @ (p.positive_feature - p.negative_feature) >= 0.5 for p in pairs)


def test_pair_and_scorer_round_trip(tmp_path):
    pairs, _ = planted_preference_pairs(5, 3, 4, SeededRng(3))
    save_preference_pairs(tmp_path / "p.json", pairs)
    back = load_preference_pairs(tmp_path / "p.json")
    assert all(np.array_equal(a.positive_feature, b.positive_feature) and a.dialogue_id == b.dialogue_id
               for a, b in zip(pairs, back))
    sc = random_scorer(4)
    save_scorer(tmp_path / "s.json", sc)
    sc2 = load_scorer(tmp_path / "s.json")
    assert np.array_equal(sc.effective(), sc2.effective())
    assert set(json.loads((tmp_path / "s.json").read_text())) >= {"base", "B_s", "A_s", "dims", "seed"}


def test_bad_preference_file(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps([{"prompt_embedding": [1.0]}]))
    with pytest.raises(DatasetError):
        load_preference_pairs(tmp_path / "p.json")
    (tmp_path / "q.json").write_text("[]")
    with pytest.raises(DatasetError):
        load_preference_pairs(tmp_path / "q.json")
