"""Pairwise preference scorer with a low-rank adapter, trained by a DPO-style loss.

The scorer maps ``x = [prompt; feature]`` to ``h`` logits through
``base + scaling * B @ A`` and reports their mean. Only ``B`` and ``A`` are
ever trained; ``base`` is frozen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vca.core_math import SeededRng, as_mat, as_vec, frozen
from vca.errors import DatasetError


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus(x: float) -> float:
    # log(1 + e^x) without overflow
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


@dataclass(frozen=True)
class Scorer:
    base: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)
    A: np.ndarray = field(repr=False)
    m: int = 16
    k: int = 16
    scaling: float = 0.25
    seed: int | None = None

    def __post_init__(self):
        h, n_in = as_mat(self.base, name="scorer base").shape
        if n_in != self.m + self.k:
            raise ValueError(f"base has {n_in} inputs, expected m + k = {self.m + self.k}")
        r = as_mat(self.B, name="B_s").shape[1]
        as_mat(self.B, (h, r), name="B_s")
        as_mat(self.A, (r, n_in), name="A_s")
        for name in ("base", "B", "A"):
            object.__setattr__(self, name, frozen(getattr(self, name)))

    @classmethod
    def create(cls, rng: SeededRng, m: int = 16, k: int = 16, h: int = 8, rank: int = 8,
               alpha: float = 16.0, rank_ref: int = 64, base_std: float = 0.0,
               seed: int | None = None) -> "Scorer":
        """New scorer with ``B = 0`` so the adapter starts as the zero map.

        ``scaling = alpha / rank_ref`` keeps the 16/64 ratio of the reference
        adapter configuration at any desk-scale rank. ``base_std = 0`` gives a
        scorer that is identically zero until trained.
        """
        n_in = m + k
        base = base_std * rng.normal((h, n_in)) if base_std > 0 else np.zeros((h, n_in))
        A = rng.normal((rank, n_in)) / np.sqrt(n_in)
        return cls(base, np.zeros((h, rank)), A, m, k, alpha / rank_ref, seed)

    @property
    def h(self) -> int:
        return self.base.shape[0]

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    def effective(self) -> np.ndarray:
        return self.base + self.scaling * (self.B @ self.A)

    def with_adapter(self, B, A) -> "Scorer":
        return Scorer(self.base, B, A, self.m, self.k, self.scaling, self.seed)

    def stacked(self, prompt, feature) -> np.ndarray:
        return np.concatenate([as_vec(prompt, self.m, name="prompt"), as_vec(feature, self.k, name="feature")])

    def to_dict(self) -> dict:
        return {
            "schema": "vca.scorer/1",
            "dims": {"m": self.m, "k": self.k, "h": self.h, "rank": self.rank},
            "scaling": self.scaling,
            "seed": self.seed,
            "base": self.base.tolist(),
            "B_s": self.B.tolist(),
            "A_s": self.A.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scorer":
        dims = d["dims"]
        return cls(np.array(d["base"]), np.array(d["B_s"]), np.array(d["A_s"]),
                   dims["m"], dims["k"], d["scaling"], d.get("seed"))


@dataclass(frozen=True)
class PreferencePair:
    prompt_embedding: np.ndarray
    positive_feature: np.ndarray
    negative_feature: np.ndarray
    dialogue_id: str = ""

    labels = (1, 0)

    def __post_init__(self):
        object.__setattr__(self, "prompt_embedding", frozen(as_vec(self.prompt_embedding, name="prompt_embedding")))
        pos = as_vec(self.positive_feature, name="positive_feature")
        neg = as_vec(self.negative_feature, pos.shape[0], name="negative_feature")
        object.__setattr__(self, "positive_feature", frozen(pos))
        object.__setattr__(self, "negative_feature", frozen(neg))


def score(sc: Scorer, prompt, feature) -> float:
    return float(np.mean(sc.effective() @ sc.stacked(prompt, feature)))


def mi_reward(sc: Scorer, prompt, feature) -> float:
    """Preference score used as the mutual-information reward."""
    return score(sc, prompt, feature)


def score_grad_adapter(sc: Scorer, prompt, feature) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``score`` with respect to ``(B, A)``."""
    x = sc.stacked(prompt, feature)
    ones = np.full(sc.h, sc.scaling / sc.h)
    return np.outer(ones, sc.A @ x), np.outer(sc.B.T @ ones, x)


def score_margin(sc: Scorer, pair: PreferencePair) -> float:
    return score(sc, pair.prompt_embedding, pair.positive_feature) - score(
        sc, pair.prompt_embedding, pair.negative_feature)


def dpo_loss(sc: Scorer, pair: PreferencePair, beta_dpo: float = 1.0) -> float:
    if beta_dpo <= 0:
        raise ValueError("beta_dpo must be positive")
    return _softplus(-beta_dpo * score_margin(sc, pair))


def dpo_loss_grad(sc: Scorer, pair: PreferencePair, beta_dpo: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``dpo_loss`` with respect to ``(B, A)``."""
    coef = -beta_dpo * _sigmoid(-beta_dpo * score_margin(sc, pair))
    gBp, gAp = score_grad_adapter(sc, pair.prompt_embedding, pair.positive_feature)
    gBn, gAn = score_grad_adapter(sc, pair.prompt_embedding, pair.negative_feature)
    return coef * (gBp - gBn), coef * (gAp - gAn)


def cosine_lr(lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return lr
    return 0.5 * lr * (1.0 + math.cos(math.pi * step / total_steps))


def train_scorer(sc: Scorer, data: Sequence[PreferencePair], epochs: int, lr: float,
                 rng: SeededRng, batch_size: int = 32, beta_dpo: float = 1.0) -> tuple[Scorer, list[float]]:
    """Mini-batch gradient descent on the mean DPO loss.

    Returns the trained scorer (the input is untouched) and the mean loss of
    each epoch, measured on each batch before its update.
    """
    if not data:
        raise ValueError("cannot train on an empty preference set")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if epochs <= 0:
        return sc, []
    n = len(data)
    batches_per_epoch = math.ceil(n / batch_size)
    total = epochs * batches_per_epoch
    B, A = sc.B.copy(), sc.A.copy()
    step = 0
    curve = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            cur = sc.with_adapter(B, A)
            gB = np.zeros_like(B)
            gA = np.zeros_like(A)
            for i in idx:
                epoch_loss += dpo_loss(cur, data[i], beta_dpo)
                b, a = dpo_loss_grad(cur, data[i], beta_dpo)
                gB += b
                gA += a
            eta = cosine_lr(lr, step, total)
            B = B - eta * gB / len(idx)
            A = A - eta * gA / len(idx)
            step += 1
        curve.append(epoch_loss / n)
    return sc.with_adapter(B, A), curve


def pairwise_accuracy(sc: Scorer, data: Sequence[PreferencePair]) -> float:
    if not data:
        raise ValueError("cannot evaluate on an empty preference set")
    hits = 0.0
    for pair in data:
        margin = score_margin(sc, pair)
        hits += 1.0 if margin > 0 else (0.5 if margin == 0 else 0.0)
    return hits / len(data)


def planted_preference_pairs(n: int, m: int, k: int, rng: SeededRng, direction=None,
                             min_gap: float = 0.5) -> tuple[list[PreferencePair], np.ndarray]:
    """Pairs whose positive has the larger projection on a planted unit direction.

    Features are standard normal; pairs whose projections differ by less than
    ``min_gap`` are redrawn, so the set is linearly separable with that margin.
    """
    if direction is None:
        direction = rng.normal(k)
    u = as_vec(direction, k, name="direction")
    u = u / np.linalg.norm(u)
    pairs = []
    while len(pairs) < n:
        prompt = rng.normal(m)
        a, b = rng.normal(k), rng.normal(k)
        gap = float(u @ (a - b))
        if abs(gap) < min_gap:
            continue
        pos, neg = (a, b) if gap > 0 else (b, a)
        pairs.append(PreferencePair(prompt, pos, neg, dialogue_id=f"planted-{len(pairs):05d}"))
    return pairs, u


def save_preference_pairs(path: str | Path, pairs: Sequence[PreferencePair]) -> None:
    doc = [
        {
            "dialogue_id": p.dialogue_id,
            "prompt_embedding": p.prompt_embedding.tolist(),
            "positive_feature": p.positive_feature.tolist(),
            "negative_feature": p.negative_feature.tolist(),
        }
        for p in pairs
    ]
    Path(path).write_text(json.dumps(doc, indent=1))


def load_preference_pairs(path: str | Path) -> list[PreferencePair]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise DatasetError(f"{path}: preference file must be a JSON array")
    pairs = []
    for i, obj in enumerate(doc):
        try:
            pairs.append(PreferencePair(obj["prompt_embedding"], obj["positive_feature"],
                                        obj["negative_feature"], str(obj.get("dialogue_id", ""))))
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"{path}: entry {i} invalid: {exc}") from exc
    if not pairs:
        raise DatasetError(f"{path}: no preference pairs")
    return pairs


def save_scorer(path: str | Path, sc: Scorer) -> None:
    Path(path).write_text(json.dumps(sc.to_dict()))


def load_scorer(path: str | Path) -> Scorer:
    return Scorer.from_dict(json.loads(Path(path).read_text()))
