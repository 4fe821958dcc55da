"""Multi-round dialogue with a synthetic user, plus the on-disk dataset layout.

Dataset directory layout::

    dialogue_00000.json ...   one dialogue per file
    preferences.json          every preference pair, one JSON array
    manifest.json             {"train": [ids], "test": [ids], "meta": {...}}
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vca.adaptation import LoraAdapter, adapted
from vca.core_math import FeatureExtractor, SeededRng, as_vec, frozen, sample_gaussian
from vca.errors import DatasetError
from vca.latent_dynamics import Denoiser, NoiseSchedule, RoundConditioning, compose_two_stage
from vca.preference import PreferencePair, Scorer, mi_reward, save_preference_pairs
from vca.rewards import (
    RewardBreakdown,
    RewardSchedule,
    consistency_reward,
    diversity_reward,
    total_reward,
)

log = logging.getLogger(__name__)

PREFERENCE_FILE = "preferences.json"
MANIFEST_FILE = "manifest.json"
RESERVED_FILES = {PREFERENCE_FILE, MANIFEST_FILE}


@dataclass(frozen=True)
class PromptEmbedding:
    psi: np.ndarray
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "psi", frozen(as_vec(self.psi, name="prompt embedding")))


@dataclass(frozen=True)
class SyntheticUser:
    target: np.ndarray
    gain: float = 0.2
    threshold: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "target", frozen(as_vec(self.target, name="target embedding")))
        if not (0.0 < self.gain <= 1.0):
            raise ValueError(f"feedback gain must lie in (0, 1], got {self.gain}")
        if self.threshold <= 0:
            raise ValueError("satisfaction threshold must be positive")

    def gap(self, psi: PromptEmbedding) -> float:
        return float(np.linalg.norm(self.target - psi.psi))

    def satisfied(self, psi: PromptEmbedding) -> bool:
        return self.gap(psi) < self.threshold


def generate_feedback(user: SyntheticUser, psi_t: PromptEmbedding) -> np.ndarray:
    psi = as_vec(psi_t.psi, user.target.shape[0], name="prompt embedding")
    return user.gain * (user.target - psi)


def refine_prompt(psi_prev: PromptEmbedding, feedback, blend: float) -> PromptEmbedding:
    """Blend the feedback-adjusted prompt with the previous one.

    ``blend * (psi + feedback) + (1 - blend) * psi`` collapses to
    ``psi + blend * feedback``.
    """
    if not (0.0 <= blend <= 1.0):
        raise ValueError(f"blend must lie in [0, 1], got {blend}")
    fb = as_vec(feedback, psi_prev.psi.shape[0], name="feedback")
    return PromptEmbedding(psi_prev.psi + blend * fb, psi_prev.t + 1)


@dataclass
class DialogueTranscript:
    prompts: list[PromptEmbedding] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    breakdowns: list[RewardBreakdown] = field(default_factory=list)
    gaps: list[float] = field(default_factory=list)
    rounds_to_satisfaction: int | None = None

    def to_dict(self) -> dict:
        return {
            "rounds_to_satisfaction": self.rounds_to_satisfaction,
            "rounds": [
                {
                    "round": p.t,
                    "prompt_embedding": p.psi.tolist(),
                    "output_latent": o.tolist(),
                    "gap": g,
                    "reward": vars(b),
                }
                for p, o, g, b in zip(self.prompts, self.outputs, self.gaps, self.breakdowns)
            ],
        }


def run_dialogue(user: SyntheticUser, den: Denoiser, lora: LoraAdapter | None, scorer: Scorer,
                 extractor: FeatureExtractor, sched: NoiseSchedule, reward_sched: RewardSchedule,
                 max_rounds: int, rng: SeededRng, psi0: PromptEmbedding, blend: float = 1.0,
                 conditioning_scale: float = 0.1) -> DialogueTranscript:
    """Refine the prompt round by round until the user is satisfied.

    Each round: feedback, prompt refinement, two-stage generation from the
    previous round's output noised at ``tau1`` (the zero image in round 1),
    then rewards over all outputs so far with the schedule weights at the
    round index. ``rounds_to_satisfaction`` stays ``None`` if ``max_rounds``
    runs out first.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    den_eff = adapted(den, lora) if lora is not None else den
    tr = DialogueTranscript()
    psi = psi0
    if user.satisfied(psi):
        tr.rounds_to_satisfaction = 0
        return tr
    prev = np.zeros(den.d)
    for t in range(1, max_rounds + 1):
        psi = refine_prompt(psi, generate_feedback(user, psi), blend)
        tau1, tau2 = _distinct_steps(rng, sched)
        ctx1 = RoundConditioning(conditioning_scale * rng.normal(den.m), t, (tau1, tau2))
        ctx2 = RoundConditioning(conditioning_scale * rng.normal(den.m), t, (tau1, tau2))
        z_x = prev + sample_gaussian(rng, den.d, sched.sigma(tau1))
        out = compose_two_stage(den_eff, z_x, ctx1, ctx2, psi.psi, sched, rng)
        tr.prompts.append(psi)
        tr.outputs.append(out)
        feats = [extractor(o) for o in tr.outputs]
        r_div = diversity_reward(feats) if len(feats) >= 2 else 0.0
        r_cons = consistency_reward(feats) if len(feats) >= 2 else 0.0
        r_mi = mi_reward(scorer, psi.psi, feats[-1])
        tr.breakdowns.append(total_reward(reward_sched, t, r_div, r_cons, r_mi))
        tr.gaps.append(user.gap(psi))
        prev = out
        if user.satisfied(psi):
            tr.rounds_to_satisfaction = t
            break
    return tr


def _distinct_steps(rng: SeededRng, sched: NoiseSchedule) -> tuple[int, int]:
    lo, hi = sched.T1, sched.T2
    if hi == lo:
        hi = min(lo + 1, sched.T)
        if hi == lo:
            raise ValueError("noise schedule admits only one step; tau1 and tau2 must differ")
    tau1 = int(rng.integers(lo, hi))
    tau2 = int(rng.integers(lo, hi - 1))
    if tau2 >= tau1:
        tau2 += 1
    return tau1, tau2


@dataclass(frozen=True)
class DialogueRound:
    prompt_embedding: np.ndarray
    target_feature: np.ndarray
    preference_label: int | None = None


@dataclass(frozen=True)
class DialogueRecord:
    dialogue_id: str
    rounds: tuple[DialogueRound, ...]

    def to_dict(self) -> dict:
        rounds = []
        for r in self.rounds:
            obj = {"prompt_embedding": r.prompt_embedding.tolist(), "target_feature": r.target_feature.tolist()}
            if r.preference_label is not None:
                obj["preference_label"] = r.preference_label
            rounds.append(obj)
        return {"dialogue_id": self.dialogue_id, "rounds": rounds}


def validate_dialogue(obj) -> DialogueRecord:
    """Build a record from parsed JSON; raise ``ValueError`` naming the first broken invariant."""
    if not isinstance(obj, dict):
        raise ValueError("document: must be a JSON object")
    if "dialogue_id" not in obj:
        raise ValueError("dialogue_id: missing")
    rounds = obj.get("rounds")
    if not isinstance(rounds, list) or not rounds:
        raise ValueError("rounds: at least one round required")
    m_len = k_len = None
    out = []
    for i, r in enumerate(rounds):
        if not isinstance(r, dict):
            raise ValueError(f"rounds[{i}]: must be an object")
        try:
            psi = np.asarray(r["prompt_embedding"], dtype=np.float64)
            feat = np.asarray(r["target_feature"], dtype=np.float64)
        except KeyError as exc:
            raise ValueError(f"rounds[{i}].{exc.args[0]}: missing") from None
        except (TypeError, ValueError):
            raise ValueError(f"rounds[{i}]: vectors must be arrays of reals") from None
        for name, v in (("prompt_embedding", psi), ("target_feature", feat)):
            if v.ndim != 1 or v.size == 0:
                raise ValueError(f"rounds[{i}].{name}: must be a nonempty array of reals")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"rounds[{i}].{name}: entries must be finite")
        m_len = psi.size if m_len is None else m_len
        k_len = feat.size if k_len is None else k_len
        if psi.size != m_len:
            raise ValueError(f"rounds[{i}].prompt_embedding: vector length {psi.size} != {m_len} (lengths must be consistent)")
        if feat.size != k_len:
            raise ValueError(f"rounds[{i}].target_feature: vector length {feat.size} != {k_len} (lengths must be consistent)")
        label = r.get("preference_label")
        if label is not None and label not in (0, 1):
            raise ValueError(f"rounds[{i}].preference_label: must be 0 or 1")
        out.append(DialogueRound(frozen(psi), frozen(feat), label))
    return DialogueRecord(str(obj["dialogue_id"]), tuple(out))


def save_dialogue(path: str | Path, record: DialogueRecord) -> None:
    Path(path).write_text(json.dumps(record.to_dict(), indent=1))


def load_dialogues(path: str | Path, errors: list | None = None) -> list[DialogueRecord]:
    """Load every dialogue file in a directory (or a single file).

    Malformed files are skipped and reported as ``(file name, message)`` in
    ``errors`` and the log. Raises ``DatasetError`` if nothing valid remains.
    """
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset path not found: {p}")
    if p.is_dir():
        files = sorted(f for f in p.glob("*.json") if f.name not in RESERVED_FILES)
    else:
        files = [p]
    records = []
    for f in files:
        try:
            records.append(validate_dialogue(json.loads(f.read_text())))
        except (ValueError, json.JSONDecodeError) as exc:
            msg = f"{f.name}: {exc}"
            log.warning("skipping malformed dialogue file %s", msg)
            if errors is not None:
                errors.append((f.name, str(exc)))
    if not records:
        raise DatasetError(f"no valid dialogue records under {p}")
    return records


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def synthesize_dataset(out_dir: str | Path, n_dialogues: int, rounds: int, d: int, m: int,
                       extractor: FeatureExtractor, rng: SeededRng, planted=None,
                       planted_strength: float = 3.0, gain: float = 0.2,
                       target_noise: float = 0.05) -> dict:
    """Write a synthetic dialogue dataset with a planted preference direction.

    Every dialogue follows a linear synthetic user: prompts approach a hidden
    intent ``psi*`` at rate ``1 - gain``. Round targets are
    ``M psi + planted_strength * v + noise`` for a hidden map ``M`` and the
    planted latent direction ``v``. Each round yields a preference pair whose
    positive is the target's feature and whose negative has its projection on
    the planted feature direction ``u ~ P v`` lowered by at least
    ``planted_strength * |P v|``. The manifest is written last, atomically.
    """
    if n_dialogues < 1 or rounds < 1:
        raise ValueError("need at least one dialogue with at least one round")
    if extractor.d != d:
        raise ValueError("extractor input dimension does not match d")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory is not writable: {out}")

    v = rng.normal(d) if planted is None else as_vec(planted, d, name="planted direction")
    v = v / np.linalg.norm(v)
    pv = extractor.projection @ v
    u = pv / np.linalg.norm(pv)
    hidden = rng.normal((d, m)) / np.sqrt(m)

    pairs = []
    ids = []
    for i in range(n_dialogues):
        did = f"dlg-{i:05d}"
        intent = rng.normal(m)
        offset = rng.normal(m)
        psi = intent + offset / np.linalg.norm(offset)
        recs = []
        for _ in range(rounds):
            psi = psi + gain * (intent - psi)
            target = hidden @ psi + planted_strength * v + target_noise * rng.normal(d)
            pos = extractor(target)
            # lower the planted-direction component, perturb only orthogonally
            jitter = rng.normal(extractor.k)
            jitter -= (jitter @ u) * u
            drop = planted_strength * np.linalg.norm(pv) * (1.0 + rng.uniform())
            neg = pos - drop * u + 0.1 * jitter
            recs.append(DialogueRound(frozen(psi), frozen(target), 1))
            pairs.append(PreferencePair(psi, pos, neg, dialogue_id=did))
        save_dialogue(out / f"dialogue_{i:05d}.json", DialogueRecord(did, tuple(recs)))
        ids.append(did)

    save_preference_pairs(out / PREFERENCE_FILE, pairs)
    order = [ids[j] for j in rng.permutation(len(ids))]
    n_train = int(math.floor(0.8 * len(ids) + 0.5)) if len(ids) > 1 else 1
    manifest = {
        "train": sorted(order[:n_train]),
        "test": sorted(order[n_train:]),
        "meta": {
            "n_dialogues": n_dialogues,
            "rounds": rounds,
            "planted_latent_direction": v.tolist(),
            "planted_feature_direction": u.tolist(),
        },
    }
    _atomic_write_text(out / MANIFEST_FILE, json.dumps(manifest, indent=1))
    return manifest


def load_manifest(path: str | Path) -> dict:
    return json.loads((Path(path) / MANIFEST_FILE).read_text())


def select(records: Sequence[DialogueRecord], ids: Sequence[str]) -> list[DialogueRecord]:
    wanted = set(ids)
    return [r for r in records if r.dialogue_id in wanted]
