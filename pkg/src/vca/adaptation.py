"""Low-rank adaptation of the denoiser with clipped-PPO reward updates.

Ownership of parameters is split the way the training loop needs it:
``apply_reward_step`` only moves the adapter factors ``(B, A)`` and
``noise_loss_step`` only moves the base weights ``phi``. The policy used for
PPO is a Gaussian centred on the adapted denoiser output.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vca.core_math import FeatureExtractor, SeededRng, as_mat, as_vec, frozen, spectral_norm
from vca.errors import ConfigError
from vca.latent_dynamics import Denoiser, NoiseSchedule, RoundConditioning, denoise_step
from vca.preference import Scorer, mi_reward
from vca.rewards import (
    RewardBreakdown,
    RewardSchedule,
    consistency_reward,
    diversity_reward,
    total_reward,
)

METRIC_COLUMNS = (
    "item", "t", "r_div", "r_cons", "r_mi",
    "lambda_div", "lambda_cons", "lambda_mi", "r_total", "l_noise", "l_bce",
)


@dataclass(frozen=True)
class LoraAdapter:
    B: np.ndarray = field(repr=False)
    A: np.ndarray = field(repr=False)
    scaling: float = 1.0
    lr: float = 1e-3

    def __post_init__(self):
        B = as_mat(self.B, name="B")
        as_mat(self.A, (B.shape[1], self.A.shape[1]), name="A")
        if self.lr <= 0:
            raise ConfigError("adapter learning rate must be positive")
        object.__setattr__(self, "B", frozen(self.B))
        object.__setattr__(self, "A", frozen(self.A))

    @classmethod
    def init(cls, d: int, n_in: int, rng: SeededRng, rank: int = 4, alpha: float = 4.0,
             lr: float = 1e-3, a_std: float | None = None) -> "LoraAdapter":
        """Zero ``B`` and Gaussian ``A``, so the adapter starts as the zero update."""
        if rank < 1:
            raise ConfigError("rank must be >= 1")
        a_std = 1.0 / math.sqrt(n_in) if a_std is None else a_std
        return cls(np.zeros((d, rank)), a_std * rng.normal((rank, n_in)), alpha / rank, lr)

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B @ self.A)

    def replace(self, B, A) -> "LoraAdapter":
        return LoraAdapter(B, A, self.scaling, self.lr)


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    sigma_pol: float = 0.1
    minibatch_size: int | None = None
    epochs: int = 4

    def __post_init__(self):
        if not (0.0 < self.clip_eps < 1.0):
            raise ConfigError("clip epsilon must lie in (0, 1)")
        if self.sigma_pol <= 0:
            raise ConfigError("policy stddev must be positive")
        if self.epochs < 1:
            raise ConfigError("PPO epochs must be >= 1")
        if self.minibatch_size is not None and self.minibatch_size < 1:
            raise ConfigError("minibatch size must be >= 1")


@dataclass(frozen=True)
class TransitionRecord:
    z: np.ndarray
    psi: np.ndarray
    ctx: RoundConditioning
    action: np.ndarray
    old_logprob: float
    advantage: float


def effective_weights(phi, lora: LoraAdapter) -> np.ndarray:
    phi = as_mat(phi, name="phi")
    if lora.B.shape[0] != phi.shape[0] or lora.A.shape[1] != phi.shape[1]:
        raise ValueError(f"adapter shape {lora.B.shape[0]}x{lora.A.shape[1]} does not match phi {phi.shape}")
    return phi + lora.delta()


def adapted(den: Denoiser, lora: LoraAdapter) -> Denoiser:
    """The denoiser with the adapter merged in (no contraction clamp)."""
    return Denoiser.unchecked(effective_weights(den.weights, lora), den.bias, den.beta_dm)


def policy_logprob(den_eff: Denoiser, z, psi, ctx: RoundConditioning, action, sigma_pol: float) -> float:
    if sigma_pol <= 0:
        raise ValueError("sigma_pol must be positive")
    mean = denoise_step(den_eff, z, psi, ctx)
    r = as_vec(action, den_eff.d, name="action") - mean
    d = den_eff.d
    return float(-0.5 * (r @ r) / sigma_pol**2 - d * math.log(sigma_pol) - 0.5 * d * math.log(2 * math.pi))


def policy_logprob_grad(den_eff: Denoiser, z, psi, ctx: RoundConditioning, action, sigma_pol: float) -> np.ndarray:
    """Gradient of ``policy_logprob`` with respect to the effective weight matrix."""
    x = den_eff.stacked_input(z, psi, ctx.c)
    r = as_vec(action, den_eff.d) - (den_eff.weights @ x + den_eff.bias)
    return np.outer(r / sigma_pol**2, x)


def adapter_grads(lora: LoraAdapter, grad_w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain a gradient on the effective weights through ``W = phi + s * B @ A``."""
    return lora.scaling * grad_w @ lora.A.T, lora.scaling * lora.B.T @ grad_w


def ppo_surrogate(new_lp: float, old_lp: float, advantage: float, eps: float) -> float:
    if not (0.0 < eps < 1.0):
        raise ValueError("clip epsilon must lie in (0, 1)")
    rho = math.exp(new_lp - old_lp)
    clipped = min(max(rho, 1.0 - eps), 1.0 + eps)
    return min(rho * advantage, clipped * advantage)


def ppo_surrogate_grad(new_lp: float, old_lp: float, advantage: float, eps: float) -> float:
    """d surrogate / d new_lp; zero on the flat clipped branch."""
    rho = math.exp(new_lp - old_lp)
    if advantage > 0 and rho > 1.0 + eps:
        return 0.0
    if advantage < 0 and rho < 1.0 - eps:
        return 0.0
    return rho * advantage


def mean_surrogate(lora: LoraAdapter, phi, bias, beta_dm: float, batch: Sequence[TransitionRecord],
                   cfg: PpoConfig) -> float:
    den = Denoiser.unchecked(effective_weights(phi, lora), bias, beta_dm)
    vals = [
        ppo_surrogate(policy_logprob(den, tr.z, tr.psi, tr.ctx, tr.action, cfg.sigma_pol),
                      tr.old_logprob, tr.advantage, cfg.clip_eps)
        for tr in batch
    ]
    return float(np.mean(vals))


def surrogate_grad(lora: LoraAdapter, den: Denoiser, batch: Sequence[TransitionRecord],
                   cfg: PpoConfig) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the mean surrogate over ``batch`` with respect to ``(B, A)``."""
    den_eff = adapted(den, lora)
    gw = np.zeros_like(den.weights)
    for tr in batch:
        new_lp = policy_logprob(den_eff, tr.z, tr.psi, tr.ctx, tr.action, cfg.sigma_pol)
        coef = ppo_surrogate_grad(new_lp, tr.old_logprob, tr.advantage, cfg.clip_eps)
        if coef != 0.0:
            gw += coef * policy_logprob_grad(den_eff, tr.z, tr.psi, tr.ctx, tr.action, cfg.sigma_pol)
    return adapter_grads(lora, gw / len(batch))


def apply_reward_step(lora: LoraAdapter, den: Denoiser, batch: Sequence[TransitionRecord],
                      cfg: PpoConfig) -> LoraAdapter:
    """Gradient ascent on the clipped surrogate, moving only ``(B, A)``.

    Runs ``cfg.epochs`` passes over ``batch`` in order, split into minibatches
    of ``cfg.minibatch_size`` (whole batch when ``None``).
    """
    if not batch:
        raise ValueError("PPO update needs a nonempty batch")
    size = cfg.minibatch_size or len(batch)
    for _ in range(cfg.epochs):
        for start in range(0, len(batch), size):
            gB, gA = surrogate_grad(lora, den, batch[start:start + size], cfg)
            lora = lora.replace(lora.B + lora.lr * gB, lora.A + lora.lr * gA)
    return lora


def bce_reconstruction_loss(z_prev_target, den_eff: Denoiser, z_t, psi, ctx: RoundConditioning) -> float:
    """Norm of the one-step reconstruction error under the adapted weights."""
    target = as_vec(z_prev_target, den_eff.d, name="target latent")
    return float(np.linalg.norm(target - denoise_step(den_eff, z_t, psi, ctx)))


def bce_reconstruction_grad(z_prev_target, den: Denoiser, lora: LoraAdapter, z_t, psi,
                            ctx: RoundConditioning) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``bce_reconstruction_loss`` with respect to ``(B, A)``."""
    den_eff = adapted(den, lora)
    x = den_eff.stacked_input(z_t, psi, ctx.c)
    r = as_vec(z_prev_target, den.d) - (den_eff.weights @ x + den_eff.bias)
    nr = np.linalg.norm(r)
    if nr == 0.0:
        return np.zeros_like(lora.B), np.zeros_like(lora.A)
    return adapter_grads(lora, -np.outer(r / nr, x))


def noise_loss(den: Denoiser, lora: LoraAdapter, z_t, psi, ctx: RoundConditioning, target) -> float:
    x0 = denoise_step(adapted(den, lora), z_t, psi, ctx)
    r = x0 - as_vec(target, den.d, name="target")
    return float(r @ r)


def noise_loss_grad(den: Denoiser, lora: LoraAdapter, z_t, psi, ctx: RoundConditioning, target) -> np.ndarray:
    """Gradient of the squared prediction error with respect to ``phi``."""
    return noise_loss_grads(den, lora, z_t, psi, ctx, target)[0]


def noise_loss_grads(den: Denoiser, lora: LoraAdapter, z_t, psi, ctx: RoundConditioning,
                     target) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the squared prediction error with respect to ``(phi, bias)``."""
    den_eff = adapted(den, lora)
    x = den_eff.stacked_input(z_t, psi, ctx.c)
    r = den_eff.weights @ x + den_eff.bias - as_vec(target, den.d, name="target")
    return 2.0 * np.outer(r, x), 2.0 * r


def noise_loss_step(den: Denoiser, lora: LoraAdapter, samples, lr_phi: float) -> Denoiser:
    """One normalized descent step on the mean squared prediction error.

    Moves the base weights and bias only; ``samples`` is a sequence of
    ``(z_t, psi, ctx, target)``. The adapter is merged into the forward pass
    but held fixed. The step is ``lr_phi / (1 + mean |x|^2)`` times the mean
    gradient (``x`` the stacked input with a unit entry for the bias), which
    keeps it stable for any input scale when ``lr_phi < 1``. The returned
    denoiser has its latent block clamped back to the contraction bound.
    """
    if lr_phi <= 0:
        raise ValueError("lr_phi must be positive")
    if not samples:
        raise ValueError("noise loss step needs at least one sample")
    gw = np.zeros_like(den.weights)
    gb = np.zeros_like(den.bias)
    energy = 0.0
    for z_t, psi, ctx, target in samples:
        w, b = noise_loss_grads(den, lora, z_t, psi, ctx, target)
        gw += w
        gb += b
        x = den.stacked_input(z_t, psi, ctx.c)
        energy += 1.0 + x @ x
    n = len(samples)
    eta = lr_phi / (energy / n)
    return Denoiser(den.weights - eta * gw / n, den.bias - eta * gb / n, den.beta_dm, den.enforce_contraction)


@dataclass(frozen=True)
class TrainConfig:
    ppo: PpoConfig = PpoConfig()
    lr_phi: float = 0.5
    noise_steps_per_update: int = 1
    baseline_momentum: float = 0.9
    check_invariants: bool = True

    def __post_init__(self):
        if self.lr_phi <= 0:
            raise ConfigError("lr_phi must be positive")
        if self.noise_steps_per_update < 0:
            raise ConfigError("noise_steps_per_update must be >= 0")
        if not (0.0 <= self.baseline_momentum < 1.0):
            raise ConfigError("baseline_momentum must lie in [0, 1)")


@dataclass
class TrainResult:
    denoiser: Denoiser
    lora: LoraAdapter
    rows: list[dict] = field(default_factory=list)
    breakdowns: list[RewardBreakdown] = field(default_factory=list)
    invariant_failures: list[str] = field(default_factory=list)
    items_seen: int = 0


def _item_rewards(features, prompts, scorer: Scorer, reward_sched: RewardSchedule, t: int) -> RewardBreakdown:
    if len(features) >= 2:
        r_div = diversity_reward(features)
        r_cons = consistency_reward(features)
    else:
        # single-round items have no pairs to compare
        r_div = r_cons = 0.0
    r_mi = float(np.mean([mi_reward(scorer, p, f) for p, f in zip(prompts, features)]))
    return total_reward(reward_sched, t, r_div, r_cons, r_mi)


def training_loop(dataset, den: Denoiser, lora: LoraAdapter, scorer: Scorer, extractor: FeatureExtractor,
                  sched: NoiseSchedule, reward_sched: RewardSchedule, cfg: TrainConfig,
                  rng: SeededRng) -> TrainResult:
    """Preference-guided fine-tuning over a dataset of dialogues.

    For every round of every dialogue: draw a step ``t`` in ``[T1, T2]``,
    start from ``z_T ~ N(0, I)`` and denoise down to ``z_t`` with the adapted
    weights, then take the final step as a Gaussian policy action. The
    dialogue's outputs are scored with the schedule weights at its last round
    index, the adapter is updated by PPO on the per-item advantage, and then
    ``phi`` takes ``noise_steps_per_update`` descent steps on the squared
    error against the round targets.
    """
    if not (1 <= sched.T1 <= sched.T2 <= sched.T):
        raise ConfigError(f"invalid fine-tuning window [{sched.T1}, {sched.T2}]")
    result = TrainResult(den, lora)
    baseline = None
    for item_idx, record in enumerate(dataset):
        den_eff = adapted(den, lora)
        transitions_state = []
        features, prompts, targets = [], [], []
        for r_idx, rnd in enumerate(record.rounds, start=1):
            psi = as_vec(rnd.prompt_embedding, den.m, name="prompt_embedding")
            target = as_vec(rnd.target_feature, den.d, name="target_feature")
            ctx = RoundConditioning.zeros(den.m, r_idx)
            t = int(rng.integers(sched.T1, sched.T2))
            z = rng.normal(den.d)
            for _ in range(sched.T, t, -1):
                z = denoise_step(den_eff, z, psi, ctx)
            mean = denoise_step(den_eff, z, psi, ctx)
            action = mean + cfg.ppo.sigma_pol * rng.normal(den.d)
            old_lp = policy_logprob(den_eff, z, psi, ctx, action, cfg.ppo.sigma_pol)
            transitions_state.append((z, psi, ctx, action, old_lp))
            features.append(extractor(action))
            prompts.append(psi)
            targets.append(target)

        bd = _item_rewards(features, prompts, scorer, reward_sched, len(record.rounds))
        if baseline is None:
            baseline = bd.total
        advantage = bd.total - baseline
        baseline = cfg.baseline_momentum * baseline + (1 - cfg.baseline_momentum) * bd.total

        samples = [(z, psi, ctx, tgt) for (z, psi, ctx, _, _), tgt in zip(transitions_state, targets)]
        l_noise = float(np.mean([noise_loss(den, lora, *s) for s in samples]))
        l_bce = float(np.mean([bce_reconstruction_loss(tgt, den_eff, z, psi, ctx) for z, psi, ctx, tgt in samples]))

        batch = [TransitionRecord(z, psi, ctx, a, lp, advantage) for z, psi, ctx, a, lp in transitions_state]
        phi_before = (den.weights, den.bias)
        lora = apply_reward_step(lora, den, batch, cfg.ppo)
        if cfg.check_invariants:
            if not (np.array_equal(den.weights, phi_before[0]) and np.array_equal(den.bias, phi_before[1])):
                result.invariant_failures.append(f"item {item_idx}: phi modified by PPO step")
            _check_rank(lora, item_idx, result)

        B_before, A_before = lora.B, lora.A
        for _ in range(cfg.noise_steps_per_update):
            den = noise_loss_step(den, lora, samples, cfg.lr_phi)
            if cfg.check_invariants:
                _check_contraction(den, item_idx, result)
        if cfg.check_invariants and not (np.array_equal(lora.B, B_before) and np.array_equal(lora.A, A_before)):
            result.invariant_failures.append(f"item {item_idx}: adapter modified by noise step")

        result.breakdowns.append(bd)
        result.rows.append({
            "item": item_idx, "t": len(record.rounds),
            "r_div": bd.r_div, "r_cons": bd.r_cons, "r_mi": bd.r_mi,
            "lambda_div": bd.lambda_div, "lambda_cons": bd.lambda_cons, "lambda_mi": bd.lambda_mi,
            "r_total": bd.total, "l_noise": l_noise, "l_bce": l_bce,
        })
        result.items_seen += 1
    result.denoiser = den
    result.lora = lora
    return result


def _check_rank(lora: LoraAdapter, item_idx: int, result: TrainResult) -> None:
    delta = lora.delta()
    if np.any(delta) and np.linalg.matrix_rank(delta) > lora.rank:
        result.invariant_failures.append(f"item {item_idx}: adapter rank exceeds {lora.rank}")


def _check_contraction(den: Denoiser, item_idx: int, result: TrainResult) -> None:
    if spectral_norm(den.z_block) > den.beta_dm + 1e-9:
        result.invariant_failures.append(f"item {item_idx}: contraction bound violated")


def write_metrics_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c])) for c in METRIC_COLUMNS])


def checkpoint_dict(den: Denoiser, lora: LoraAdapter, seeds: dict, round_counter: int) -> dict:
    return {
        "schema": "vca.checkpoint/1",
        "phi": den.weights.tolist(),
        "bias": den.bias.tolist(),
        "beta_dm": den.beta_dm,
        "B": lora.B.tolist(),
        "A": lora.A.tolist(),
        "lora_rank": lora.rank,
        "lora_scaling": lora.scaling,
        "lora_lr": lora.lr,
        "seeds": seeds,
        "round_counter": round_counter,
    }


def save_checkpoint(path: str | Path, den: Denoiser, lora: LoraAdapter, seeds: dict, round_counter: int) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(den, lora, seeds, round_counter)))


def load_checkpoint(path: str | Path) -> tuple[Denoiser, LoraAdapter, dict]:
    d = json.loads(Path(path).read_text())
    den = Denoiser(np.array(d["phi"]), np.array(d["bias"]), d["beta_dm"])
    lora = LoraAdapter(np.array(d["B"]), np.array(d["A"]), d["lora_scaling"], d["lora_lr"])
    return den, lora, d
