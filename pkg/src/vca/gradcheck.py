"""Central-difference checks of every analytic gradient in the package."""

from __future__ import annotations

import numpy as np

from vca.adaptation import (
    LoraAdapter,
    PpoConfig,
    TransitionRecord,
    adapted,
    bce_reconstruction_grad,
    bce_reconstruction_loss,
    mean_surrogate,
    noise_loss,
    noise_loss_grads,
    policy_logprob,
    policy_logprob_grad,
    surrogate_grad,
)
from vca.core_math import SeededRng, cosine_similarity, cosine_similarity_grad, finite_diff_gradient
from vca.latent_dynamics import Denoiser, RoundConditioning, one_step_loss, one_step_loss_grad
from vca.preference import PreferencePair, Scorer, dpo_loss, dpo_loss_grad
from vca.rewards import consistency_reward, consistency_reward_grad, diversity_reward, diversity_reward_grad

H = 1e-5


def _rel(a, f) -> float:
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return float(np.linalg.norm(a - f) / max(np.linalg.norm(a), np.linalg.norm(f), 1e-8))


def _instance(rng: SeededRng, d=4, m=3, rank=2):
    den = Denoiser.random(d, m, rng)
    lora = LoraAdapter(rng.normal((d, rank)) * 0.3, rng.normal((rank, d + m)) * 0.3, 1.0)
    ctx = RoundConditioning(0.1 * rng.normal(m), 1, (2, 1))
    return den, lora, ctx, rng.normal(d), rng.normal(m), rng.normal(d)


def _with_B(lora, B):
    return lora.replace(B, lora.A)


def _with_A(lora, A):
    return lora.replace(lora.B, A)


def check_point(name: str, rng: SeededRng) -> float:
    """Max relative error between analytic and numeric gradients for one random point."""
    if name == "cosine":
        u, v = rng.normal(5), rng.normal(5)
        return _rel(cosine_similarity_grad(u, v), finite_diff_gradient(lambda x: cosine_similarity(x, v), u, H))
    if name == "diversity":
        f = rng.normal((int(rng.integers(2, 6)), 5))
        return _rel(diversity_reward_grad(f), finite_diff_gradient(lambda x: diversity_reward(list(x)), f, H))
    if name == "consistency":
        f = rng.normal((int(rng.integers(2, 6)), 5))
        return _rel(consistency_reward_grad(f), finite_diff_gradient(lambda x: consistency_reward(list(x)), f, H))
    if name == "dpo":
        m, k = 3, 4
        sc = Scorer(np.zeros((3, m + k)), rng.normal((3, 2)), rng.normal((2, m + k)), m, k, 0.25)
        pair = PreferencePair(rng.normal(m), rng.normal(k), rng.normal(k))
        gB, gA = dpo_loss_grad(sc, pair, 1.5)
        nB = finite_diff_gradient(lambda B: dpo_loss(sc.with_adapter(B, sc.A), pair, 1.5), sc.B, H)
        nA = finite_diff_gradient(lambda A: dpo_loss(sc.with_adapter(sc.B, A), pair, 1.5), sc.A, H)
        return max(_rel(gB, nB), _rel(gA, nA))
    den, lora, ctx, z, psi, target = _instance(rng)
    if name == "one_step":
        g = one_step_loss_grad(target, den, z, ctx, psi)
        n = finite_diff_gradient(lambda w: one_step_loss(target, Denoiser.unchecked(w, den.bias, den.beta_dm), z, ctx, psi),
                                 den.weights, H)
        return _rel(g, n)
    if name == "bce":
        gB, gA = bce_reconstruction_grad(target, den, lora, z, psi, ctx)
        nB = finite_diff_gradient(lambda B: bce_reconstruction_loss(target, adapted(den, _with_B(lora, B)), z, psi, ctx), lora.B, H)
        nA = finite_diff_gradient(lambda A: bce_reconstruction_loss(target, adapted(den, _with_A(lora, A)), z, psi, ctx), lora.A, H)
        return max(_rel(gB, nB), _rel(gA, nA))
    if name == "noise":
        gw, gb = noise_loss_grads(den, lora, z, psi, ctx, target)
        nw = finite_diff_gradient(
            lambda w: noise_loss(Denoiser.unchecked(w, den.bias, den.beta_dm), lora, z, psi, ctx, target), den.weights, H)
        nb = finite_diff_gradient(
            lambda b: noise_loss(Denoiser.unchecked(den.weights, b, den.beta_dm), lora, z, psi, ctx, target), den.bias, H)
        return max(_rel(gw, nw), _rel(gb, nb))
    if name == "logprob":
        sig = 0.5
        action = rng.normal(den.d)
        g = policy_logprob_grad(den, z, psi, ctx, action, sig)
        n = finite_diff_gradient(
            lambda w: policy_logprob(Denoiser.unchecked(w, den.bias, den.beta_dm), z, psi, ctx, action, sig), den.weights, H)
        return _rel(g, n)
    if name == "ppo":
        return _ppo_point(rng, den, lora, ctx, z, psi)
    raise KeyError(name)


def _ppo_point(rng, den, lora, ctx, z, psi) -> float:
    cfg = PpoConfig(clip_eps=0.2, sigma_pol=0.5)
    den_eff = adapted(den, lora)
    batch = []
    for _ in range(3):
        action = den_eff.weights @ den_eff.stacked_input(z, psi, ctx.c) + den_eff.bias + cfg.sigma_pol * rng.normal(den.d)
        new_lp = policy_logprob(den_eff, z, psi, ctx, action, cfg.sigma_pol)
        # old policy slightly off, so ratios straddle both clip branches
        old_lp = new_lp + 0.3 * rng.normal()
        rho = np.exp(new_lp - old_lp)
        if min(abs(rho - 0.8), abs(rho - 1.2)) < 1e-3:
            old_lp += 0.05  # keep finite differences off the clip kinks
        batch.append(TransitionRecord(z, psi, ctx, action, old_lp, float(rng.normal())))
    gB, gA = surrogate_grad(lora, den, batch, cfg)
    nB = finite_diff_gradient(lambda B: mean_surrogate(_with_B(lora, B), den.weights, den.bias, den.beta_dm, batch, cfg), lora.B, H)
    nA = finite_diff_gradient(lambda A: mean_surrogate(_with_A(lora, A), den.weights, den.bias, den.beta_dm, batch, cfg), lora.A, H)
    if not np.any(nB) and not np.any(gB):
        return 0.0
    return max(_rel(gB, nB), _rel(gA, nA))


GRADIENTS = ("cosine", "diversity", "consistency", "dpo", "one_step", "bce", "noise", "logprob", "ppo")


def gradient_suite(rng: SeededRng, points: int = 50) -> dict[str, float]:
    """Worst relative error per gradient over ``points`` random points."""
    return {name: max(check_point(name, r) for r in rng.child(name).split(points)) for name in GRADIENTS}
