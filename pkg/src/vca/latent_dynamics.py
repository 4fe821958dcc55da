"""Multi-round denoising: conditioned steps, two-stage composition, losses.

The denoiser is a single affine map of the stacked input ``[z; psi + c]``:

    DM(z, psi, c) = W @ [z; psi + c] + bias

with the latent block ``W[:, :d]`` held to spectral norm <= ``beta_dm`` so the
map is a contraction in ``z``. The conditioning code ``c`` lives in prompt
space and is added to the prompt embedding before stacking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vca.core_math import (
    SeededRng,
    as_mat,
    as_vec,
    frozen,
    sample_gaussian,
    spectral_norm,
    spectral_rescale,
)
from vca.errors import ConfigError

# slack allowed between the contraction bound and the clamped z-block norm
CONTRACTION_SLACK = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-round noise scale ``sigma_t = sigma0 * t**(-p)``.

    ``p > 1`` gives ``sigma_t = o(1/t)``. Setting ``allow_slow_decay`` admits
    ``0 < p <= 1`` for deliberate assumption-violation runs.
    """

    sigma0: float = 1.0
    p: float = 1.5
    T: int = 70
    T1: int = 1
    T2: int = 40
    allow_slow_decay: bool = False

    def __post_init__(self):
        if not np.isfinite(self.sigma0) or self.sigma0 < 0:
            raise ConfigError(f"sigma0 must be >= 0, got {self.sigma0}")
        if self.p <= 0 or (self.p <= 1 and not self.allow_slow_decay):
            raise ConfigError(f"decay exponent p must be > 1, got {self.p}")
        if self.T < 1:
            raise ConfigError("T must be a positive integer")
        if not (1 <= self.T1 <= self.T2 <= self.T):
            raise ConfigError(f"need 1 <= T1 <= T2 <= T, got [{self.T1}, {self.T2}] with T={self.T}")

    def sigma(self, t: int) -> float:
        if t < 1:
            raise ValueError(f"noise scale is defined for t >= 1, got {t}")
        return self.sigma0 * float(t) ** (-self.p)


@dataclass(frozen=True)
class RoundConditioning:
    c: np.ndarray
    round_index: int = 1
    noise_steps: tuple[int, int] = (2, 1)

    def __post_init__(self):
        object.__setattr__(self, "c", frozen(as_vec(self.c, name="conditioning code")))
        if self.round_index < 1:
            raise ValueError("round_index must be >= 1")
        t1, t2 = self.noise_steps
        if t1 == t2:
            raise ValueError("noise steps tau1 and tau2 must differ")
        if t1 < 0 or t2 < 0:
            raise ValueError("noise steps must be nonnegative")
        object.__setattr__(self, "noise_steps", (int(t1), int(t2)))

    @classmethod
    def zeros(cls, m: int, round_index: int = 1, noise_steps=(2, 1)) -> "RoundConditioning":
        return cls(np.zeros(m), round_index, noise_steps)


def clamp_contraction(weights: np.ndarray, d: int, beta_dm: float) -> np.ndarray:
    """Rescale the latent block of ``weights`` down to ``beta_dm`` if it exceeds it."""
    w = np.array(weights, dtype=np.float64, copy=True)
    zb = w[:, :d]
    if spectral_norm(zb) > beta_dm + CONTRACTION_SLACK:
        w[:, :d] = spectral_rescale(zb, beta_dm)
    return w


@dataclass(frozen=True)
class Denoiser:
    """Affine conditioned denoiser with a contraction bound on its latent block.

    Construction clamps the latent block to ``beta_dm``. ``enforce_contraction``
    is switched off only for adapted (base + low-rank) views whose low-rank
    part is allowed to move the map.
    """

    weights: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)
    beta_dm: float = 0.5
    enforce_contraction: bool = True

    def __post_init__(self):
        w = as_mat(self.weights, name="denoiser weights")
        d = w.shape[0]
        if w.shape[1] <= d:
            raise ValueError("weights must be d x (d + m) with m >= 1")
        b = as_vec(self.bias, d, name="bias")
        if self.enforce_contraction:
            if not (0.0 < self.beta_dm < 1.0):
                raise ConfigError(f"beta_dm must lie in (0, 1), got {self.beta_dm}")
            w = clamp_contraction(w, d, self.beta_dm)
        object.__setattr__(self, "weights", frozen(w))
        object.__setattr__(self, "bias", frozen(b))

    @classmethod
    def random(cls, d: int, m: int, rng: SeededRng, beta_dm: float = 0.5,
               prompt_scale: float = 1.0, bias_scale: float = 0.1) -> "Denoiser":
        """Random denoiser whose latent block has spectral norm exactly ``beta_dm``."""
        zb = spectral_rescale(rng.normal((d, d)), beta_dm)
        pb = prompt_scale * rng.normal((d, m)) / np.sqrt(m)
        bias = bias_scale * rng.normal(d)
        return cls(np.hstack([zb, pb]), bias, beta_dm)

    @classmethod
    def unchecked(cls, weights, bias, beta_dm: float) -> "Denoiser":
        """A denoiser built from arbitrary weights, e.g. for divergence witnesses."""
        return cls(weights, bias, beta_dm, enforce_contraction=False)

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    @property
    def m(self) -> int:
        return self.weights.shape[1] - self.weights.shape[0]

    @property
    def z_block(self) -> np.ndarray:
        return self.weights[:, : self.d]

    @property
    def prompt_block(self) -> np.ndarray:
        return self.weights[:, self.d:]

    def with_weights(self, weights) -> "Denoiser":
        return Denoiser(weights, self.bias, self.beta_dm, self.enforce_contraction)

    def stacked_input(self, z, psi, c) -> np.ndarray:
        z = as_vec(z, self.d, name="latent")
        psi = as_vec(psi, self.m, name="prompt embedding")
        c = as_vec(c, self.m, name="conditioning code")
        return np.concatenate([z, psi + c])

    def fixed_point(self, psi, c=None) -> np.ndarray:
        """Unique fixed point of ``z -> DM(z, psi, c)``."""
        c = np.zeros(self.m) if c is None else c
        psi = as_vec(psi, self.m, name="prompt embedding")
        rhs = self.prompt_block @ (psi + as_vec(c, self.m)) + self.bias
        return np.linalg.solve(np.eye(self.d) - self.z_block, rhs)


def _embedding(psi) -> np.ndarray:
    # accept either a raw vector or an object carrying ``.psi``
    return getattr(psi, "psi", psi)


def denoise_step(den: Denoiser, z, psi, ctx: RoundConditioning) -> np.ndarray:
    x = den.stacked_input(z, _embedding(psi), ctx.c)
    return den.weights @ x + den.bias


def denoise_iterate(den: Denoiser, z, psi, ctx: RoundConditioning, steps: int) -> np.ndarray:
    """Apply ``denoise_step`` ``steps`` times with fixed prompt and code."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    z = as_vec(z, den.d, name="latent")
    for _ in range(steps):
        z = denoise_step(den, z, psi, ctx)
    return z


def noisy_round_update(den: Denoiser, z_t, psi, ctx: RoundConditioning,
                       sched: NoiseSchedule, rng: SeededRng) -> np.ndarray:
    mean = denoise_step(den, z_t, psi, ctx)
    return mean + sample_gaussian(rng, den.d, sched.sigma(ctx.round_index))


def compose_two_stage(den: Denoiser, z_tau1_x, ctx1: RoundConditioning, ctx2: RoundConditioning,
                      psi, sched: NoiseSchedule, rng: SeededRng) -> np.ndarray:
    """Two-stage reconstruction of the next round's latent.

    The first stage denoises ``z_tau1_x`` for ``tau1 = ctx1.noise_steps[0]``
    steps under code ``ctx1.c``; Gaussian noise at scale ``sigma(tau2)`` is
    added; the second stage denoises for ``tau2 = ctx2.noise_steps[1]`` steps
    under ``ctx2.c``.
    """
    tau1 = ctx1.noise_steps[0]
    tau2 = ctx2.noise_steps[1]
    for name, tau in (("tau1", tau1), ("tau2", tau2)):
        if not (1 <= tau <= sched.T):
            raise ValueError(f"{name}={tau} outside [1, {sched.T}]")
    first = denoise_iterate(den, z_tau1_x, psi, ctx1, tau1)
    noised = first + sample_gaussian(rng, den.d, sched.sigma(tau2))
    return denoise_iterate(den, noised, psi, ctx2, tau2)


def multi_round_loss(z0_y, composed) -> float:
    a = as_vec(z0_y, name="target latent")
    b = as_vec(composed, a.shape[0], name="composed latent")
    return float(np.linalg.norm(a - b))


def one_step_loss(z_target_prev, den: Denoiser, z_tau2, ctx2: RoundConditioning, psi) -> float:
    target = as_vec(z_target_prev, den.d, name="target latent")
    return float(np.linalg.norm(target - denoise_step(den, z_tau2, psi, ctx2)))


def one_step_loss_grad(z_target_prev, den: Denoiser, z_tau2, ctx2: RoundConditioning, psi) -> np.ndarray:
    """Gradient of ``one_step_loss`` with respect to the denoiser weights."""
    x = den.stacked_input(z_tau2, _embedding(psi), ctx2.c)
    r = as_vec(z_target_prev, den.d) - (den.weights @ x + den.bias)
    nr = np.linalg.norm(r)
    if nr == 0.0:
        return np.zeros_like(den.weights)
    return -np.outer(r / nr, x)


@dataclass
class LatentTrajectory:
    """Latent states ``(round, step, z)`` in generation order, plus prompts and losses."""

    states: list[tuple[int, int, np.ndarray]] = field(default_factory=list)
    prompts: list[np.ndarray] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def append(self, round_index: int, step: int, z) -> None:
        if self.states:
            last_round, last_step, _ = self.states[-1]
            if round_index < last_round or (round_index == last_round and step >= last_step):
                raise ValueError("states must decrease in step within a round and increase in round")
        self.states.append((round_index, step, np.asarray(z, dtype=np.float64)))
