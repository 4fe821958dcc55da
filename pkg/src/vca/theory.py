"""Numerical checks of the convergence and Pareto results.

Convergence: the noisy recursion ``z_{t-1} = DM(z_t, psi_t) + eps_t`` with a
contractive denoiser and prompts approaching ``psi*`` geometrically. The
limit is the point mass at the fixed point ``z* = DM(z*, psi*)``; TV to a
point mass is always 1, so the harness reports mean error, noise scale,
W2 to the point mass and TV between successive round laws instead.

Pareto: exact dominance filtering and positive-weight scalarization over
finite candidate sets, plus probes of the reward weight schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate

from vca.core_math import SeededRng, sample_gaussian, spectral_norm
from vca.errors import ConfigError, DegenerateInputError
from vca.latent_dynamics import Denoiser, NoiseSchedule
from vca.rewards import RewardSchedule, weights_at

# absolute tolerance handed to the quadrature
TV_EPSABS = 1e-10


@dataclass(frozen=True)
class ConvergenceConfig:
    beta_dm: float = 0.5
    alpha_p: float = 0.8
    sigma0: float = 1.0
    p: float = 1.5
    rounds: int = 200
    trials: int = 32
    d: int = 8
    m: int = 8
    prompt_gap: float = 1.0
    allow_violation: bool = False

    def violations(self) -> list[str]:
        out = []
        if not self.beta_dm < 1:
            out.append(f"contraction: beta_dm={self.beta_dm} >= 1")
        if not self.alpha_p < 1:
            out.append(f"prompt convergence: alpha_p={self.alpha_p} >= 1")
        if not self.p > 1:
            out.append(f"noise decay: p={self.p} <= 1 so sigma_t is not o(1/t)")
        return out

    def check(self) -> None:
        if self.beta_dm <= 0 or self.alpha_p < 0 or self.p <= 0 or self.sigma0 < 0:
            raise ConfigError("beta_dm, p must be > 0 and alpha_p, sigma0 >= 0")
        if self.rounds < 2 or self.trials < 1 or self.d < 1 or self.m < 1:
            raise ConfigError("need rounds >= 2, trials >= 1, d >= 1, m >= 1")
        bad = self.violations()
        if bad and not self.allow_violation:
            raise ConfigError("assumption-violating config refused: " + "; ".join(bad))


@dataclass
class ConvergenceReport:
    mean_error: list[float]
    sigma: list[float]
    w2: list[float]
    tv_successive: list[float | None]
    w2_marginal: list[float]
    assumptions: dict[str, bool]
    violation_run: bool
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.mean_error)
        if not (len(self.sigma) == len(self.w2) == len(self.tv_successive) == len(self.w2_marginal) == n):
            raise ValueError("per-round series must share one length")

    @property
    def rounds(self) -> int:
        return len(self.mean_error)

    def eventually_monotone(self, frac: float = 0.5) -> bool:
        """Marginal-law W2 non-increasing over the last ``frac`` of rounds.

        The trial-averaged ``w2`` carries Monte Carlo noise of a few percent,
        larger than its per-round decrease late in the run, so the trend is
        judged on the exact marginal law instead.
        """
        tail = self.w2_marginal[int(len(self.w2_marginal) * (1 - frac)):]
        return all(b <= a for a, b in zip(tail, tail[1:]))

    def passes(self, err_tol: float = 1e-3, w2_tol: float = 2e-3) -> bool:
        return self.mean_error[-1] < err_tol and self.w2[-1] < w2_tol

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "final_mean_error": self.mean_error[-1],
            "final_w2": self.w2[-1],
            "final_tv": self.tv_successive[-1],
            "eventually_monotone": self.eventually_monotone(),
            "assumptions": self.assumptions,
            "violation_run": self.violation_run,
            "config": self.config,
            "series": {
                "mean_error": self.mean_error,
                "sigma": self.sigma,
                "w2": self.w2,
                "tv_successive": self.tv_successive,
                "w2_marginal": self.w2_marginal,
            },
        }


def _sim_denoiser(cfg: ConvergenceConfig, rng: SeededRng) -> Denoiser:
    # beta_dm times an orthogonal matrix: every singular value and every
    # eigenvalue modulus equals beta_dm, so the bound is tight in both directions
    q, r = np.linalg.qr(rng.normal((cfg.d, cfg.d)))
    zb = cfg.beta_dm * q * np.sign(np.diag(r))
    pb = rng.normal((cfg.d, cfg.m)) / math.sqrt(cfg.m)
    bias = 0.1 * rng.normal(cfg.d)
    w = np.hstack([zb, pb])
    if cfg.beta_dm < 1:
        return Denoiser(w, bias, cfg.beta_dm)
    return Denoiser.unchecked(w, bias, cfg.beta_dm)


def _target_point(den: Denoiser, psi_star) -> np.ndarray:
    try:
        return den.fixed_point(psi_star)
    except np.linalg.LinAlgError:
        return np.zeros(den.d)


def run_convergence(cfg: ConvergenceConfig, rng: SeededRng) -> ConvergenceReport:
    """Simulate the noisy multi-round recursion and summarise convergence.

    Round ``t`` (1-based) uses prompt ``psi_t = psi* + alpha_p**t * (psi_0 - psi*)``
    and noise scale ``sigma_t = sigma0 * t**(-p)``. Round ``t``'s conditional
    law given the previous latent is ``N(DM(z_{t-1}, psi_t), sigma_t^2 I)``;
    its mean error to ``z*`` is averaged over trials started from
    ``z_0 ~ N(0, I)``. Successive-round TV uses the exact marginal laws under
    that same start distribution.
    """
    cfg.check()
    violation = bool(cfg.violations())
    den = _sim_denoiser(cfg, rng.child("denoiser"))
    psi_star = rng.child("psi_star").normal(cfg.m)
    gap_dir = rng.child("psi_0").normal(cfg.m)
    psi0 = psi_star + cfg.prompt_gap * gap_dir / np.linalg.norm(gap_dir)
    z_star = _target_point(den, psi_star)
    sched = NoiseSchedule(cfg.sigma0, cfg.p, T=cfg.rounds, T1=1, T2=cfg.rounds, allow_slow_decay=True)

    A, C, b = den.z_block, den.prompt_block, den.bias
    sig = [sched.sigma(t) for t in range(1, cfg.rounds + 1)]
    psis = [psi_star + cfg.alpha_p**t * (psi0 - psi_star) for t in range(1, cfg.rounds + 1)]

    err = np.zeros(cfg.rounds)
    for trial_rng in rng.child("trials").split(cfg.trials):
        z = trial_rng.normal(cfg.d)
        for t in range(1, cfg.rounds + 1):
            mean_t = A @ z + C @ psis[t - 1] + b
            err[t - 1] += np.linalg.norm(mean_t - z_star)
            z = mean_t + sample_gaussian(trial_rng, cfg.d, sig[t - 1])

    # exact marginal laws for z_0 ~ N(0, I): the map is affine, so they stay Gaussian
    mu, cov = np.zeros(cfg.d), np.eye(cfg.d)
    laws, w2_marginal = [], []
    for t in range(1, cfg.rounds + 1):
        mu = A @ mu + C @ psis[t - 1] + b
        cov = A @ cov @ A.T + sig[t - 1] ** 2 * np.eye(cfg.d)
        laws.append((mu.copy(), np.sqrt(np.clip(np.diag(cov), 0.0, None))))
        w2_marginal.append(math.sqrt(float((mu - z_star) @ (mu - z_star)) + float(np.trace(cov))))
    tv_series = tv_between_rounds(laws)

    err /= cfg.trials
    mean_error = [float(e) for e in err]
    w2 = [math.sqrt(e * e + cfg.d * s * s) for e, s in zip(mean_error, sig)]

    probe = spectral_norm(A) if np.any(A) else 0.0
    # a prompt path obeying the rate bound, measured against the bound itself
    gaps = [cfg.alpha_p**t * cfg.prompt_gap for t in range(1, cfg.rounds + 1)]
    tsig = [t * s for t, s in zip(range(1, cfg.rounds + 1), sig)]
    assumptions = {
        "prompt_rate_bound": cfg.alpha_p < 1 and all(g <= cfg.alpha_p**t * cfg.prompt_gap * (1 + 1e-12) for t, g in enumerate(gaps, 1)),
        "lipschitz_probe": probe <= cfg.beta_dm + 1e-9 and cfg.beta_dm < 1,
        "t_sigma_decreasing": cfg.sigma0 == 0 or all(b < a for a, b in zip(tsig, tsig[1:])),
    }
    return ConvergenceReport(mean_error, sig, w2, tv_series, w2_marginal, assumptions, violation,
                             config={k: getattr(cfg, k) for k in cfg.__dataclass_fields__})


def gaussian_tv_1d(mu1: float, s1: float, mu2: float, s2: float) -> float:
    """Total variation between two univariate normals by adaptive quadrature."""
    if not (s1 > 0 and s2 > 0):
        raise ValueError(f"standard deviations must be positive, got {s1}, {s2}")
    if mu1 == mu2 and s1 == s2:
        return 0.0

    def pdf(x, mu, s):
        return math.exp(-0.5 * ((x - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))

    lo = min(mu1 - 12 * s1, mu2 - 12 * s2)
    hi = max(mu1 + 12 * s1, mu2 + 12 * s2)
    # breakpoints where the densities cross, so |p - q| is smooth between them
    points = sorted({x for x in _density_crossings(mu1, s1, mu2, s2) if lo < x < hi} | {mu1, mu2})
    val, _ = integrate.quad(lambda x: abs(pdf(x, mu1, s1) - pdf(x, mu2, s2)), lo, hi,
                            points=points, epsabs=TV_EPSABS, limit=200)
    return float(min(max(0.5 * val, 0.0), 1.0))


def _density_crossings(mu1, s1, mu2, s2) -> list[float]:
    # log p = log q is a quadratic in x
    a = 1 / (2 * s2**2) - 1 / (2 * s1**2)
    b = mu1 / s1**2 - mu2 / s2**2
    c = mu2**2 / (2 * s2**2) - mu1**2 / (2 * s1**2) + math.log(s2 / s1)
    if a == 0:
        return [] if b == 0 else [-c / b]
    disc = b * b - 4 * a * c
    if disc < 0:
        return []
    r = math.sqrt(disc)
    return [(-b - r) / (2 * a), (-b + r) / (2 * a)]


def tv_between_rounds(laws: Sequence[tuple[Sequence[float], Sequence[float]]]) -> list[float | None]:
    """Per-round TV between consecutive diagonal-Gaussian laws ``(mu, std)``.

    Each entry is the maximum over coordinates; the first round and any round
    touching a zero standard deviation give ``None``.
    """
    out: list[float | None] = [None]
    for (m0, s0), (m1, s1) in zip(laws, laws[1:]):
        m0, s0, m1, s1 = (np.asarray(v, dtype=np.float64) for v in (m0, s0, m1, s1))
        if np.any(s0 <= 0) or np.any(s1 <= 0):
            out.append(None)
            continue
        out.append(max(gaussian_tv_1d(m0[i], s0[i], m1[i], s1[i]) for i in range(m0.size)))
    return out


@dataclass(frozen=True)
class CandidateSet:
    points: np.ndarray
    tag: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("candidates must be an (n, 3) array of reward triples")
        if pts.shape[0] == 0:
            raise DegenerateInputError("candidate set is empty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("candidate rewards must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


def _as_candidates(cands) -> CandidateSet:
    return cands if isinstance(cands, CandidateSet) else CandidateSet(cands)


def dominates(a, b) -> bool:
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_front(cands) -> list[int]:
    pts = _as_candidates(cands).points
    n = len(pts)
    return [i for i in range(n) if not any(dominates(pts[j], pts[i]) for j in range(n) if j != i)]


def scalarization_argmax(cands, weights) -> int:
    """Index maximising the weighted sum; ties go to the lowest index."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be three finite reals")
    if np.any(w <= 0):
        raise ValueError(f"scalarization weights must be strictly positive, got {tuple(w)}")
    return _argmax(_as_candidates(cands).points, w)


def _argmax(pts: np.ndarray, w: np.ndarray) -> int:
    vals = pts @ w
    return int(np.flatnonzero(vals == vals.max())[0])


@dataclass(frozen=True)
class PathPoint:
    t: float
    index: int
    weights: tuple[float, float, float]
    weights_positive: bool
    on_front: bool


def weight_path_scan(s: RewardSchedule, cands, t_grid: Sequence[float]) -> tuple[list[PathPoint], list[float]]:
    """Follow the scalarization argmax along the schedule's weight path.

    Grid points where some weight is zero (``t = 0``, where the consistency
    weight vanishes) fall outside the positive-weight hypothesis: their argmax
    is still recorded but exempt from the front check (``weights_positive``
    is False there). Returns the path and the grid values where the index changes.
    """
    cs = _as_candidates(cands)
    front = set(pareto_front(cs))
    path = []
    for t in t_grid:
        w = weights_at(s, t)
        positive = all(x > 0 for x in w)
        idx = _argmax(cs.points, np.asarray(w))
        path.append(PathPoint(float(t), idx, w, positive, idx in front))
    changes = [b.t for a, b in zip(path, path[1:]) if a.index != b.index]
    return path, changes


def _bisect(f, lo: float, hi: float, tol: float = 1e-13) -> float:
    flo = f(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, abs(lo)):
            break
    return 0.5 * (lo + hi)


def find_crossing(f, t_max: float = 1e4) -> float | None:
    """Root of ``f`` on ``[0, inf)`` by bracket expansion then bisection (at most one root)."""
    if f(0.0) == 0:
        return 0.0
    lo, hi = 0.0, 1.0
    while (f(lo) > 0) == (f(hi) > 0):
        if f(hi) == 0:
            return hi
        lo, hi = hi, 2 * hi
        if hi > t_max:
            return None
    return _bisect(f, lo, hi)


@dataclass
class EqualWeightProbe:
    t0: float | None
    crossings: dict[str, float | None]
    residual: float | None

    def to_dict(self) -> dict:
        return {"t0": self.t0, "crossings": self.crossings, "residual": self.residual}


def equal_weight_probe(s: RewardSchedule, tol: float = 1e-9) -> EqualWeightProbe:
    """Pairwise weight crossings, and a common equal-weight point if one exists.

    Each pairwise difference has at most one root on ``[0, inf)``. A common
    ``t0`` is reported only when the three weights agree within ``tol`` at
    some pairwise crossing.
    """
    def lam(t):
        return weights_at(s, t)

    pairs = {"div=cons": (0, 1), "div=mi": (0, 2), "cons=mi": (1, 2)}
    crossings = {name: find_crossing(lambda t, i=i, j=j: lam(t)[i] - lam(t)[j]) for name, (i, j) in pairs.items()}
    best_t, best_res = None, None
    for t in crossings.values():
        if t is None:
            continue
        w = lam(t)
        res = max(w) - min(w)
        if best_res is None or res < best_res:
            best_t, best_res = t, res
    t0 = best_t if best_res is not None and best_res < tol else None
    return EqualWeightProbe(t0, crossings, best_res)


def random_candidates(rng: SeededRng, n: int, duplicate_frac: float = 0.1) -> np.ndarray:
    """Random reward triples, partly on a coarse grid so ties and duplicates occur."""
    pts = rng.uniform(size=(n, 3))
    coarse = rng.uniform(size=n) < 0.5
    pts[coarse] = np.round(pts[coarse] * 4) / 4
    if n > 1:
        for i in range(n):
            if rng.uniform() < duplicate_frac:
                pts[i] = pts[int(rng.integers(0, n - 1))]
    return pts
