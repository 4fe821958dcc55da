"""Run configuration: one JSON file, every key known, every value validated up front."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from vca.adaptation import PpoConfig, TrainConfig
from vca.errors import ConfigError
from vca.latent_dynamics import NoiseSchedule
from vca.rewards import RewardSchedule
from vca.theory import ConvergenceConfig

DEFAULTS: dict = {
    "seed": 0,
    "dims": {"d": 16, "m": 16, "k": 16, "h": 8},
    "schedule": {"alpha": 0.15, "beta": 0.1, "gamma": 0.075},
    "noise": {"sigma0": 1.0, "p": 1.5, "T": 70, "T1": 1, "T2": 40},
    "denoiser": {"beta_dm": 0.5, "prompt_scale": 1.0, "bias_scale": 0.1},
    "lora": {"rank": 4, "alpha": 4.0, "lr": 1e-3},
    "ppo": {"clip_eps": 0.2, "sigma_pol": 0.1, "epochs": 4, "minibatch_size": None},
    "train": {"lr_phi": 0.5, "noise_steps_per_update": 1, "baseline_momentum": 0.9, "max_items": None},
    "scorer": {"rank": 8, "alpha": 16.0, "rank_ref": 64, "beta_dpo": 1.0, "lr": 0.5, "epochs": 50, "batch_size": 32},
    "data": {"n_dialogues": 50, "rounds": 3, "planted_strength": 3.0, "gain": 0.2, "target_noise": 0.05},
    "dialogue": {"gain": 0.2, "blend": 1.0, "threshold": 0.05, "max_rounds": 20, "initial_gap": 1.0},
    "convergence": {"beta_dm": 0.5, "alpha_p": 0.8, "sigma0": 1.0, "p": 1.5, "rounds": 200,
                    "trials": 32, "d": 8, "m": 8, "prompt_gap": 1.0, "allow_violation": False},
    "verify": {"pareto_trials": 1000, "max_candidates": 50, "gradient_points": 50},
    "paths": {"dataset": "data", "out": "runs"},
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path} must be an object")
            out[key] = _merge(base[key], val, path)
        else:
            out[key] = val
    return out


class RunConfig:
    """Resolved configuration. ``data`` holds the full nested dict."""

    def __init__(self, data: dict | None = None):
        self.data = _merge(DEFAULTS, data or {})
        self.validate()

    @classmethod
    def load(cls, path: str | Path | None, seed: int | None = None) -> "RunConfig":
        raw = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: top level must be an object")
        if seed is not None:
            raw = {**raw, "seed": seed}
        return cls(raw)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(**self.data["noise"])

    def reward_schedule(self) -> RewardSchedule:
        return RewardSchedule(**self.data["schedule"])

    def ppo(self) -> PpoConfig:
        return PpoConfig(**self.data["ppo"])

    def train_config(self) -> TrainConfig:
        t = self.data["train"]
        return TrainConfig(self.ppo(), t["lr_phi"], t["noise_steps_per_update"], t["baseline_momentum"])

    def convergence(self, **overrides) -> ConvergenceConfig:
        return ConvergenceConfig(**{**self.data["convergence"], **overrides})

    def validate(self) -> None:
        d = self.data
        seed = d["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or not (0 <= seed < 2**63):
            raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
        for name, val in d["dims"].items():
            _positive_int(f"dims.{name}", val)
        _positive_int("lora.rank", d["lora"]["rank"])
        _positive_float("lora.alpha", d["lora"]["alpha"])
        _positive_float("lora.lr", d["lora"]["lr"])
        sc = d["scorer"]
        for name in ("rank", "rank_ref", "batch_size"):
            _positive_int(f"scorer.{name}", sc[name])
        _nonneg_int("scorer.epochs", sc["epochs"])
        for name in ("alpha", "beta_dpo", "lr"):
            _positive_float(f"scorer.{name}", sc[name])
        beta_dm = d["denoiser"]["beta_dm"]
        if not (isinstance(beta_dm, (int, float)) and 0 < beta_dm < 1):
            raise ConfigError(f"denoiser.beta_dm must lie in (0, 1), got {beta_dm}")
        data = d["data"]
        _positive_int("data.n_dialogues", data["n_dialogues"])
        _positive_int("data.rounds", data["rounds"])
        if not (0 < data["gain"] <= 1):
            raise ConfigError("data.gain must lie in (0, 1]")
        dlg = d["dialogue"]
        _positive_int("dialogue.max_rounds", dlg["max_rounds"])
        if not (0 < dlg["gain"] <= 1) or not (0 <= dlg["blend"] <= 1) or dlg["threshold"] <= 0:
            raise ConfigError("dialogue: need gain in (0, 1], blend in [0, 1], threshold > 0")
        if d["train"]["max_items"] is not None:
            _nonneg_int("train.max_items", d["train"]["max_items"])
        for name, val in d["verify"].items():
            _positive_int(f"verify.{name}", val)
        for name, val in d["paths"].items():
            if not isinstance(val, str) or not val:
                raise ConfigError(f"paths.{name} must be a nonempty string")
        # the owning modules check their own invariants
        try:
            self.noise_schedule()
            self.reward_schedule()
            self.train_config()
            self.convergence().check()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _positive_int(name, v):
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise ConfigError(f"{name} must be a positive integer, got {v!r}")


def _nonneg_int(name, v):
    if not isinstance(v, int) or isinstance(v, bool) or v < 0:
        raise ConfigError(f"{name} must be a nonnegative integer, got {v!r}")


def _positive_float(name, v):
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
        raise ConfigError(f"{name} must be positive, got {v!r}")
