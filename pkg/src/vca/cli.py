"""Command-line entry point: ``vca synth-data | train | verify | dialogue``.

Exit status: 0 when every check passed, 1 when a check failed, 2 on
configuration, dataset or I/O errors.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import mpmath
import numpy as np

from vca.adaptation import LoraAdapter, save_checkpoint, load_checkpoint, training_loop, write_metrics_csv
from vca.config import RunConfig
from vca.core_math import FeatureExtractor, SeededRng
from vca.dialogue import (
    MANIFEST_FILE,
    PREFERENCE_FILE,
    PromptEmbedding,
    SyntheticUser,
    load_dialogues,
    run_dialogue,
    select,
    synthesize_dataset,
)
from vca.errors import ConfigError, DatasetError
from vca.gradcheck import gradient_suite
from vca.latent_dynamics import Denoiser
from vca.preference import Scorer, load_preference_pairs, load_scorer, pairwise_accuracy, save_scorer, train_scorer
from vca.rewards import value_derivative, weights_at
from vca.theory import (
    equal_weight_probe,
    pareto_front,
    random_candidates,
    run_convergence,
    scalarization_argmax,
    find_crossing,
)

log = logging.getLogger("vca")

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2
LOCK_NAME = ".vca.lock"
REPORT_SCHEMA = "vca.report/1"
GRADIENT_TOL = 1e-5


class LockHeld(RuntimeError):
    pass


@contextlib.contextmanager
def output_lock(out_dir: Path):
    """Single instance per output directory, via an exclusively created lockfile."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeld(f"{path} exists: another run is using this output directory") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(path)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _report(command: str, cfg: RunConfig, checks: dict, **extra) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "command": command,
        "passed": all(checks.values()),
        "checks": checks,
        "config": cfg.to_dict(),
        **extra,
    }


def _extractor(cfg: RunConfig) -> FeatureExtractor:
    dims = cfg["dims"]
    return FeatureExtractor.from_seed(cfg.seed, dims["d"], dims["k"])


def cmd_synth_data(cfg: RunConfig, out: Path) -> int:
    dims, data = cfg["dims"], cfg["data"]
    manifest = synthesize_dataset(out, data["n_dialogues"], data["rounds"], dims["d"], dims["m"], _extractor(cfg),
                                  SeededRng(cfg.seed).child("synth"), planted_strength=data["planted_strength"],
                                  gain=data["gain"], target_noise=data["target_noise"])
    print(f"wrote {data['n_dialogues']} dialogue files, 1 preference file, 1 manifest to {out} "
          f"(train {len(manifest['train'])}, test {len(manifest['test'])})")
    return EXIT_OK


def cmd_train(cfg: RunConfig, dataset: Path, out: Path) -> int:
    dims, sc_cfg, lora_cfg = cfg["dims"], cfg["scorer"], cfg["lora"]
    rng = SeededRng(cfg.seed)
    errors: list = []
    records = load_dialogues(dataset, errors)
    ids = None
    if (dataset / MANIFEST_FILE).exists():
        ids = json.loads((dataset / MANIFEST_FILE).read_text())["train"]
        records = select(records, ids)
    max_items = cfg["train"]["max_items"]
    if max_items is not None:
        records = records[:max_items]
    if not records:
        raise DatasetError("no training items")

    scorer = Scorer.create(rng.child("scorer_init"), dims["m"], dims["k"], dims["h"], sc_cfg["rank"],
                           sc_cfg["alpha"], sc_cfg["rank_ref"], seed=cfg.seed)
    scorer_acc = None
    pref_path = dataset / PREFERENCE_FILE
    if pref_path.exists():
        pairs = load_preference_pairs(pref_path)
        if ids is not None:
            wanted = set(ids)
            pairs = [p for p in pairs if p.dialogue_id in wanted] or pairs
        scorer, curve = train_scorer(scorer, pairs, sc_cfg["epochs"], sc_cfg["lr"], rng.child("scorer_train"),
                                     sc_cfg["batch_size"], sc_cfg["beta_dpo"])
        scorer_acc = pairwise_accuracy(scorer, pairs)
    else:
        log.warning("no %s under %s: training with the untrained scorer", PREFERENCE_FILE, dataset)

    den_cfg = cfg["denoiser"]
    den = Denoiser.random(dims["d"], dims["m"], rng.child("denoiser"), den_cfg["beta_dm"],
                          den_cfg["prompt_scale"], den_cfg["bias_scale"])
    lora = LoraAdapter.init(dims["d"], dims["d"] + dims["m"], rng.child("lora"), lora_cfg["rank"],
                            lora_cfg["alpha"], lora_cfg["lr"])
    res = training_loop(records, den, lora, scorer, _extractor(cfg), cfg.noise_schedule(), cfg.reward_schedule(),
                        cfg.train_config(), rng.child("train"))

    write_metrics_csv(out / "metrics.csv", res.rows)
    save_checkpoint(out / "checkpoint.json", res.denoiser, res.lora, {"seed": cfg.seed}, res.items_seen)
    save_scorer(out / "scorer.json", scorer)
    totals = [r["r_total"] for r in res.rows]
    head, tail = totals[:10], totals[-10:]
    checks = {"invariants_hold": not res.invariant_failures}
    _write_json(out / "report.json", _report(
        "train", cfg, checks, items=res.items_seen, skipped_files=errors, scorer_accuracy=scorer_acc,
        invariant_failures=res.invariant_failures,
        mean_r_total_first10=float(np.mean(head)), mean_r_total_last10=float(np.mean(tail))))
    print(f"trained on {res.items_seen} items; mean r_total first 10 {np.mean(head):.4f}, last 10 {np.mean(tail):.4f}")
    for msg in res.invariant_failures:
        print(f"FAIL {msg}", file=sys.stderr)
    return EXIT_OK if all(checks.values()) else EXIT_FAIL


def verify_weights(cfg: RunConfig) -> tuple[dict, dict]:
    s = cfg.reward_schedule()
    mpmath.mp.dps = 40
    a, b, g = (mpmath.mpf(repr(x)) for x in (s.alpha, s.beta, s.gamma))

    def exact(t):
        t = mpmath.mpf(t)
        return (mpmath.exp(-a * t), 1 - mpmath.exp(-b * t), mpmath.exp(-g * t) / 2)

    worst = max(abs(float(mpmath.mpf(x) - y)) for t in range(21) for x, y in zip(weights_at(s, t), exact(t)))
    crossing = find_crossing(lambda t: weights_at(s, t)[0] - weights_at(s, t)[1])
    oracle = float(mpmath.findroot(lambda t: exact(t)[0] - exact(t)[1], 5.0))
    dv0 = value_derivative(s, 0.0, 1.0, 1.0, 1.0)
    dv0_exact = float(-a + b - g / 2)
    checks = {
        "weights_at_0": weights_at(s, 0) == (1.0, 0.0, 0.5),
        "integer_t_match_1e-12": worst <= 1e-12,
        "div_cons_crossing_matches_oracle": crossing is not None and abs(crossing - oracle) < 1e-9,
        "dV_dt_at_0": abs(dv0 - dv0_exact) < 1e-15,
    }
    info = {"weights_at_0": list(weights_at(s, 0)), "max_abs_error": worst, "div_cons_crossing": crossing,
            "div_cons_crossing_oracle": oracle, "dV_dt_at_0_unit": dv0}
    return checks, info


def verify_pareto(cfg: RunConfig) -> tuple[dict, dict]:
    v = cfg["verify"]
    rng = SeededRng(cfg.seed).child("verify_pareto")
    hits = 0
    for trial in rng.split(v["pareto_trials"]):
        pts = random_candidates(trial, int(trial.integers(1, v["max_candidates"])))
        w = trial.uniform(1e-3, 1.0, size=3)
        hits += scalarization_argmax(pts, w) in pareto_front(pts)
    s = cfg.reward_schedule()
    probe = equal_weight_probe(s)
    consistent = (probe.t0 is not None) == (probe.residual is not None and probe.residual < 1e-9)
    checks = {"argmax_on_front_all_trials": hits == v["pareto_trials"], "equal_weight_probe_consistent": consistent}
    if s.alpha > s.gamma:
        expected = math.log(2) / (s.alpha - s.gamma)
        checks["div_mi_crossing_closed_form"] = abs(probe.crossings["div=mi"] - expected) < 1e-9
    return checks, {"membership": f"{hits}/{v['pareto_trials']}", "equal_weight_probe": probe.to_dict()}


def verify_convergence(cfg: RunConfig) -> tuple[dict, dict]:
    ccfg = cfg.convergence()
    rep = run_convergence(ccfg, SeededRng(cfg.seed).child("verify_convergence"))
    final_tv = rep.tv_successive[-1]
    checks = {
        "mean_error_below_1e-3": rep.mean_error[-1] < 1e-3,
        "w2_below_2e-3": rep.w2[-1] < 2e-3,
        "final_tv_below_0.01": final_tv is None or final_tv < 0.01,
        "w2_eventually_monotone": rep.eventually_monotone(),
        **{f"assumption_{k}": v for k, v in rep.assumptions.items()},
    }
    return checks, rep.to_dict()


def verify_gradients(cfg: RunConfig) -> tuple[dict, dict]:
    errs = gradient_suite(SeededRng(cfg.seed).child("verify_gradients"), cfg["verify"]["gradient_points"])
    return {f"{k}_rel_err_below_1e-5": e < GRADIENT_TOL for k, e in errs.items()}, {"max_rel_error": errs}


SUITES = {
    "weights": verify_weights,
    "pareto": verify_pareto,
    "convergence": verify_convergence,
    "gradients": verify_gradients,
}


def cmd_verify(cfg: RunConfig, which: str, out: Path) -> int:
    names = list(SUITES) if which == "all" else [which]
    checks, details = {}, {}
    for name in names:
        c, info = SUITES[name](cfg)
        checks.update({f"{name}.{k}": bool(v) for k, v in c.items()})
        details[name] = info
    _write_json(out / f"verify_{which}.json", _report("verify", cfg, checks, which=which, details=details))
    for k, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {k}")
    return EXIT_OK if all(checks.values()) else EXIT_FAIL


DIALOGUE_COLUMNS = ("round", "lambda_div", "lambda_cons", "lambda_mi", "r_div", "r_cons", "r_mi", "r_total", "gap")


def cmd_dialogue(cfg: RunConfig, rounds: int | None, out: Path, checkpoint: Path | None, scorer_path: Path | None) -> int:
    dims, dl = cfg["dims"], cfg["dialogue"]
    rng = SeededRng(cfg.seed).child("dialogue")
    if checkpoint is not None:
        den, lora, _ = load_checkpoint(checkpoint)
    else:
        den_cfg = cfg["denoiser"]
        den = Denoiser.random(dims["d"], dims["m"], SeededRng(cfg.seed).child("denoiser"), den_cfg["beta_dm"],
                              den_cfg["prompt_scale"], den_cfg["bias_scale"])
        lora = None
    if scorer_path is not None:
        scorer = load_scorer(scorer_path)
    else:
        scorer = Scorer.create(SeededRng(cfg.seed).child("scorer_init"), dims["m"], dims["k"], dims["h"],
                               cfg["scorer"]["rank"], cfg["scorer"]["alpha"], cfg["scorer"]["rank_ref"])
    target = rng.child("user").normal(dims["m"])
    gap = rng.child("start").normal(dims["m"])
    psi0 = PromptEmbedding(target + dl["initial_gap"] * gap / np.linalg.norm(gap))
    user = SyntheticUser(target, dl["gain"], dl["threshold"])
    max_rounds = rounds if rounds is not None else dl["max_rounds"]
    if max_rounds < 1:
        raise ConfigError("--rounds must be >= 1")
    tr = run_dialogue(user, den, lora, scorer, _extractor(cfg), cfg.noise_schedule(), cfg.reward_schedule(),
                      max_rounds, rng.child("rollout"), psi0, dl["blend"])
    with open(out / "dialogue_rewards.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIALOGUE_COLUMNS)
        for i, (b, g) in enumerate(zip(tr.breakdowns, tr.gaps), start=1):
            w.writerow([i] + [repr(float(x)) for x in (b.lambda_div, b.lambda_cons, b.lambda_mi,
                                                       b.r_div, b.r_cons, b.r_mi, b.total, g)])
    _write_json(out / "transcript.json", _report("dialogue", cfg, {"completed": True}, transcript=tr.to_dict()))
    print(f"{len(tr.breakdowns)} rounds; rounds to satisfaction: {tr.rounds_to_satisfaction}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vca", description="Multi-round latent co-adaptation toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (unknown keys are errors)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory (default: paths.out, or paths.dataset for synth-data)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="write a synthetic dialogue dataset")
    t = sub.add_parser("train", parents=[common], help="train the scorer, then fine-tune the denoiser")
    t.add_argument("--data", type=Path, help="dataset directory (default: paths.dataset)")
    v = sub.add_parser("verify", parents=[common], help="run the numerical check suites")
    v.add_argument("--which", choices=[*SUITES, "all"], default="all")
    dg = sub.add_parser("dialogue", parents=[common], help="simulate one dialogue with a synthetic user")
    dg.add_argument("--rounds", type=int, help="maximum refinement rounds")
    dg.add_argument("--checkpoint", type=Path, help="checkpoint JSON from `train`")
    dg.add_argument("--scorer", type=Path, help="scorer JSON from `train`")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.seed)
        if args.out is not None:
            out = args.out
        elif args.command == "synth-data":
            out = Path(cfg["paths"]["dataset"])
        else:
            out = Path(cfg["paths"]["out"])
        with output_lock(out):
            if args.command == "synth-data":
                return cmd_synth_data(cfg, out)
            if args.command == "train":
                return cmd_train(cfg, args.data or Path(cfg["paths"]["dataset"]), out)
            if args.command == "verify":
                return cmd_verify(cfg, args.which, out)
            return cmd_dialogue(cfg, args.rounds, out, args.checkpoint, args.scorer)
    except (ConfigError, DatasetError, LockHeld, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
