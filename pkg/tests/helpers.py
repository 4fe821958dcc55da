"""Shared fixtures for building a small end-to-end training setup."""

from vca.adaptation import LoraAdapter, TrainConfig, training_loop
from vca.core_math import FeatureExtractor, SeededRng
from vca.dialogue import PREFERENCE_FILE, load_dialogues, synthesize_dataset
from vca.latent_dynamics import Denoiser, NoiseSchedule
from vca.preference import Scorer, load_preference_pairs, train_scorer
from vca.rewards import RewardSchedule

D, M, K = 16, 16, 16


def run_pipeline(tmp, seed, n_items=50, rounds=3, cfg=None):
    """Synthesize a dataset, fit the scorer on its pairs and run the training loop on every item."""
    rng = SeededRng(seed)
    ext = FeatureExtractor.from_seed(seed, D, K)
    synthesize_dataset(tmp, n_items, rounds, D, M, ext, rng.child("synth"))
    records = load_dialogues(tmp)
    pairs = load_preference_pairs(tmp / PREFERENCE_FILE)
    scorer = Scorer.create(rng.child("scorer_init"), M, K, 8, 8, 16.0, 64)
    scorer, _ = train_scorer(scorer, pairs, 50, 0.5, rng.child("scorer_train"), 32)
    den = Denoiser.random(D, M, rng.child("denoiser"), 0.5, 1.0, 0.1)
    lora = LoraAdapter.init(D, D + M, rng.child("lora"), 4, 4.0, 1e-3)
    return training_loop(records, den, lora, scorer, ext, NoiseSchedule(), RewardSchedule(),
                         cfg or TrainConfig(), rng.child("train"))
