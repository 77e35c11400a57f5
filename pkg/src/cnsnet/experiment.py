"""End-to-end runs on a dataset: split, normalize, train, calibrate, score."""

from dataclasses import dataclass, replace

import numpy as np

from .data import generate_synthetic, make_split, normalize, SyntheticBenchmarkSpec
from .metrics import build_report
from .networks import generator_forward, predict_proba, sample_latent
from .recognition import ThresholdPolicy, calibrate_threshold, recognize_probs
from .training import TrainConfig, cooperative_train


@dataclass
class TrialResult:
    scenario: str
    seed: int
    report: object
    theta: float
    synth_max_prob: float
    known_max_prob: float
    unknown_max_prob: float
    model: object = None
    trace: object = None


def prepare(dataset, split):
    """Normalize with train-split statistics and return the pieces training needs."""
    norm, stats = normalize(dataset, split.train)
    return norm, stats


def run_trial(dataset, split, config, scenario="full", policy=ThresholdPolicy("percentile", 5.0),
              n_synth=1000, keep_model=False):
    norm, _ = prepare(dataset, split)
    x_tr, y_tr = split.known_xy(norm, "train")
    x_val, _ = split.known_xy(norm, "validation")
    x_te, y_te = split.known_xy(norm, "test")
    x_unk = split.unknown_x(norm)
    cfg = config if scenario is None else TrainConfig.scenario(
        scenario, **{k: getattr(config, k) for k in
                     ("rounds", "batch_size", "lr", "weights", "seed", "latent_dim",
                      "architecture", "non_saturating", "checkpoint_every")})
    model, trace = cooperative_train(x_tr, y_tr, cfg, k=split.k)
    clf = model.classifier
    theta = calibrate_threshold(clf, x_val, policy)
    known_pred, known_conf = recognize_probs(predict_proba(clf, x_te), theta)
    unk_pred, unk_conf = recognize_probs(predict_proba(clf, x_unk), theta)
    report = build_report(known_pred, y_te, unk_pred, split.k, theta)
    rng = np.random.default_rng([cfg.seed, 7])
    z = sample_latent(n_synth, model.generator.arch.in_dim, rng)
    synth = generator_forward(model.generator, z).data
    synth_conf = predict_proba(clf, synth).max(axis=1)
    return TrialResult(scenario or "custom", cfg.seed, report, theta,
                       float(synth_conf.mean()), float(known_conf.mean()),
                       float(unk_conf.mean()),
                       model if keep_model else None, trace if keep_model else None)


def synthetic_trial(scenario, seed, rounds=200, spec=None, known_count=8, **train_kw):
    """One run of the Gaussian-family benchmark; the seed drives data, split and training."""
    spec = spec or SyntheticBenchmarkSpec(seed=seed)
    if spec.seed != seed:
        spec = replace(spec, seed=seed)
    dataset = generate_synthetic(spec)
    split = make_split(dataset, known_count=known_count, seed=seed)
    config = TrainConfig(rounds=rounds, seed=seed, **train_kw)
    return run_trial(dataset, split, config, scenario)
