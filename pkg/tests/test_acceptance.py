"""Acceptance criteria, one test per criterion.

Every test records a one-line PASS/FAIL summary that is printed at the end
of the session.  Criteria 4 to 6 share a cache of synthetic-benchmark runs
(five seeds per scenario, 200 rounds each).

Criterion 7 trains on IDX digit files.  Set ``CNSNET_DIGITS_DIR`` to a
directory holding the MNIST files (``train-images-idx3-ubyte`` and
``train-labels-idx1-ubyte``, optionally gzipped) to use them; otherwise the
8x8 digits bundled with scikit-learn are written to IDX files and used.
"""

import os
import time

import numpy as np
import pytest

from cnsnet import core
from cnsnet.data import (SyntheticBenchmarkSpec, generate_synthetic, load_feature_table,
                         load_idx_images, make_split, OpenSetSplit, save_feature_table,
                         write_idx)
from cnsnet.experiment import synthetic_trial
from cnsnet.losses import LossWeights, classifier_loss, discriminator_loss, generator_loss
from cnsnet.metrics import confusion_matrix, detection_rates
from cnsnet.networks import (ArchitectureConfig, init_model, load_checkpoint, predict_proba,
                             sample_latent, save_checkpoint)
from cnsnet.optim import Adam
from cnsnet.recognition import ThresholdPolicy, calibrate_threshold
from cnsnet.training import (GHotMask, TrainConfig, build_ghot, classifier_step,
                             cooperative_train)

import oracles

SEEDS = (0, 1, 2, 3, 4)
ROUNDS = 200
TINY = ArchitectureConfig(input_shape=(6,), classifier_hidden=(7,), generator_hidden=(5,),
                          discriminator_hidden=(5,), latent_dim=3)


def _float64_model(seed, k=3, cfg=TINY):
    m = init_model(cfg, k, seed)
    for net in m.nets().values():
        net.params = {n: a.astype(np.float64) for n, a in net.params.items()}
    return m


def _grad_agrees(net, loss_fn):
    leaves = net.leaves()
    with core.Tape() as tape:
        loss = loss_fn(leaves)
    grads = core.backward(tape, loss, [leaves[n] for n in net.names()])
    worst = 0.0
    for name, g in zip(net.names(), grads):
        fd = oracles.central_difference(lambda: float(loss_fn(None).data), net.params[name])
        err = np.abs(g - fd) / (np.maximum(np.abs(fd), np.abs(g)) + 1e-8)
        worst = max(worst, float(err.max()))
    return worst


# ---------------------------------------------------------------------------
# criterion 1

def test_criterion_1_gradient_suite(acceptance_record):
    t0 = time.perf_counter()
    worst = {"L_D": 0.0, "L_G": 0.0, "L_P": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        m = _float64_model(seed)
        assert max(n.arch.param_count() for n in m.nets().values()) <= 1000
        real = rng.random((5, 6))
        fake = rng.random((5, 6))
        z = rng.standard_normal((5, 3))
        labels = rng.integers(0, 3, 5)
        weights = LossWeights(rng.uniform(0.5, 2), rng.uniform(0.5, 2))
        mask = np.asarray(build_ghot(labels, 3))
        worst["L_D"] = max(worst["L_D"], _grad_agrees(
            m.discriminator, lambda p: discriminator_loss(m.discriminator, real, fake, p)))
        worst["L_G"] = max(worst["L_G"], _grad_agrees(
            m.generator, lambda p: generator_loss(m.generator, m.discriminator, m.classifier,
                                                  z, weights, p)))
        worst["L_P"] = max(worst["L_P"], _grad_agrees(
            m.classifier, lambda p: classifier_loss(m.classifier, real, labels, fake, mask,
                                                    weights, p)))
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    acceptance_record(1, ok, f"{detail}; 20 seeds in {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# criterion 2

def test_criterion_2_oracle_equivalence(acceptance_record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), float(err))

    for _ in range(100):
        k = int(rng.integers(2, 9))
        logits = (rng.standard_normal(k) * rng.uniform(0.1, 10)).astype(np.float32)
        p = core.softmax(logits).data
        note("softmax", np.abs(p - oracles.softmax(logits.astype(float).tolist())).max())
        probs = rng.dirichlet(np.ones(k) * rng.uniform(0.05, 3)).astype(np.float32)
        if rng.random() < 0.2:
            probs[rng.integers(k)] = 0.0
            probs /= probs.sum()
        onehot = np.eye(k, dtype=np.float32)[rng.integers(k)]
        pl = probs.astype(float).tolist()
        note("cross_entropy", abs(core.cross_entropy(probs, onehot).item()
                                  - oracles.cross_entropy(pl, onehot.tolist())))
        note("kl_to_uniform", abs(core.kl_to_uniform(probs).item() - oracles.kl_to_uniform(pl)))
        mask = rng.integers(0, 2, k)
        note("masked_l2", abs(core.masked_l2(probs, mask).item()
                              - oracles.masked_l2(pl, mask.tolist())))
        n = int(rng.integers(2, 60))
        pred = rng.integers(-1, k, n)
        truth = rng.integers(0, k, n)
        is_known = rng.random(n) < 0.5
        is_known[0], is_known[1] = True, False
        note("detection_rates", np.abs(np.subtract(detection_rates(pred, is_known),
                                                   oracles.detection_rates(pred, is_known))).max())
        cm, rej = confusion_matrix(pred, truth, k)
        ocm, orej = oracles.confusion(pred.tolist(), truth.tolist(), k)
        note("confusion_matrix", max(np.abs(cm - np.array(ocm)).max(), np.abs(rej - np.array(orej)).max()))
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-5 for v in worst.values()) and elapsed < 60
    acceptance_record(2, ok, f"100 cases each, max abs err {max(worst.values()):.1e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# criterion 3

def _ce_gradient_oracle(params, x, y, k):
    """Hand-written backprop of mean cross-entropy through the dense classifier."""
    x = x.astype(np.float64)
    w = {n: a.astype(np.float64) for n, a in params.items()}
    a0 = x @ w["fc0.w"] + w["fc0.b"]
    h0 = np.maximum(a0, 0)
    a1 = h0 @ w["fc1.w"] + w["fc1.b"]
    h1 = np.maximum(a1, 0)
    z = h1 @ w["fc2.w"] + w["fc2.b"]
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    dz = (p - np.eye(k)[y]) / len(x)
    dh1 = dz @ w["fc2.w"].T * (a1 > 0)
    dh0 = dh1 @ w["fc1.w"].T * (a0 > 0)
    return {"fc0.w": x.T @ dh0, "fc0.b": dh0.sum(0), "fc1.w": h0.T @ dh1, "fc1.b": dh1.sum(0),
            "fc2.w": h1.T @ dz, "fc2.b": dz.sum(0)}


class _Recorder:
    def __init__(self, opt):
        self.opt, self.grads = opt, None

    def step(self, params, grads):
        self.grads = [g.copy() for g in grads]
        self.opt.step(params, grads)


def _small_benchmark(seed=0):
    spec = SyntheticBenchmarkSpec(k_total=5, dim=10, per_family=40, seed=seed)
    ds = generate_synthetic(spec)
    split = make_split(ds, known_count=4, seed=seed)
    return split.known_xy(ds, "train")


def test_criterion_3_degeneration(acceptance_record):
    x, y = _small_benchmark()
    arch = ArchitectureConfig(input_shape=(10,), classifier_hidden=(16, 12), generator_hidden=(8,),
                              discriminator_hidden=(8,), latent_dim=4)
    worst = 0.0
    for name in ("baseline", "full"):
        cfg = TrainConfig.scenario(name, architecture=arch, weights=LossWeights(0, 0), batch_size=16)
        m = init_model(arch, 4, 3)
        rec = _Recorder(Adam(m.classifier.arrays(), 1e-2))
        rng = np.random.default_rng(0)
        for step in range(12):
            idx = rng.choice(len(x), 16, replace=False)
            ref = _ce_gradient_oracle(m.classifier.params, x[idx], y[idx], 4)
            z = sample_latent(16, 4, rng) if cfg.enable_synthesizer else None
            classifier_step(m, rec, x[idx], y[idx], z, cfg)
            for n, g in zip(m.classifier.names(), rec.grads):
                worst = max(worst, float(np.abs(g - ref[n]).max()))
    runs = []
    for _ in range(2):
        cfg = TrainConfig.scenario("baseline", architecture=arch, rounds=3, batch_size=16, seed=7)
        model, trace = cooperative_train(x, y, cfg)
        runs.append((b"".join(a.tobytes() for n in model.nets().values() for a in n.arrays()),
                     [(r.loss_d, r.loss_g, r.loss_p) for r in trace]))
    reproducible = runs[0] == runs[1]
    ok = worst <= 1e-6 and reproducible
    acceptance_record(3, ok, f"max |grad - CE grad| {worst:.1e}, bit-reproducible={reproducible}")
    assert ok


# ---------------------------------------------------------------------------
# criteria 4 to 6: synthetic benchmark

_TRIALS = {}


def _trial(scenario, seed):
    key = (scenario, seed)
    if key not in _TRIALS:
        t0 = time.perf_counter()
        res = synthetic_trial(scenario, seed, rounds=ROUNDS)
        _TRIALS[key] = (res, time.perf_counter() - t0)
    return _TRIALS[key]


def _scenario_runs(scenario):
    out = [_trial(scenario, s) for s in SEEDS]
    return [r for r, _ in out], sum(t for _, t in out)


def test_criterion_4_flattening_effect(acceptance_record):
    runs, seconds = _scenario_runs("full")
    gaps = [r.known_max_prob - r.synth_max_prob for r in runs]
    gap = float(np.mean(gaps))
    ok = gap >= 0.15
    acceptance_record(4, ok, f"mean known max-prob minus synthesized max-prob {gap:.3f} "
                             f"(per seed {', '.join(f'{g:.3f}' for g in gaps)}), {seconds / 60:.1f} min")
    assert ok


def test_criterion_5_comparative_detection(acceptance_record):
    full, t_full = _scenario_runs("full")
    base, t_base = _scenario_runs("baseline")
    d_full = float(np.mean([r.report.d_acc for r in full]))
    d_base = float(np.mean([r.report.d_acc for r in base]))
    c_full = float(np.mean([r.report.c_acc for r in full]))
    c_base = float(np.mean([r.report.c_acc for r in base]))
    gain, loss = d_full - d_base, c_base - c_full
    ok = gain >= 0.05 and loss <= 0.02
    acceptance_record(5, ok, f"D_Acc full {d_full:.4f} vs baseline {d_base:.4f} (gain {100 * gain:+.2f} pp, "
                             f"need >= +5); C_Acc drop {100 * loss:.2f} pp (need <= 2); "
                             f"{(t_full + t_base) / 60:.1f} min")
    assert ok


def test_criterion_6_ablation_ordering(acceptance_record):
    means = {}
    for name in ("baseline", "exclusion", "flattening", "full"):
        runs, _ = _scenario_runs(name)
        means[name] = float(np.mean([r.report.d_acc for r in runs]))
    ok = (means["baseline"] < means["exclusion"] < means["full"]
          and means["baseline"] < means["flattening"] < means["full"])
    acceptance_record(6, ok, "mean D_Acc " + ", ".join(f"{k} {v:.4f}" for k, v in means.items()))
    assert ok


# ---------------------------------------------------------------------------
# criterion 7

def _digit_files(tmp_path):
    root = os.environ.get("CNSNET_DIGITS_DIR")
    if root:
        for suffix in ("", ".gz"):
            imgs = os.path.join(root, "train-images-idx3-ubyte" + suffix)
            labels = os.path.join(root, "train-labels-idx1-ubyte" + suffix)
            if os.path.exists(imgs) and os.path.exists(labels):
                return imgs, labels, "MNIST"
        pytest.fail(f"CNSNET_DIGITS_DIR={root} holds no MNIST training IDX files")
    sklearn_datasets = pytest.importorskip("sklearn.datasets")
    digits = sklearn_datasets.load_digits()
    imgs, labels = tmp_path / "digits-images.idx", tmp_path / "digits-labels.idx"
    write_idx(imgs, np.round(digits.images * 255 / 16).astype(np.uint8))
    write_idx(labels, digits.target.astype(np.uint8))
    return imgs, labels, "8x8 digits"


def test_criterion_7_digit_replication(acceptance_record, tmp_path):
    t0 = time.perf_counter()
    imgs, labels, source = _digit_files(tmp_path)
    ds = load_idx_images(imgs, labels)
    split = make_split(ds, known_ids=list(range(8)), seed=0)
    x, y = split.known_xy(ds, "train")
    cfg = TrainConfig(rounds=50, seed=0)
    model, _ = cooperative_train(x, y, cfg, k=8)
    clf = model.classifier
    theta = calibrate_threshold(clf, split.known_xy(ds, "validation")[0], ThresholdPolicy("percentile", 5))
    below_known = float(np.mean(predict_proba(clf, split.known_xy(ds, "test")[0]).max(axis=1) < theta))
    below_unknown = float(np.mean(predict_proba(clf, split.unknown_x(ds)).max(axis=1) < theta))
    gap = below_unknown - below_known
    elapsed = time.perf_counter() - t0
    ok = gap >= 0.25
    acceptance_record(7, ok, f"{source}: below-theta fraction unknown {below_unknown:.3f} vs known "
                             f"{below_known:.3f} (gap {gap:.3f}), theta {theta:.3f}, {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# criterion 8

def test_criterion_8_format_round_trips(acceptance_record, tmp_path):
    m = init_model(ArchitectureConfig(input_shape=(25,)), 8, 11)
    save_checkpoint(tmp_path / "m.cnsn", m, {"norm_lo": np.zeros(25)}, {"round": 1})
    m2, _, _ = load_checkpoint(tmp_path / "m.cnsn")
    ckpt_ok = all(a.tobytes() == b.tobytes()
                  for n1, n2 in zip(m.nets().values(), m2.nets().values())
                  for a, b in zip(n1.arrays(), n2.arrays()))
    ds = generate_synthetic(SyntheticBenchmarkSpec(per_family=50, seed=4))
    save_feature_table(ds, tmp_path / "d.csv", "text")
    save_feature_table(ds, tmp_path / "d.mosr", "binary")
    t = load_feature_table(tmp_path / "d.csv", "text")
    b = load_feature_table(tmp_path / "d.mosr", "binary")
    table_ok = (np.array_equal(t.features, ds.features) and np.array_equal(b.features, ds.features)
                and np.array_equal(t.labels, ds.labels) and np.array_equal(b.labels, ds.labels))
    split = make_split(ds, known_count=8, seed=9)
    split.save(tmp_path / "s.json")
    loaded = OpenSetSplit.load(tmp_path / "s.json")
    again = make_split(b, known_count=8, seed=loaded.seed)
    split_ok = (loaded.dataset_digest == b.digest()
                and all(np.array_equal(getattr(loaded, p), getattr(again, p))
                        for p in ("train", "validation", "test", "unknown_test")))
    ok = ckpt_ok and table_ok and split_ok
    acceptance_record(8, ok, f"checkpoint bit-exact={ckpt_ok}, text/binary identical={table_ok}, "
                             f"split reproduced={split_ok}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 9

def test_criterion_9_metric_arithmetic(acceptance_record):
    pred = np.array([0] * 90 + [-1] * 10 + [-1] * 80 + [1] * 20)
    is_known = np.array([True] * 100 + [False] * 100)
    got = detection_rates(pred, is_known)
    ok = got == (0.9, 0.8, 0.85)
    acceptance_record(9, ok, f"detection_rates(90, 10, 80, 20) = {got}")
    assert ok
