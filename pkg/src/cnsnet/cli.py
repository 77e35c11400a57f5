"""Command-line runner: train, eval, sweep, synth-bench, export-synth.

Settings resolve as flags over a JSON config file over built-in defaults.
Every command writes the resolved settings and their digest next to its
outputs, and every output file carries that digest.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import (MinMaxStats, OpenSetSplit, SyntheticBenchmarkSpec, generate_synthetic,
                   load_feature_table, make_split, nearest_mean_accuracy, save_feature_table)
from .errors import (CNSNetError, ContractViolation, FormatError, InvalidConfigError,
                     InvalidInputError, SplitError, UndefinedMetricError)
from .losses import LossWeights
from .metrics import build_report
from .networks import (ArchitectureConfig, config_digest, generator_forward, load_checkpoint,
                       predict_proba, sample_latent, save_checkpoint)
from .recognition import (ThresholdPolicy, calibrate_threshold, recognize_probs,
                          write_outcomes_csv)
from .training import SCENARIOS, TrainConfig, cooperative_train

log = logging.getLogger("cnsnet")

OUT_ENV = "CNSNET_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(InvalidConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# resolved experiment settings

@dataclass
class ExperimentConfig:
    dataset: str = None
    format: str = "text"
    known_ids: list = None
    known_count: int = None
    train_fraction: float = 0.72
    validation_fraction: float = 0.08
    split: str = None
    scenario: str = "full"
    variant: str = "dense"
    train: dict = field(default_factory=dict)
    threshold: str = "percentile:5"
    out: str = None

    def train_config(self, feature_dim=None):
        t = dict(self.train)
        weights = LossWeights(beta=t.pop("beta", 1.0), gamma=t.pop("gamma", 1.0))
        arch = None
        if feature_dim is not None:
            arch = ArchitectureConfig(variant=self.variant, input_shape=(feature_dim,),
                                      latent_dim=t.get("latent_dim", 64))
        if self.scenario not in SCENARIOS:
            raise InvalidConfigError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        return TrainConfig.scenario(self.scenario, weights=weights, architecture=arch, **t)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        d = self.to_dict()
        d.pop("out", None)
        return config_digest(d)


TRAIN_KEYS = ("rounds", "batch_size", "lr", "beta", "gamma", "seed", "latent_dim",
              "non_saturating", "checkpoint_every")


def _read_config_file(path):
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise InvalidConfigError(f"config {path} must hold a JSON object")
    return data


def resolve_config(args):
    """Merge defaults, the ``--config`` file and explicit flags."""
    file_cfg = _read_config_file(getattr(args, "config", None))
    train = dict(file_cfg.pop("train", {}))
    for key in TRAIN_KEYS:
        if key in file_cfg:
            train[key] = file_cfg.pop(key)
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown_keys = set(file_cfg) - known
    if unknown_keys:
        raise InvalidConfigError(f"unrecognised config keys: {sorted(unknown_keys)}")
    cfg = ExperimentConfig(**file_cfg)
    for key in known - {"train"}:
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    for key in TRAIN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            train[key] = val
    cfg.train = train
    if cfg.out is None:
        cfg.out = os.environ.get(OUT_ENV, "runs")
    return cfg


def _write_snapshot(out, payload, digest):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump({"config_digest": digest, **payload}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _digest_line(fh, digest):
    fh.write(f"# config_digest: {digest}\n")


def _load_dataset(cfg):
    if not cfg.dataset:
        raise InvalidConfigError("no dataset given (use --dataset)")
    if not os.path.exists(cfg.dataset):
        raise FileNotFoundError(f"dataset not found: {cfg.dataset}")
    return load_feature_table(cfg.dataset, cfg.format)


def _load_split(cfg, dataset):
    if cfg.split:
        if not os.path.exists(cfg.split):
            raise FileNotFoundError(f"split manifest not found: {cfg.split}")
        split = OpenSetSplit.load(cfg.split)
        if split.dataset_digest and split.dataset_digest != dataset.digest():
            raise SplitError(f"split {cfg.split} was made for a different dataset")
        return split
    if cfg.known_ids is None and cfg.known_count is None:
        raise InvalidConfigError("give --split, --known-ids or --known-count")
    return make_split(dataset, known_ids=cfg.known_ids, known_count=cfg.known_count,
                      train_fraction=cfg.train_fraction,
                      validation_fraction=cfg.validation_fraction,
                      seed=cfg.train.get("seed", 0))


def _load_model(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, extras, meta = load_checkpoint(path)
    if "norm_lo" not in extras or "norm_hi" not in extras:
        raise FormatError(f"{path}: checkpoint lacks normalization statistics")
    return model, MinMaxStats(extras["norm_lo"], extras["norm_hi"]), meta


def _check_dims(model, dataset):
    if model.feature_dim != dataset.dim:
        raise InvalidConfigError(
            f"checkpoint expects {model.feature_dim} features, dataset has {dataset.dim}")


# ---------------------------------------------------------------------------
# commands

def cmd_train(args):
    cfg = resolve_config(args)
    dataset = _load_dataset(cfg)
    split = _load_split(cfg, dataset)
    stats = MinMaxStats.fit(dataset.features[split.train])
    feats = stats.apply(dataset.features)
    tcfg = cfg.train_config(dataset.dim)
    digest = cfg.digest()
    payload = {"experiment": cfg.to_dict(), "train_config": tcfg.to_dict()}
    _write_snapshot(cfg.out, payload, digest)
    split.extra = {"config_digest": digest}
    split.save(os.path.join(cfg.out, "split.json"))
    x_tr = feats[split.train]
    y_tr = split.family_index(dataset.labels[split.train])
    eval_data = None
    if len(split.validation):
        eval_data = (feats[split.validation], split.family_index(dataset.labels[split.validation]))
    extras = {"norm_lo": stats.lo, "norm_hi": stats.hi}
    meta = {"config_digest": digest, "known_ids": split.known_ids,
            "dataset_digest": split.dataset_digest}
    model, trace = cooperative_train(
        x_tr, y_tr, tcfg, k=split.k, eval_data=eval_data,
        checkpoint_dir=os.path.join(cfg.out, "checkpoints"),
        checkpoint_extras=extras, checkpoint_meta=meta)
    final = os.path.join(cfg.out, "model.cnsn")
    save_checkpoint(final, model, extras, {**meta, "round": tcfg.rounds})
    trace_path = os.path.join(cfg.out, "trace.csv")
    trace.to_csv(trace_path)
    _prepend_digest(trace_path, digest)
    print(f"trained {tcfg.rounds} rounds; checkpoint {final}")
    return EXIT_OK


def _prepend_digest(path, digest):
    with open(path) as fh:
        body = fh.read()
    with open(path, "w") as fh:
        _digest_line(fh, digest)
        fh.write(body)


def _eval_inputs(cfg, checkpoint):
    model, stats, meta = _load_model(checkpoint)
    dataset = _load_dataset(cfg)
    _check_dims(model, dataset)
    split = _load_split(cfg, dataset)
    if split.k != model.k:
        raise InvalidConfigError(
            f"checkpoint has {model.k} known families, split has {split.k}")
    feats = stats.apply(dataset.features)
    return model, stats, meta, dataset, split, feats


def cmd_eval(args):
    cfg = resolve_config(args)
    model, stats, meta, dataset, split, feats = _eval_inputs(cfg, args.checkpoint)
    clf = model.classifier
    policy = ThresholdPolicy.parse(cfg.threshold)
    x_val = feats[split.validation]
    calib = None
    if policy.kind == "sweep":
        if not args.calibration:
            raise InvalidConfigError("the sweep policy needs --calibration (pseudo-unknown data)")
        calib = stats_apply_file(args.calibration, cfg.format, stats)
    theta = calibrate_threshold(clf, x_val, policy, calib)
    test_idx = split.test
    y_te = split.family_index(dataset.labels[test_idx])
    known_pred, known_conf = recognize_probs(predict_proba(clf, feats[test_idx]), theta)
    unk_idx = np.array([], dtype=np.int64) if args.known_only else split.unknown_test
    unk_pred, unk_conf = recognize_probs(predict_proba(clf, feats[unk_idx]), theta) \
        if len(unk_idx) else (np.array([], dtype=np.int64), np.array([]))
    digest = cfg.digest()
    report = build_report(known_pred, y_te, unk_pred, split.k, theta, digest)
    report.extra = {"checkpoint_digest": meta.get("config_digest", ""),
                    "policy": policy.describe(), "known_ids": split.known_ids}
    os.makedirs(cfg.out, exist_ok=True)
    _write_snapshot(cfg.out, {"experiment": cfg.to_dict(), "checkpoint": args.checkpoint}, digest)
    report_path = os.path.join(cfg.out, "report.json")
    report.to_json(report_path)
    outcome_path = os.path.join(cfg.out, "outcomes.csv")
    ids = np.concatenate([test_idx, unk_idx])
    write_outcomes_csv(outcome_path, np.concatenate([known_pred, unk_pred]),
                       np.concatenate([known_conf, unk_conf]), ids.tolist())
    _prepend_digest(outcome_path, digest)
    if report.detection_defined:
        print(f"theta={theta:.6g} C_Acc={report.c_acc:.4f} TPR={report.tpr_known:.4f} "
              f"TNR={report.tnr_unknown:.4f} D_Acc={report.d_acc:.4f}")
    else:
        print(f"theta={theta:.6g} C_Acc={report.c_acc:.4f} (no unknown instances; "
              "detection metrics undefined)")
    return EXIT_OK


def stats_apply_file(path, fmt, stats):
    if not os.path.exists(path):
        raise FileNotFoundError(f"calibration data not found: {path}")
    return stats.apply(load_feature_table(path, fmt).features)


def parse_grid(text=None, steps=None):
    if text:
        try:
            grid = [float(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise InvalidConfigError(f"bad threshold grid {text!r}") from None
    elif steps:
        grid = np.linspace(0, 1, int(steps) + 2)[1:-1].tolist()
    else:
        grid = []
    if not grid:
        raise InvalidConfigError("empty threshold grid")
    if any(not 0 < t < 1 for t in grid):
        raise InvalidConfigError("grid values must lie strictly inside (0, 1)")
    return sorted(grid)


def sweep_rows(known_probs, known_labels, unknown_probs, grid, k):
    """One ``(theta, tpr, tnr, d_acc, c_acc)`` tuple per grid value."""
    rows = []
    for theta in grid:
        kp, _ = recognize_probs(known_probs, theta)
        up, _ = recognize_probs(unknown_probs, theta)
        r = build_report(kp, known_labels, up, k, theta)
        rows.append((theta, r.tpr_known, r.tnr_unknown, r.d_acc, r.c_acc))
    return rows


def cmd_sweep(args):
    cfg = resolve_config(args)
    grid = parse_grid(args.grid, args.steps)
    model, stats, meta, dataset, split, feats = _eval_inputs(cfg, args.checkpoint)
    if not len(split.unknown_test):
        raise UndefinedMetricError("sweep needs unknown test instances")
    clf = model.classifier
    kp = predict_proba(clf, feats[split.test])
    up = predict_proba(clf, feats[split.unknown_test])
    y_te = split.family_index(dataset.labels[split.test])
    digest = cfg.digest()
    _write_snapshot(cfg.out, {"experiment": cfg.to_dict(), "checkpoint": args.checkpoint,
                              "grid": grid}, digest)
    path = os.path.join(cfg.out, "sweep.csv")
    with open(path, "w", newline="") as fh:
        _digest_line(fh, digest)
        w = csv.writer(fh)
        w.writerow(["theta", "tpr", "tnr", "d_acc", "c_acc"])
        for row in sweep_rows(kp, y_te, up, grid, split.k):
            w.writerow([f"{v:.9g}" for v in row])
    print(f"wrote {len(grid)} rows to {path}")
    return EXIT_OK


def cmd_synth_bench(args):
    cfg = resolve_config(args)
    seed = cfg.train.get("seed", 0)
    spec = SyntheticBenchmarkSpec(k_total=args.k_total, dim=args.dim, per_family=args.per_family,
                                  sigma=args.sigma, spacing=args.spacing, seed=seed)
    if not 0 < args.known_count < spec.k_total:
        raise InvalidConfigError("known count must leave at least one unknown family")
    dataset = generate_synthetic(spec)
    split = make_split(dataset, known_count=args.known_count,
                       train_fraction=cfg.train_fraction,
                       validation_fraction=cfg.validation_fraction, seed=seed)
    payload = {"benchmark": asdict(spec), "known_count": args.known_count,
               "train_fraction": cfg.train_fraction,
               "validation_fraction": cfg.validation_fraction}
    digest = config_digest(payload)
    split.extra = {"config_digest": digest}
    _write_snapshot(cfg.out, payload, digest)
    save_feature_table(dataset, os.path.join(cfg.out, "dataset.mosr"), "binary")
    split.save(os.path.join(cfg.out, "split.json"))
    acc = nearest_mean_accuracy(spec, generate_synthetic(spec, draw=1))
    print(f"nearest-mean oracle accuracy: {acc:.4f}")
    return EXIT_OK


def cmd_export_synth(args):
    cfg = resolve_config(args)
    if args.count < 0:
        raise InvalidConfigError("count must be non-negative")
    model, stats, meta = _load_model(args.checkpoint)
    known_rows = np.zeros((0, model.feature_dim), dtype=np.float32)
    known_fam = np.zeros(0, dtype=np.int64)
    if cfg.dataset and args.count:
        dataset = _load_dataset(cfg)
        _check_dims(model, dataset)
        split = _load_split(cfg, dataset)
        rng = np.random.default_rng([cfg.train.get("seed", 0), 11])
        pick = rng.choice(split.train, size=min(args.count, len(split.train)), replace=False)
        known_rows = stats.apply(dataset.features[np.sort(pick)])
        known_fam = split.family_index(dataset.labels[np.sort(pick)])
    rng = np.random.default_rng([cfg.train.get("seed", 0), 7])
    synth = np.zeros((0, model.feature_dim), dtype=np.float32)
    if args.count:
        z = sample_latent(args.count, model.generator.arch.in_dim, rng)
        synth = generator_forward(model.generator, z).data
    digest = cfg.digest()
    _write_snapshot(cfg.out, {"experiment": cfg.to_dict(), "checkpoint": args.checkpoint,
                              "count": args.count}, digest)
    clf = model.classifier
    path = os.path.join(cfg.out, "synthesized.csv")
    with open(path, "w", newline="") as fh:
        _digest_line(fh, digest)
        w = csv.writer(fh)
        w.writerow(["source", "family", "max_prob"] + [f"f{i}" for i in range(model.feature_dim)])
        for source, rows, fams in (("synthesized", synth, [""] * len(synth)),
                                   ("known", known_rows, known_fam.tolist())):
            if not len(rows):
                continue
            mp = predict_proba(clf, rows).max(axis=1)
            for fam, p, row in zip(fams, mp, rows):
                w.writerow([source, fam, f"{p:.9g}"] + [f"{v:.9g}" for v in row.tolist()])
    print(f"wrote {len(synth)} synthesized and {len(known_rows)} known rows to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p, dataset=True):
    p.add_argument("--config", help="JSON file of settings; flags take precedence")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    if dataset:
        p.add_argument("--dataset", help="feature table path")
        p.add_argument("--format", choices=["text", "csv", "binary", "mosr"])
        p.add_argument("--split", help="split manifest (JSON) to reuse")
        p.add_argument("--known-ids", type=lambda s: [int(v) for v in s.split(",")])
        p.add_argument("--known-count", type=int)
        p.add_argument("--train-fraction", type=float)
        p.add_argument("--validation-fraction", type=float)


def _add_threshold(p):
    p.add_argument("--threshold", help="fixed:THETA, percentile:Q or sweep:T1,T2,...")


def build_parser():
    parser = _Parser(prog="cnsnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train classifier, generator and discriminator")
    _add_common(p)
    p.add_argument("--rounds", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--non-saturating", action="store_true", default=None)
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--baseline", dest="scenario", action="store_const", const="baseline",
                   help="plain softmax-threshold classifier (same as --scenario baseline)")
    p.add_argument("--variant", choices=["dense", "conv"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    _add_common(p)
    _add_threshold(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calibration", help="pseudo-unknown data for the sweep policy")
    p.add_argument("--known-only", action="store_true",
                   help="leave unknown instances out (detection metrics become undefined)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="detection metrics over a grid of thresholds")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", help="comma-separated thresholds in (0, 1)")
    p.add_argument("--steps", type=int, help="evenly spaced interior grid of this size")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth-bench", help="write the Gaussian-family benchmark")
    _add_common(p, dataset=False)
    p.add_argument("--k-total", type=int, default=10)
    p.add_argument("--dim", type=int, default=25)
    p.add_argument("--per-family", type=int, default=500)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--spacing", type=float, default=3.0, help="closest mean distance / sigma")
    p.add_argument("--known-count", type=int, default=8)
    p.set_defaults(func=cmd_synth_bench)

    p = sub.add_parser("export-synth", help="dump synthesized and known rows as CSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.set_defaults(func=cmd_export_synth)
    return parser


def exit_code_for(exc):
    if isinstance(exc, (ContractViolation, FloatingPointError)):
        return EXIT_INTERNAL
    if isinstance(exc, InvalidConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (OSError, FormatError, SplitError, InvalidInputError,
                        UndefinedMetricError, CNSNetError)):
        return EXIT_DATA
    return EXIT_INTERNAL


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("choose a command: train, eval, sweep, synth-bench, export-synth")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except Exception as exc:  # noqa: BLE001  (mapped to an exit status)
        code = exit_code_for(exc)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, FileNotFoundError) and exc.filename and exc.filename not in msg:
            msg = f"{msg}: {exc.filename}"
        print(f"cnsnet: error: {msg}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            log.debug("internal failure", exc_info=True)
        return code


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
