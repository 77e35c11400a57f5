"""Cooperative alternating training of discriminator, generator and classifier."""

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import core
from .errors import InvalidConfigError, InvalidInputError
from .losses import LossWeights, classifier_loss, discriminator_loss, generator_loss
from .networks import (ArchitectureConfig, generator_forward, init_model, predict_proba,
                       sample_latent, save_checkpoint)
from .optim import DEFAULT_LR, Adam

log = logging.getLogger(__name__)

SCENARIOS = ("baseline", "exclusion", "flattening", "full")


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 500
    batch_size: int = 64
    lr: float = DEFAULT_LR
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    latent_dim: int = 64
    architecture: ArchitectureConfig = None
    enable_flattening: bool = True
    enable_exclusion: bool = True
    enable_synthesizer: bool = True
    non_saturating: bool = False
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.rounds < 1:
            raise InvalidConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.batch_size < 1:
            raise InvalidConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise InvalidConfigError(f"learning rate must be positive, got {self.lr}")
        if not self.enable_synthesizer:
            object.__setattr__(self, "enable_flattening", False)
            object.__setattr__(self, "enable_exclusion", False)

    @classmethod
    def scenario(cls, name, **kw):
        """One of the four ablation settings: baseline, exclusion, flattening, full."""
        switches = {
            "baseline": dict(enable_synthesizer=False),
            "exclusion": dict(enable_flattening=False),
            "flattening": dict(enable_exclusion=False),
            "full": {},
        }
        if name not in switches:
            raise InvalidConfigError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
        return cls(**{**switches[name], **kw})

    @property
    def effective_weights(self):
        return LossWeights(beta=self.weights.beta if self.enable_flattening else 0.0,
                           gamma=self.weights.gamma if self.enable_exclusion else 0.0)

    def resolve_architecture(self, feature_dim):
        arch = self.architecture or ArchitectureConfig(input_shape=(feature_dim,),
                                                       latent_dim=self.latent_dim)
        if arch.feature_dim != feature_dim:
            raise InvalidConfigError(
                f"architecture expects {arch.feature_dim} features, data has {feature_dim}")
        return arch

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["weights"] = {"beta": self.weights.beta, "gamma": self.weights.gamma}
        d["architecture"] = self.architecture.to_dict() if self.architecture else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if isinstance(d.get("architecture"), dict):
            d["architecture"] = ArchitectureConfig.from_dict(d["architecture"])
        return cls(**d)


class GHotMask:
    """Union of the one-hot vectors of the families present in a batch."""

    def __init__(self, bits):
        self.bits = np.asarray(bits, dtype=np.float32)

    @property
    def g(self):
        return int(self.bits.sum())

    def __array__(self, dtype=None, copy=None):
        return self.bits if dtype is None else self.bits.astype(dtype)

    def __repr__(self):
        return f"GHotMask({self.bits.astype(int).tolist()}, g={self.g})"


def build_ghot(batch_labels, k):
    labels = np.asarray(batch_labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidInputError(f"label outside [0, {k})")
    bits = np.zeros(k, dtype=np.float32)
    bits[labels] = 1
    return GHotMask(bits)


@dataclass
class RoundRecord:
    round: int
    loss_d: float
    loss_g: float
    loss_p: float
    test_acc: float
    seconds: float


class TrainTrace(list):
    """One :class:`RoundRecord` per completed round."""

    COLUMNS = ("round", "loss_d", "loss_g", "loss_p", "test_acc", "seconds")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self:
                w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in self.COLUMNS])

    @classmethod
    def from_csv(cls, path):
        trace = cls()
        with open(path, newline="") as fh:
            lines = (line for line in fh if not line.startswith("#"))
            for row in csv.DictReader(lines):
                vals = {c: (None if row[c] == "" else float(row[c])) for c in cls.COLUMNS}
                vals["round"] = int(vals["round"])
                trace.append(RoundRecord(**vals))
        return trace


# ---------------------------------------------------------------------------
# single updates

def _update(net, opt, loss_fn):
    leaves = net.leaves()
    with core.Tape() as tape:
        loss = loss_fn(leaves)
    grads = core.backward(tape, loss, [leaves[n] for n in net.names()])
    opt.step(net.arrays(), grads)
    return loss.item()


def discriminator_step(model, opt, real, z):
    fake = generator_forward(model.generator, z).data
    return _update(model.discriminator, opt,
                   lambda p: discriminator_loss(model.discriminator, real, fake, p))


def generator_step(model, opt, z, config):
    return _update(model.generator, opt,
                   lambda p: generator_loss(model.generator, model.discriminator, model.classifier,
                                            z, config.effective_weights, p,
                                            non_saturating=config.non_saturating))


def classifier_step(model, opt, real_x, real_y, z, config):
    weights = config.effective_weights
    fake = mask = None
    if config.enable_synthesizer:
        fake = generator_forward(model.generator, z).data
        mask = build_ghot(real_y, model.k)
    return _update(model.classifier, opt,
                   lambda p: classifier_loss(model.classifier, real_x, real_y, fake, mask, weights, p))


@dataclass
class Optimizers:
    classifier: Adam
    generator: Adam
    discriminator: Adam

    @classmethod
    def for_model(cls, model, lr):
        return cls(Adam(model.classifier.arrays(), lr), Adam(model.generator.arrays(), lr),
                   Adam(model.discriminator.arrays(), lr))


def train_round(model, opts, x, y, config, rng):
    """One full pass over ``(x, y)`` with a D, G and P update per mini-batch.

    Returns the mean losses of the round as ``(loss_d, loss_g, loss_p)``;
    the first two are ``None`` when the synthesizer is disabled.
    """
    n = len(x)
    if n == 0:
        raise InvalidInputError("empty training set")
    order = rng.permutation(n)
    zdim = model.generator.arch.in_dim
    ld, lg, lp = [], [], []
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        bx, by = x[idx], y[idx]
        b = len(idx)
        if config.enable_synthesizer:
            ld.append(discriminator_step(model, opts.discriminator, bx, sample_latent(b, zdim, rng)))
            lg.append(generator_step(model, opts.generator, sample_latent(b, zdim, rng), config))
            z = sample_latent(b, zdim, rng)
        else:
            z = None
        lp.append(classifier_step(model, opts.classifier, bx, by, z, config))
    mean = lambda v: float(np.mean(v)) if v else None  # noqa: E731
    return mean(ld), mean(lg), mean(lp)


def known_accuracy(model, x, y):
    return float(np.mean(predict_proba(model.classifier, x).argmax(axis=1) == y))


def cooperative_train(x, y, config, k=None, eval_data=None, checkpoint_dir=None,
                      checkpoint_extras=None, checkpoint_meta=None, model=None):
    """Run ``config.rounds`` rounds of alternating updates.

    ``x`` holds normalized known-family features and ``y`` their family
    indices in ``[0, k)``.  ``eval_data`` is an optional ``(x, y)`` pair
    scored after every round for the trace.  Returns ``(model, trace)``.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise InvalidInputError("empty training set")
    if len(x) != len(y):
        raise InvalidInputError("features and labels differ in length")
    k = int(y.max()) + 1 if k is None else k
    if y.min() < 0 or y.max() >= k:
        raise InvalidInputError("training labels must be known-family indices in [0, k)")
    arch = config.resolve_architecture(x.shape[1])
    if model is None:
        model = init_model(arch, k, config.seed)
    opts = Optimizers.for_model(model, config.lr)
    rng = np.random.default_rng(config.seed)
    trace = TrainTrace()
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    for r in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        ld, lg, lp = train_round(model, opts, x, y, config, rng)
        for name, v in (("loss_d", ld), ("loss_g", lg), ("loss_p", lp)):
            if v is not None and not math.isfinite(v):
                raise FloatingPointError(f"{name} became non-finite in round {r}")
        acc = known_accuracy(model, *eval_data) if eval_data is not None else None
        trace.append(RoundRecord(r, ld, lg, lp, acc, time.perf_counter() - t0))
        log.debug("round %d: L_D=%s L_G=%s L_P=%.4f acc=%s", r, ld, lg, lp, acc)
        if checkpoint_dir and config.checkpoint_every and r % config.checkpoint_every == 0:
            save_checkpoint(os.path.join(checkpoint_dir, f"round_{r:04d}.cnsn"), model,
                            checkpoint_extras, {**(checkpoint_meta or {}), "round": r})
    return model, trace


__all__ = ["TrainConfig", "GHotMask", "build_ghot", "RoundRecord", "TrainTrace",
           "train_round", "cooperative_train", "discriminator_step", "generator_step",
           "classifier_step", "Optimizers", "known_accuracy", "SCENARIOS"]
