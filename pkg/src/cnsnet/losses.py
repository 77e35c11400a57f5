"""Discriminator, generator and classifier objectives.

All three return scalar :class:`~cnsnet.core.Tensor` values suitable for
:func:`~cnsnet.core.backward`.  Which parameter set receives gradients is
decided by the caller: pass gradient-requiring leaves for the network being
updated and leave the other networks on their stored (constant) arrays.
"""

from dataclasses import dataclass

import numpy as np

from . import core
from .errors import InvalidConfigError, InvalidInputError
from .networks import classifier_forward, discriminator_forward, generator_forward


@dataclass(frozen=True)
class LossWeights:
    beta: float = 1.0   # flattening (KL to uniform) weight
    gamma: float = 1.0  # known-family exclusion weight

    def __post_init__(self):
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidConfigError(f"{name} must be finite and non-negative, got {v}")


def discriminator_loss(disc, real, fake, d_params=None):
    """``-mean[log D(x) + log(1 - D(x'))]``; minimising it trains D to separate real from fake."""
    real, fake = core.value(real), core.value(fake)
    if len(real) != len(fake) or len(real) < 1:
        raise InvalidInputError(f"real/fake batch sizes differ: {len(real)} vs {len(fake)}")
    d_real = discriminator_forward(disc, real, d_params)
    d_fake = discriminator_forward(disc, fake, d_params)
    per = core.add(core.log(d_real), core.log(core.sub(1.0, d_fake)))
    return core.neg(core.mean(per))


def generator_loss(gen, disc, clf, z, weights=LossWeights(), g_params=None,
                   non_saturating=False):
    """Adversarial term plus ``beta``-weighted KL(U || P(.|G(z))).

    The adversarial term is ``mean log(1 - D(G(z)))`` unless
    ``non_saturating`` selects ``-mean log D(G(z))``.  D and the classifier
    are evaluated on their stored arrays, so no gradient reaches them.
    """
    fake = generator_forward(gen, z, g_params)
    d_fake = discriminator_forward(disc, fake)
    if non_saturating:
        adv = core.neg(core.mean(core.log(d_fake)))
    else:
        adv = core.mean(core.log(core.sub(1.0, d_fake)))
    if weights.beta == 0:
        return adv
    probs = core.softmax(classifier_forward(clf, fake))
    flat = core.mean(core.kl_to_uniform(probs))
    return core.add(adv, core.scale(flat, weights.beta))


def classifier_loss(clf, real_x, real_y, fake, mask, weights=LossWeights(), c_params=None):
    """Cross-entropy on real data plus the two rectification terms on ``fake``.

    ``real_y`` holds integer family ids in ``[0, k)``.  ``fake`` is a plain
    array (generator output detached from its graph) or ``None`` to train on
    real data alone.  The exclusion term is ``(gamma / b) * sum_i ||mask * p_i||``.
    """
    k = clf.arch.out_dim
    real_y = np.asarray(real_y)
    if real_y.size and (real_y.min() < 0 or real_y.max() >= k):
        raise InvalidInputError(f"label outside the {k} known families")
    onehot = np.zeros((len(real_y), k), dtype=np.float32)
    onehot[np.arange(len(real_y)), real_y] = 1
    probs = core.softmax(classifier_forward(clf, real_x, c_params))
    loss = core.mean(core.cross_entropy(probs, onehot.astype(probs.dtype)))
    if fake is None or (weights.beta == 0 and weights.gamma == 0):
        return loss
    fake = core.value(fake)
    fake_probs = core.softmax(classifier_forward(clf, fake.astype(core.value(real_x).dtype), c_params))
    if weights.beta:
        loss = core.add(loss, core.scale(core.mean(core.kl_to_uniform(fake_probs)), weights.beta))
    if weights.gamma:
        excl = core.sum(core.masked_l2(fake_probs, mask))
        loss = core.add(loss, core.scale(excl, weights.gamma / len(fake)))
    return loss
