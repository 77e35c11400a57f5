"""Adam with bias correction, operating in place on numpy parameter arrays."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

DEFAULT_LR = 2e-4


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **hyper):
        params = list(params)
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params, grads, state, lr=DEFAULT_LR):
    """Apply one Adam update to ``params`` in place and advance ``state``.

    ``params`` and ``grads`` are parallel sequences of arrays whose shapes
    must match the accumulators held by ``state``.
    """
    params, grads = list(params), list(grads)
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractViolation("parameter, gradient and state counts differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractViolation(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    step_size = lr / corr1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        # lr * m_hat / (sqrt(v_hat) + eps)
        denom = np.sqrt(v / corr2)
        denom += state.eps
        p -= (step_size * m / denom).astype(p.dtype, copy=False)
    return params, state


class Adam:
    """Stateful wrapper binding an :class:`AdamState` to a learning rate."""

    def __init__(self, params, lr=DEFAULT_LR, **hyper):
        self.lr = lr
        self.state = AdamState.for_params(params, **hyper)

    def step(self, params, grads):
        adam_step(params, grads, self.state, self.lr)
