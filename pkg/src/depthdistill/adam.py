"""Adam with bias correction, operating on named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One update over (name, Tensor) pairs; mutates parameter data in place.

    Parameters whose grad is None are skipped (e.g. projections unused under
    an ablation); zero gradients leave values unchanged while still advancing
    the step counter.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(np.sum(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        # scratch-buffer form of the textbook update; rounding order is
        # unchanged so results are bit-identical to the naive expressions
        tmp = np.empty_like(g)
        m *= beta1
        np.multiply(g, 1.0 - beta1, out=tmp)
        m += tmp
        v *= beta2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - beta2
        v += tmp
        np.divide(v, bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        upd = np.divide(m, bc1)
        upd *= lr
        upd /= tmp
        p.data -= upd
