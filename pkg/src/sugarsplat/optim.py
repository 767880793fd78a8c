"""Adam with named parameter groups, per-group learning rates and remapping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import IndexRemap


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, param):
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), 0)


def adam_step(param, grad, state: AdamState | None, lr, beta1=0.9, beta2=0.999, eps=1e-15):
    """One bias-corrected Adam update. Returns ``(new_param, new_state)``; inputs are not modified."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    state = state or AdamState.zeros_like(param)
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, step)


class Adam:
    """Adam over a dict of arrays updated in place.

    ``lrs`` maps parameter name to base learning rate; names absent from it
    are frozen.
    """

    def __init__(self, lrs: dict, beta1=0.9, beta2=0.999, eps=1e-15):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, AdamState] = {}

    def step(self, params: dict, grads: dict, lr_scale: dict | None = None):
        lr_scale = lr_scale or {}
        for name, lr in self.lrs.items():
            if name not in params or lr == 0:
                continue
            new, self.state[name] = adam_step(params[name], grads[name], self.state.get(name),
                                              lr * lr_scale.get(name, 1.0), self.beta1, self.beta2, self.eps)
            params[name][...] = new

    def remap(self, remap: IndexRemap, names=None):
        """Carry per-row moments across a densify/prune; split children start fresh."""
        if remap.is_identity:
            return
        for name in names or list(self.state):
            st = self.state.get(name)
            if st is None:
                continue
            m = st.m[remap.source]
            v = st.v[remap.source]
            m[remap.split_children] = 0.0
            v[remap.split_children] = 0.0
            self.state[name] = AdamState(m, v, st.step)


def exponential_decay(step, total, factor):
    """Multiplier that decays from 1 to ``factor`` log-linearly over ``total`` steps."""
    if total <= 0:
        return 1.0
    return float(factor ** (min(max(step, 0), total) / total))
