"""Adaptive-moment (Adam) updates over named parameter arrays."""
from __future__ import annotations

import numpy as np


class Adam:
    """Bias-corrected Adam producing parameter deltas.

    ``lr`` maps each parameter name to a scalar or an array broadcastable to
    the parameter.  :meth:`step` returns the deltas to *add*; applying them
    is up to the caller (additive for map arrays, retraction for poses).
    """

    def __init__(self, lr: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = {k: np.asarray(v, dtype=float) for k, v in lr.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, grads: dict, scale: float = 1.0) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for name, g in grads.items():
            g = np.asarray(g, dtype=float)
            m = self._m.get(name)
            if m is None or m.shape != g.shape:
                m = np.zeros_like(g)
                self._v[name] = np.zeros_like(g)
            v = self._v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            out[name] = -scale * self.lr[name] * m_hat / (np.sqrt(v_hat) + self.eps)
        return out
