"""Per-group adaptive moment optimizer (first/second-moment, bias-corrected).

Hand-rolled so the update is bit-reproducible and the per-point state can
be remapped in lockstep with densification (children start with zero
moments, like freshly added points in the reference splatting trainers).
"""

import numpy as np


class AdaptiveOptimizer:
    def __init__(self, learning_rates: dict, betas=(0.9, 0.99), eps=1e-8):
        self.lrs = dict(learning_rates)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {name: 0 for name in self.lrs}

    def step(self, params: dict, grads: dict):
        """In-place update of every param present in grads."""
        for name, g in grads.items():
            if g is None:
                continue
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p -= self.lrs[name] * m_hat / (np.sqrt(v_hat) + self.eps)

    def remap_points(self, names, keep_mask, n_added):
        """After densification: drop pruned rows, zero-init new ones."""
        for name in names:
            if name not in self.m:
                continue
            for store in (self.m, self.v):
                old = store[name]
                pad = np.zeros((n_added,) + old.shape[1:], dtype=old.dtype)
                store[name] = np.concatenate([old[keep_mask], pad])
