"""Adam optimizer over named parameter dictionaries."""
from __future__ import annotations

import numpy as np


class Adam:
    """Bias-corrected Adam (Kingma & Ba defaults).

    ``params`` maps names to the arrays being optimized; updates happen
    in place so layers keep referencing the same buffers. First and
    second moment estimates live per name and start at zero.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= beta1 < 1 or not 0 <= beta2 < 1:
            raise ValueError("betas must lie in [0, 1)")
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def state(self) -> dict[str, np.ndarray]:
        """Moment estimates and step count, keyed for checkpoint records."""
        out: dict[str, np.ndarray] = {f"m.{k}": v for k, v in self._m.items()}
        out.update({f"v.{k}": v for k, v in self._v.items()})
        out["t"] = np.float64(self.t)
        return out

    def step(self, grads: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(grads)
        if missing:
            raise KeyError(f"missing gradients for {sorted(missing)}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
