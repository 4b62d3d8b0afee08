"""Bias-corrected Adam without weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Tensor


class Adam:
    """Standard Adam over a named parameter dict.

    Moments live at the parameter dtype so updates are bit-reproducible.
    A non-finite gradient aborts the step before any state is touched.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        for name, g in grads.items():
            p = self.params[name]
            if g.shape != p.data.shape:
                raise ValueError(
                    f"grad shape {g.shape} does not match param '{name}' shape {p.data.shape}"
                )
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for '{name}'; step aborted")
        self.step_count += 1
        t = self.step_count
        alpha = self.lr if lr is None else float(lr)
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            p = self.params[name]
            dt = p.data.dtype.type
            m = self.m[name]
            v = self.v[name]
            m *= dt(self.beta1)
            m += dt(1.0 - self.beta1) * g
            v *= dt(self.beta2)
            v += dt(1.0 - self.beta2) * (g * g)
            m_hat = m / dt(c1)
            v_hat = v / dt(c2)
            p.data -= dt(alpha) * m_hat / (np.sqrt(v_hat) + dt(self.eps))

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, sd: dict) -> None:
        self.step_count = int(sd["step_count"])
        self.lr = float(sd["lr"])
        self.beta1 = float(sd["beta1"])
        self.beta2 = float(sd["beta2"])
        self.eps = float(sd["eps"])
        for k in self.m:
            self.m[k][...] = sd["m"][k]
            self.v[k][...] = sd["v"][k]
