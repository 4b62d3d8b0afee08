"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .rng import Rng
from .tensor import Tape, Tensor


def grad_check(fn, leaves: dict[str, Tensor], fd_step: float = 1e-5,
               coord_limit: int | None = None, rng: Rng | None = None,
               rtol: float = 1e-4, atol: float = 1e-10) -> float:
    """Max normalized error between tape gradients and central differences.

    ``fn(leaves) -> scalar Tensor`` must be re-invocable; it is called once
    on the tape and twice per probed coordinate. With ``coord_limit`` set,
    at most that many coordinates per leaf are probed (chosen by ``rng``),
    otherwise every coordinate is.

    Returns max |analytic - fd| / (|analytic| + |fd| + atol/rtol), so a
    result <= rtol is exactly the combined test
    |analytic - fd| <= rtol * (|analytic| + |fd|) + atol. The absolute term
    matters only for near-zero coordinates, where a central difference of an
    O(1) loss is roundoff-limited to ~1e-11 absolute accuracy and a pure
    relative comparison would measure that noise instead of the adjoint.

    Each difference is Richardson-extrapolated from steps fd_step and
    fd_step/2, cancelling the quadratic truncation term; steep-curvature
    coordinates would otherwise force a smaller step than roundoff allows.
    """
    for t in leaves.values():
        t.grad = None  # stale grads from earlier tapes would poison the comparison
    with Tape() as tape:
        loss = fn(leaves)
    tape.backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in leaves.items()}

    floor = atol / rtol
    max_err = 0.0
    for name, t in leaves.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if coord_limit is not None and n > coord_limit:
            if rng is None:
                raise ValueError("coord_limit requires an rng to pick coordinates")
            coords = rng.stream(("gradcheck", name)).permutation(n)[:coord_limit]
        else:
            coords = range(n)
        ga = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]

            def probe(delta: float) -> float:
                flat[i] = orig + delta
                try:
                    return fn(leaves).item()
                finally:
                    flat[i] = orig

            d1 = (probe(fd_step) - probe(-fd_step)) / (2.0 * fd_step)
            d2 = (probe(fd_step / 2.0) - probe(-fd_step / 2.0)) / fd_step
            fd = (4.0 * d2 - d1) / 3.0
            err = abs(float(ga[i]) - fd) / (abs(float(ga[i])) + abs(fd) + floor)
            if err > max_err:
                max_err = err
    return max_err
