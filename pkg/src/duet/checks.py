"""Gradient soundness runner.

Builds a miniature model and batch per seed, evaluates the combined
control-token and denoising loss on a fresh tape, and compares every probed
coordinate's reverse-mode gradient against central finite differences. Runs
at float64; the relative-error ceiling is far below anything float32
round-off could satisfy by accident.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .codec import Utterance
from .diffusion import build_cosine_schedule
from .model import BackboneConfig, init_params
from .numerics import Rng, get_default_dtype, grad_check, set_default_dtype
from .training import joint_loss

TOLERANCE = 1e-4
COORDS_PER_LEAF = 2


@dataclass(frozen=True)
class GradCheckReport:
    n_cases: int
    max_error: float
    tolerance: float
    per_case: list[float]
    elapsed_s: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _tiny_case(seed: int) -> tuple[BackboneConfig, list[Utterance], Rng]:
    r = Rng(seed).stream("case")
    dims = r.stream("dims").uniform_int(1, 3, 6)
    heads = int(dims[0])
    cfg = BackboneConfig(
        width=8 * heads, layers=int(dims[1]), heads=heads,
        frame_dim=int(2 + dims[2]), speaker_dim=4, cond_dim=8,
        max_len=32, vocab=int(3 + 2 * dims[3]),
        head_layers=int(dims[4]), head_width=8,
    )
    utts = []
    for b in range(2):
        ur = r.stream(("utt", b))
        m = int(ur.stream("m").uniform_int(1, 4, 1)[0])
        n = int(ur.stream("n").uniform_int(1, 5, 1)[0])
        utts.append(Utterance(
            uid=b,
            phonemes=ur.stream("ph").uniform_int(0, cfg.vocab, m),
            speaker_id=b,
            speaker=ur.stream("spk").normal((cfg.speaker_dim,)),
            frames=ur.stream("fr").normal((n, cfg.frame_dim)),
        ))
    return cfg, utts, r


def run_grad_check(n_cases: int = 20, seed0: int = 100,
                   coords_per_leaf: int = COORDS_PER_LEAF) -> GradCheckReport:
    """Finite-difference check of the full training loss graph; one model,
    batch, and coordinate sample per case seed."""
    prev = get_default_dtype()
    set_default_dtype("float64")
    t0 = time.time()
    try:
        schedule = build_cosine_schedule(50)
        errors = []
        for k in range(n_cases):
            seed = seed0 + k
            cfg, utts, r = _tiny_case(seed)
            params = init_params(cfg, Rng(seed).stream("params"))
            p_mask = [0.0, 0.3, 0.5][k % 3]
            p_uncond = 0.4 if k % 2 else 0.0  # exercises the null-condition path
            loss_rng = Rng(seed).stream("loss")

            def fn(leaves, _utts=utts, _p=p_mask, _r=loss_rng, _pu=p_uncond):
                return joint_loss(params, _utts, _p, schedule, _r, p_uncond=_pu).total

            # Extrapolated differences leave roundoff (loss noise / 2h) as
            # the only FD error, so the base step can sit safely above it.
            err = grad_check(fn, params.tensors, fd_step=2e-4,
                             coord_limit=coords_per_leaf, rng=r.stream("coords"),
                             rtol=TOLERANCE, atol=3e-10)
            errors.append(float(err))
    finally:
        set_default_dtype(prev)
    return GradCheckReport(n_cases=n_cases, max_error=max(errors),
                           tolerance=TOLERANCE, per_case=errors,
                           elapsed_s=time.time() - t0)
