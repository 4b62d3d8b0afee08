"""Autoregressive generation: the LM head gates continuation at each step
while the denoising head produces the next frame from the condition at the
last position. Stopping is controlled by one of three criteria; oracle
criteria override the LM decision but the LM trace is still recorded.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .diffusion import sample_frame
from .model import (
    ModelParams,
    Prompt,
    backbone_forward,
    condition_project,
    layout_sequence,
    lm_head,
    make_denoiser,
    null_condition,
)
from .numerics import Rng, take_rows


@dataclass(frozen=True)
class EosToken:
    """Stop when the LM head's control argmax is <eos>."""


@dataclass(frozen=True)
class OracleDuration:
    """Generate exactly n frames; the LM is consulted but not authoritative."""

    n: int


@dataclass(frozen=True)
class OracleEndpoint:
    """Stop at the reference utterance's frame count."""

    reference_frames: int


StoppingCriterion = EosToken | OracleDuration | OracleEndpoint


@dataclass
class FrameDiagnostic:
    lm_margin: float      # top control logit minus runner-up at the gating position
    denoise_steps: int


@dataclass
class GenerationResult:
    frames: np.ndarray          # (N, d)
    control_trace: list[int]    # LM argmax per step, including the collapsed first step
    stop_reason: str            # "eos" | "max_frames" | "oracle"
    diagnostics: list[FrameDiagnostic]
    error: str | None = None


def _control_argmax(logits: np.ndarray, vocab) -> tuple[int, float]:
    """Argmax restricted to the control tokens, with the margin to runner-up."""
    allowed = np.array([vocab.bos, vocab.cont, vocab.eos])
    vals = logits[allowed]
    order = np.argsort(vals)[::-1]
    margin = float(vals[order[0]] - vals[order[1]])
    return int(allowed[order[0]]), margin


def generate(prompt: Prompt, params: ModelParams, schedule, criterion: StoppingCriterion,
             max_frames: int, temperature: float, guidance: float, rng: Rng) -> GenerationResult:
    """One utterance. Frame i's denoising chain draws from the substream
    keyed by ("frame", i), so raising max_frames only appends frames and the
    stopping criterion never shifts any earlier draw.
    """
    if max_frames < 1:
        raise ValueError(f"max_frames must be >= 1, got {max_frames}")
    cfg = params.config
    vocab = cfg.tokens
    # A sequence holds at most max_len positions; stop before the layout overflows.
    max_frames = min(max_frames, cfg.max_len - len(prompt.text) - 2)
    if max_frames < 1:
        raise ValueError("prompt leaves no room for frames within max_len")
    denoiser = make_denoiser(params)
    z_null = null_condition(params).data if guidance != 1.0 else None

    frames: list[np.ndarray] = []
    trace: list[int] = []
    diags: list[FrameDiagnostic] = []
    stop_reason = "max_frames"
    oracle_n = None
    if isinstance(criterion, OracleDuration):
        oracle_n = criterion.n
    elif isinstance(criterion, OracleEndpoint):
        oracle_n = criterion.reference_frames

    for i in range(1, max_frames + 1):
        stacked = np.stack(frames) if frames else np.zeros((0, cfg.frame_dim))
        emb, lay = layout_sequence(prompt, stacked, params)
        h = backbone_forward(params, emb)
        last = lay.length - 1
        h_last = take_rows(h, np.array([last]))
        logits = lm_head(params, h_last).data[0]
        token, margin = _control_argmax(logits, vocab)
        trace.append(token)

        if oracle_n is not None:
            if len(frames) >= oracle_n:
                stop_reason = "oracle"
                break
        elif i > 1 and token == vocab.eos:
            # The first step is the collapsed <speech_bos> entry into the
            # speech phase: at least one frame is always generated.
            stop_reason = "eos"
            break

        z = condition_project(params, h_last).data
        try:
            frame = sample_frame(denoiser, z, schedule, temperature,
                                 rng.stream(("frame", i)), (1, cfg.frame_dim),
                                 guidance=guidance, z_null=z_null)
        except FloatingPointError as e:
            raise RuntimeError(f"non-finite frame at position {i}: {e}") from e
        frames.append(frame[0])
        diags.append(FrameDiagnostic(lm_margin=margin, denoise_steps=len(schedule.timesteps)))
        if oracle_n is not None and len(frames) >= oracle_n:
            stop_reason = "oracle"
            break

    out = np.stack(frames) if frames else np.zeros((0, cfg.frame_dim))
    return GenerationResult(frames=out, control_trace=trace,
                            stop_reason=stop_reason, diagnostics=diags)


def generate_batch(prompts: list[Prompt], params: ModelParams, schedule,
                   criteria: list[StoppingCriterion] | StoppingCriterion,
                   max_frames: int, temperature: float, guidance: float,
                   rng: Rng, ids: list[int] | None = None,
                   workers: int = 1) -> list[GenerationResult]:
    """Independent per-prompt generation. Substreams are keyed by prompt id,
    so permuting the prompt list permutes the results bit-identically, and
    the worker count never changes any output."""
    if ids is None:
        ids = list(range(len(prompts)))
    if len(ids) != len(prompts):
        raise ValueError("ids and prompts length mismatch")
    if not isinstance(criteria, list):
        criteria = [criteria] * len(prompts)
    if len(criteria) != len(prompts):
        raise ValueError("criteria and prompts length mismatch")

    def run_one(k: int) -> GenerationResult:
        try:
            return generate(prompts[k], params, schedule, criteria[k], max_frames,
                            temperature, guidance, rng.stream(("prompt", ids[k])))
        except Exception as e:
            return GenerationResult(frames=np.zeros((0, params.config.frame_dim)),
                                    control_trace=[], stop_reason="error",
                                    diagnostics=[], error=str(e))

    if workers <= 1:
        return [run_one(k) for k in range(len(prompts))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, range(len(prompts))))
