"""Losses, zero-embedding masking, target construction, and the two-stage
optimization driver.

Stage 1 trains the backbone and denoising head jointly (linear warmup then
cosine decay); stage 2 freezes the backbone partition bit-exactly and trains
the head alone at a constant learning rate. Early stopping tracks free-running
token error rate on held-out utterances.

All per-step randomness is drawn from substreams keyed by the step index, so
pausing and resuming at any step reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import Corpus, Utterance
from .diffusion import NoiseSchedule, build_cosine_schedule, forward_noise, respace
from .evaluation import GenSettings, evaluate
from .model import (
    BackboneConfig,
    ModelParams,
    Prompt,
    backbone_forward,
    condition_project,
    diffusion_head_forward,
    layout_sequence,
    lm_head,
)
from .numerics import (
    Adam,
    NonFiniteError,
    Rng,
    Tape,
    Tensor,
    add,
    cross_entropy,
    mean_all,
    mul,
    pad_rows,
    reshape,
    stack,
    sub,
    take_rows,
    tensor,
)

IGNORE = -1


@dataclass(frozen=True)
class MaskPlan:
    p_mask: float
    v: np.ndarray        # (N,) 0/1; 0 = replaced by the zero embedding
    stream_id: int


def apply_zero_mask(frames: np.ndarray, p_mask: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame Bernoulli(1-p_mask) keep mask; dropped frames become the
    zero vector. Backbone inputs only; denoising targets stay clean."""
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError(f"p_mask {p_mask} outside [0, 1]")
    frames = np.asarray(frames, dtype=np.float64)
    v = rng.bernoulli(1.0 - p_mask, len(frames))
    return frames * v[:, None], v


def lm_targets(M: int, N: int, vocab) -> np.ndarray:
    """Per-position LM target ids with IGNORE elsewhere.

    The last text position targets <speech_bos>; frame positions target
    <cont_speech_gen> except the last frame, which targets <eos>. The bos
    position itself is unsupervised (its successor is a continuous frame).
    """
    out = np.full(M + N + 2, IGNORE, dtype=np.int64)
    out[M] = vocab.bos
    for i in range(1, N + 1):
        out[M + 1 + i] = vocab.cont if i < N else vocab.eos
    return out


@dataclass(frozen=True)
class TrainTargets:
    lm: np.ndarray       # (L,) token id or IGNORE, per position
    x0: np.ndarray       # (N, d) clean frames
    t: np.ndarray        # (N,) per-frame timestep
    eps: np.ndarray      # (N, d) per-frame noise


def diffusion_loss(params: ModelParams, x_t: np.ndarray, t: np.ndarray,
                   eps: np.ndarray, z: Tensor) -> Tensor:
    """MSE between true and predicted noise, over frames and dimensions."""
    if len(x_t) == 0:
        raise ValueError("diffusion_loss requires at least one frame")
    e_hat = diffusion_head_forward(params, x_t, t, z)
    d = sub(e_hat, tensor(eps))
    return mean_all(mul(d, d))


def lm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Cross-entropy over supervised positions (IGNORE rows pre-filtered)."""
    if (targets == IGNORE).any():
        raise ValueError("lm_loss expects pre-filtered targets")
    return cross_entropy(logits, targets)


@dataclass
class BatchLoss:
    total: Tensor
    lm: float
    diff: float
    mask_plans: list[MaskPlan]


def joint_loss(params: ModelParams, utts: list[Utterance], p_mask: float,
               schedule: NoiseSchedule, rng: Rng, p_uncond: float = 0.0) -> BatchLoss:
    """L = L_LM + L_diff over a padded batch of utterances.

    Masking hits backbone inputs only; pad positions join neither loss.
    """
    cfg = params.config
    vocab = cfg.tokens
    embs = []
    lays = []
    plans = []
    for b, utt in enumerate(utts):
        mask_rng = rng.stream(("mask", b))
        _, v = apply_zero_mask(utt.frames, p_mask, mask_rng)
        plans.append(MaskPlan(p_mask=p_mask, v=v, stream_id=mask_rng.sid))
        emb, lay = layout_sequence(Prompt(speaker=utt.speaker, text=utt.phonemes),
                                   utt.frames, params, masked=v)
        embs.append(emb)
        lays.append(lay)
    Lmax = max(l.length for l in lays)
    batch = stack([pad_rows(e, Lmax) if e.shape[0] < Lmax else e for e in embs])
    h = backbone_forward(params, batch)
    h_flat = reshape(h, (len(utts) * Lmax, cfg.width))

    lm_pos, lm_tgt, cond_pos, x0 = [], [], [], []
    for b, (utt, lay) in enumerate(zip(utts, lays)):
        tgt = lm_targets(lay.M, lay.N, vocab)
        sup = np.nonzero(tgt != IGNORE)[0]
        lm_pos.append(b * Lmax + sup)
        lm_tgt.append(tgt[sup])
        cond_pos.append(b * Lmax + lay.cond_positions())
        x0.append(utt.frames)
    lm_pos = np.concatenate(lm_pos)
    lm_tgt = np.concatenate(lm_tgt)
    cond_pos = np.concatenate(cond_pos)
    x0 = np.concatenate(x0, axis=0)

    logits = lm_head(params, take_rows(h_flat, lm_pos))
    l_lm = lm_loss(logits, lm_tgt)

    z = condition_project(params, take_rows(h_flat, cond_pos))
    if p_uncond > 0.0:
        drop = rng.stream("uncond").bernoulli(p_uncond, len(x0)).astype(np.float64)
        keep = tensor(np.broadcast_to(1.0 - drop[:, None], (len(x0), cfg.cond_dim)).copy())
        null_rows = take_rows(reshape(params.tensors["head.z_null"], (1, cfg.cond_dim)),
                              np.zeros(len(x0), dtype=np.int64))
        z = add(mul(z, keep), mul(null_rows, tensor(np.broadcast_to(drop[:, None], (len(x0), cfg.cond_dim)).copy())))

    t = rng.stream("t").uniform_int(1, schedule.T + 1, len(x0))
    eps = rng.stream("eps").normal((len(x0), cfg.frame_dim))
    x_t = forward_noise(x0, t, eps, schedule)
    l_diff = diffusion_loss(params, x_t, t, eps, z)

    total = add(l_lm, l_diff)
    return BatchLoss(total=total, lm=l_lm.item(), diff=l_diff.item(), mask_plans=plans)


@dataclass(frozen=True)
class StageConfig:
    stage: int = 1
    steps: int = 20_000
    batch_size: int = 8
    p_mask: float = 0.3
    p_uncond: float = 0.0
    lr_start: float = 3e-5
    lr_peak: float = 3e-4
    lr_warmup: int = 500
    lr_const: float = 2e-4       # stage 2 only
    eval_every: int = 500
    patience: int = 6            # evaluations without improvement before stopping
    schedule_T: int = 1000
    eval_steps: int = 100        # respaced denoising steps for validation
    eval_settings: GenSettings = field(default_factory=GenSettings)
    val_cap: int = 0             # 0 = use the whole validation set

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size, eval_every must be >= 1")


def learning_rate(cfg: StageConfig, step: int) -> float:
    """Stage 1: linear warmup then cosine decay to zero; stage 2: constant."""
    if cfg.stage == 2:
        return cfg.lr_const
    if step < cfg.lr_warmup:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step / max(cfg.lr_warmup, 1)
    span = max(cfg.steps - cfg.lr_warmup, 1)
    frac = (step - cfg.lr_warmup) / span
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


@dataclass
class EvalRecord:
    step: int
    loss: float
    loss_lm: float
    loss_diff: float
    ter_teacher_forced: float
    ter_free_running: float
    lr: float

    def as_dict(self) -> dict:
        return {"step": self.step, "loss": self.loss, "loss_lm": self.loss_lm,
                "loss_diff": self.loss_diff,
                "ter_teacher_forced": self.ter_teacher_forced,
                "ter_free_running": self.ter_free_running, "lr": self.lr}


@dataclass
class TrainLog:
    evals: list[EvalRecord] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)   # per-step {step, loss, lm, diff}


@dataclass
class TrainResult:
    params: ModelParams          # parameters at the best validation point
    final_params: ModelParams    # parameters at the last executed step
    adam: Adam
    step: int
    best_step: int
    best_metric: float
    log: TrainLog
    status: str                  # completed | early_stopped | diverged


def _snapshot(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.tensors.items()}


def _restore(params: ModelParams, snap: dict[str, np.ndarray]) -> ModelParams:
    tensors = {k: Tensor(v.copy(), requires_grad=params.tensors[k].requires_grad)
               for k, v in snap.items()}
    return ModelParams(config=params.config, tensors=tensors,
                       theta_trainable=params.theta_trainable,
                       phi_trainable=params.phi_trainable)


def _validation_ter(params: ModelParams, corpus: Corpus, cfg: StageConfig,
                    schedule, rng: Rng) -> tuple[float, float]:
    """(teacher-forced, free-running) TER with masking disabled."""
    val = corpus.val[: cfg.val_cap] if cfg.val_cap else corpus.val
    chain = respace(schedule, cfg.eval_steps) if cfg.eval_steps < schedule.T else schedule
    report = evaluate(params, corpus.codec, val, chain, cfg.eval_settings,
                      rng, with_drift=False)
    return report.ter_teacher_forced, report.ter_free_running


def train_stage(params: ModelParams, corpus: Corpus, cfg: StageConfig, rng: Rng,
                start_step: int = 0, adam: Adam | None = None,
                log: TrainLog | None = None,
                best_init: tuple[float, int, dict, int] | None = None,
                on_eval=None) -> TrainResult:
    """Shared driver. Stage 2 freezes the backbone partition and verifies the
    freeze by hash at every evaluation point.

    ``best_init`` = (metric, step, tensor snapshot, evals_since_best) lets a
    resumed run continue its early-stopping bookkeeping exactly.
    ``on_eval(step, params, adam, log)`` fires after each evaluation so a
    caller can persist periodic checkpoints; an abort between calls loses at
    most one evaluation interval.
    """
    schedule = _build_schedule(cfg)
    if cfg.stage == 2:
        params.theta_trainable = False
        for name in params.names("theta"):
            params.tensors[name].requires_grad = False
        theta_hash = params.partition_hash("theta")
    trainable = params.trainable_names()
    if adam is None:
        adam = Adam({n: params.tensors[n] for n in trainable},
                    lr=cfg.lr_const if cfg.stage == 2 else cfg.lr_peak)
    log = log or TrainLog()

    if best_init is not None:
        best_metric, best_step, best_snap, evals_since_best = best_init
        best_snap = {k: v.copy() for k, v in best_snap.items()}
    else:
        best_metric = math.inf
        best_step = -1
        best_snap = _snapshot(params)
        evals_since_best = 0
    status = "completed"
    window: list[tuple[float, float, float]] = []
    final_step = start_step

    def run_eval(step: int, lr: float) -> None:
        nonlocal best_metric, best_step, best_snap, evals_since_best
        if cfg.stage == 2 and params.partition_hash("theta") != theta_hash:
            raise RuntimeError("frozen backbone partition changed during stage 2")
        ter_tf, ter_fr = _validation_ter(params, corpus, cfg, schedule, rng.stream("val"))
        mean = [float(np.mean([w[i] for w in window])) if window else float("nan")
                for i in range(3)]
        log.evals.append(EvalRecord(step=step, loss=mean[0], loss_lm=mean[1],
                                    loss_diff=mean[2], ter_teacher_forced=ter_tf,
                                    ter_free_running=ter_fr, lr=lr))
        window.clear()
        if ter_fr < best_metric:
            best_metric = ter_fr
            best_step = step
            best_snap = _snapshot(params)
            evals_since_best = 0
        else:
            evals_since_best += 1
        if on_eval is not None:
            on_eval(step, params, adam, log)

    # Baseline evaluation before any update so "best" is well defined even
    # if training only hurts (stage 2 must never return worse than its init).
    if start_step == 0:
        run_eval(0, learning_rate(cfg, 0))

    try:
        for step in range(start_step, cfg.steps):
            lr = learning_rate(cfg, step)
            srng = rng.stream(("step", step))
            idx = srng.stream("batch").uniform_int(0, len(corpus.train), cfg.batch_size)
            utts = [corpus.train[int(k)] for k in idx]
            with Tape() as tape:
                batch = joint_loss(params, utts, cfg.p_mask, schedule, srng,
                                   p_uncond=cfg.p_uncond)
            grads_list = tape.gradients(batch.total, [params.tensors[n] for n in trainable])
            grads = dict(zip(trainable, grads_list))
            adam.step(grads, lr=lr)
            final_step = step + 1
            rec = (batch.total.item(), batch.lm, batch.diff)
            window.append(rec)
            log.steps.append({"step": step, "loss": rec[0], "lm": rec[1], "diff": rec[2]})
            if (step + 1) % cfg.eval_every == 0:
                run_eval(step + 1, lr)
                if evals_since_best >= cfg.patience:
                    status = "early_stopped"
                    break
    except NonFiniteError:
        status = "diverged"

    if status != "diverged" and final_step % cfg.eval_every != 0 and window:
        run_eval(final_step, learning_rate(cfg, final_step - 1))

    best_params = _restore(params, best_snap)
    return TrainResult(params=best_params, final_params=params, adam=adam,
                       step=final_step, best_step=best_step, best_metric=best_metric,
                       log=log, status=status)


def _build_schedule(cfg: StageConfig) -> NoiseSchedule:
    return build_cosine_schedule(cfg.schedule_T)


def train_stage1(config: StageConfig, corpus: Corpus, rng: Rng,
                 params: ModelParams | None = None,
                 model_config: BackboneConfig | None = None,
                 on_eval=None) -> TrainResult:
    if config.stage != 1:
        raise ValueError("train_stage1 requires a stage-1 config")
    if params is None:
        from .model import init_params
        params = init_params(model_config or BackboneConfig(), rng.stream("init"))
    return train_stage(params, corpus, config, rng.stream("train"), on_eval=on_eval)


def train_stage2(stage1_params: ModelParams, config: StageConfig, corpus: Corpus,
                 rng: Rng, on_eval=None) -> TrainResult:
    """Freeze the backbone partition of a stage-1 checkpoint and train the
    denoising head alone with a fresh optimizer."""
    if config.stage != 2:
        raise ValueError("train_stage2 requires a stage-2 config")
    params = _restore(stage1_params, _snapshot(stage1_params))
    return train_stage(params, corpus, config, rng.stream("train2"), on_eval=on_eval)
