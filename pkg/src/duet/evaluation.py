"""Metric suite: token error rate against the oracle decoder, speaker
similarity from recovered speaker directions, frame error, endpoint accuracy,
and per-position drift curves contrasting teacher-forced with free-running
conditioning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .codec import CodecSpec, Utterance, decode, estimate_speaker
from .diffusion import sample_frame
from .inference import (
    EosToken,
    OracleDuration,
    OracleEndpoint,
    StoppingCriterion,
    generate,
)
from .model import (
    ModelParams,
    Prompt,
    backbone_forward,
    condition_project,
    layout_sequence,
    make_denoiser,
)
from .numerics import Rng, take_rows

ENDPOINT_TOLERANCE = 2  # frames; K=4 frames/phoneme makes this sub-phoneme


def token_error_rate(reference: np.ndarray, hypothesis: np.ndarray) -> float:
    """Levenshtein distance over token ids divided by reference length."""
    ref = np.asarray(reference, dtype=np.int64)
    hyp = np.asarray(hypothesis, dtype=np.int64)
    if len(ref) == 0:
        raise ValueError("token_error_rate requires a nonempty reference")
    prev = np.arange(len(hyp) + 1)
    for i, r in enumerate(ref, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        sub_cost = prev[:-1] + (hyp != r)
        for j in range(1, len(hyp) + 1):
            cur[j] = min(cur[j - 1] + 1, prev[j] + 1, sub_cost[j - 1])
        prev = cur
    return float(prev[-1]) / len(ref)


def speaker_similarity(frames: np.ndarray, target: np.ndarray, codec: CodecSpec) -> float:
    """Cosine between the recovered speaker direction and the target; a
    degenerate (zero) estimate reports 0."""
    est = estimate_speaker(frames, codec)
    n = np.linalg.norm(est)
    if n == 0.0:
        return 0.0
    t = np.asarray(target, dtype=np.float64)
    return float(est @ t / (n * np.linalg.norm(t)))


@dataclass(frozen=True)
class GenSettings:
    """Generation knobs shared by evaluation and the CLI.

    max_frames 0 means: derive 4x the longest reference in the evaluated set,
    a guard against unbounded run-on generation.
    """

    temperature: float = 0.9
    guidance: float = 1.0
    max_frames: int = 0
    criterion: str = "eos"  # "eos" | "oracle_endpoint" | "oracle_duration"


def _teacher_forced_frames(params: ModelParams, utt: Utterance, schedule,
                           settings: GenSettings, rng: Rng) -> np.ndarray:
    """Sample every frame from its ground-truth history in one backbone pass.

    Frame i draws from the ("frame", i) substream, matching generate(), so
    position 1 is bit-identical across teacher-forced and free-running modes.
    """
    prompt = Prompt(speaker=utt.speaker, text=utt.phonemes)
    emb, lay = layout_sequence(prompt, utt.frames, params)
    h = backbone_forward(params, emb)
    z_all = condition_project(params, take_rows(h, lay.cond_positions())).data
    denoiser = make_denoiser(params)
    out = np.empty_like(utt.frames)
    for i in range(1, lay.N + 1):
        out[i - 1] = sample_frame(denoiser, z_all[i - 1:i], schedule,
                                  settings.temperature, rng.stream(("frame", i)),
                                  (1, params.config.frame_dim),
                                  guidance=settings.guidance)[0]
    return out


def drift_curve(params: ModelParams, utterances: list[Utterance], schedule,
                mode: str, settings: GenSettings, rng: Rng) -> np.ndarray:
    """Mean ||x_hat_i - x_i|| by position i over utterances that reach i.

    Free-running mode stops at the reference length (endpoint oracle) so
    positions align with the reference; teacher-forced feeds ground truth.
    """
    if mode not in ("teacher_forced", "free_running"):
        raise ValueError(f"unknown drift mode {mode!r}")
    maxlen = max(len(u.frames) for u in utterances)
    total = np.zeros(maxlen)
    count = np.zeros(maxlen, dtype=np.int64)
    for utt in utterances:
        r = rng.stream(("utt", utt.uid))
        if mode == "teacher_forced":
            hyp = _teacher_forced_frames(params, utt, schedule, settings, r)
        else:
            res = generate(Prompt(speaker=utt.speaker, text=utt.phonemes), params,
                           schedule, OracleEndpoint(len(utt.frames)),
                           max_frames=len(utt.frames), temperature=settings.temperature,
                           guidance=settings.guidance, rng=r)
            hyp = res.frames
        n = min(len(hyp), len(utt.frames))
        err = np.linalg.norm(hyp[:n] - utt.frames[:n], axis=1)
        total[:n] += err
        count[:n] += 1
    covered = count > 0
    curve = np.zeros(maxlen)
    curve[covered] = total[covered] / count[covered]
    return curve


@dataclass
class EvalReport:
    ter_teacher_forced: float
    ter_free_running: float
    sim_r: float
    sim_g: float
    frame_mse: float
    endpoint_accuracy: float
    drift: list[float] = field(default_factory=list)
    n_utterances: int = 0
    n_failures: int = 0
    per_utterance: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "ter_teacher_forced": self.ter_teacher_forced,
            "ter_free_running": self.ter_free_running,
            "sim_r": self.sim_r,
            "sim_g": self.sim_g,
            "frame_mse": self.frame_mse,
            "endpoint_accuracy": self.endpoint_accuracy,
            "drift": self.drift,
            "n_utterances": self.n_utterances,
            "n_failures": self.n_failures,
        })

    @staticmethod
    def from_json(line: str) -> "EvalReport":
        d = json.loads(line)
        return EvalReport(ter_teacher_forced=d["ter_teacher_forced"],
                          ter_free_running=d["ter_free_running"],
                          sim_r=d["sim_r"], sim_g=d["sim_g"],
                          frame_mse=d["frame_mse"],
                          endpoint_accuracy=d["endpoint_accuracy"],
                          drift=list(d.get("drift", [])),
                          n_utterances=d.get("n_utterances", 0),
                          n_failures=d.get("n_failures", 0))


def _criterion_for(utt: Utterance, settings: GenSettings,
                   forced_n: int | None = None) -> StoppingCriterion:
    if settings.criterion == "eos":
        return EosToken()
    if settings.criterion == "oracle_endpoint":
        return OracleEndpoint(len(utt.frames))
    if settings.criterion == "oracle_duration":
        if forced_n is None:
            raise ValueError("oracle_duration requires a forced length")
        return OracleDuration(forced_n)
    raise ValueError(f"unsupported evaluation criterion {settings.criterion!r}")


def mismatched_durations(utterances: list[Utterance]) -> dict[int, int]:
    """uid -> forced frame count: each utterance gets its successor's length
    (cyclic), so forced durations are genuinely wrong whenever lengths vary."""
    lengths = [len(u.frames) for u in utterances]
    return {u.uid: lengths[(i + 1) % len(lengths)]
            for i, u in enumerate(utterances)}


def evaluate(params: ModelParams, codec: CodecSpec, utterances: list[Utterance],
             schedule, settings: GenSettings, rng: Rng,
             with_drift: bool = True) -> EvalReport:
    """Full metric pass over a set of utterances, deterministic under rng.

    Per-utterance failures are recorded and excluded from every mean.
    """
    rows: list[dict] = []
    failures = 0
    max_frames = settings.max_frames or 4 * max(len(u.frames) for u in utterances)
    forced = (mismatched_durations(utterances)
              if settings.criterion == "oracle_duration" else {})
    for utt in utterances:
        r = rng.stream(("utt", utt.uid))
        prompt = Prompt(speaker=utt.speaker, text=utt.phonemes)
        try:
            res = generate(prompt, params, schedule,
                           _criterion_for(utt, settings, forced.get(utt.uid)),
                           max_frames, settings.temperature,
                           settings.guidance, r)
            if res.error:
                raise RuntimeError(res.error)
            tf = _teacher_forced_frames(params, utt, schedule, settings, r)
        except Exception as e:
            failures += 1
            rows.append({"uid": utt.uid, "error": str(e)})
            continue
        hyp_ids = decode(res.frames, codec)
        tf_ids = decode(tf, codec)
        ref_est = estimate_speaker(utt.frames, codec)
        rows.append({
            "uid": utt.uid,
            "ter_fr": token_error_rate(utt.phonemes, hyp_ids),
            "ter_tf": token_error_rate(utt.phonemes, tf_ids),
            "sim_r": speaker_similarity(res.frames, utt.speaker, codec)
                     if len(res.frames) else 0.0,
            "sim_g": speaker_similarity(res.frames, ref_est, codec)
                     if len(res.frames) else 0.0,
            "frame_mse": float(np.mean((tf - utt.frames) ** 2)),
            "endpoint_ok": int(abs(len(res.frames) - len(utt.frames)) <= ENDPOINT_TOLERANCE),
        })
    ok = [r for r in rows if "error" not in r]
    if not ok:
        return EvalReport(ter_teacher_forced=float("nan"), ter_free_running=float("nan"),
                          sim_r=0.0, sim_g=0.0, frame_mse=float("nan"),
                          endpoint_accuracy=0.0, drift=[], n_utterances=len(utterances),
                          n_failures=failures, per_utterance=rows)
    drift = []
    if with_drift:
        good = [u for u in utterances if u.uid in {r["uid"] for r in ok}]
        drift = drift_curve(params, good, schedule, "free_running", settings,
                            rng.stream("drift")).tolist()
    return EvalReport(
        ter_teacher_forced=float(np.mean([r["ter_tf"] for r in ok])),
        ter_free_running=float(np.mean([r["ter_fr"] for r in ok])),
        sim_r=float(np.mean([r["sim_r"] for r in ok])),
        sim_g=float(np.mean([r["sim_g"] for r in ok])),
        frame_mse=float(np.mean([r["frame_mse"] for r in ok])),
        endpoint_accuracy=float(np.mean([r["endpoint_ok"] for r in ok])),
        drift=drift,
        n_utterances=len(utterances),
        n_failures=failures,
        per_utterance=rows,
    )
