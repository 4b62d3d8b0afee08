"""HTTP service over the training, generation, and evaluation pipeline.

Endpoints hold no server state: requests carry config text or checkpoint
paths, responses carry result paths and records. Heavy endpoints share one
lock because the array dtype is process-global; a second request would
otherwise race a training run's precision.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import threading

import numpy as np
from fastapi import FastAPI, HTTPException

from ..ablate import DEFAULT_VALUES, SweepSpec, run_sweep
from ..checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from ..codec import decode, speaker_vectors
from ..config import ConfigError, RunConfig, load_config
from ..diffusion import build_cosine_schedule, respace, schedule_rows
from ..evaluation import evaluate
from ..frameseq import output_sequence, token_name, write_frameseq
from ..inference import EosToken, OracleDuration, generate
from ..model import Prompt, init_params
from ..numerics import Rng, set_default_dtype
from ..training import train_stage1, train_stage2
from . import schemas

_heavy = threading.Lock()


def _fail(status: int, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail=message)


def _load_cfg(text: str, overrides: list[str]) -> RunConfig:
    try:
        return load_config(text=text, overrides=overrides)
    except ConfigError as e:
        raise _fail(422, str(e)) from None


def _open_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise _fail(404, f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise _fail(400, str(e)) from None


def _cast_params(params, dtype) -> None:
    for t in params.tensors.values():
        if t.data.dtype != dtype:
            t.data = t.data.astype(dtype)


def _run_name(cfg: RunConfig, stage: int, explicit: str | None) -> str:
    if explicit:
        return explicit
    named = str(cfg.values["paths"]["run_name"])
    if named:
        return named
    digest = hashlib.sha256(cfg.dump().encode()).hexdigest()[:8]
    return f"stage{stage}-{digest}"


def create_app() -> FastAPI:
    from .. import __version__

    app = FastAPI(title="duet", version=__version__)

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest) -> schemas.TrainResponse:
        cfg = _load_cfg(req.config_text, req.overrides)
        stage_cfg = cfg.stage_config()
        seeds = cfg.values["seeds"]
        run_dir = os.path.join(cfg.out_root(), _run_name(cfg, stage_cfg.stage, req.run_name))
        with _heavy:
            set_default_dtype(cfg.dtype())
            os.makedirs(run_dir, exist_ok=True)
            resolved = cfg.dump()
            with open(os.path.join(run_dir, "config.resolved.ini"), "w") as f:
                f.write(resolved)
            corpus = cfg.build_corpus()
            rng_states = {"seeds": {k: int(v) for k, v in seeds.items()}}

            def periodic(step, params, adam, log):
                save_checkpoint(os.path.join(run_dir, "periodic.duet"), params,
                                resolved, step, adam=adam, rng_states=rng_states)

            if stage_cfg.stage == 1:
                params = init_params(cfg.model_config(), Rng(int(seeds["init"])))
                res = train_stage1(stage_cfg, corpus, Rng(int(seeds["train"])),
                                   params=params, on_eval=periodic)
            else:
                init_from = str(cfg.values["train"]["init_from"])
                ckpt = _open_checkpoint(init_from)
                _cast_params(ckpt.params, cfg.dtype())
                res = train_stage2(ckpt.params, stage_cfg, corpus,
                                   Rng(int(seeds["train"])), on_eval=periodic)

            best_path = os.path.join(run_dir, "best.duet")
            final_path = os.path.join(run_dir, "final.duet")
            extra = {"stage": stage_cfg.stage, "best_step": res.best_step,
                     "best_metric": res.best_metric, "status": res.status}
            save_checkpoint(best_path, res.params, resolved, res.best_step,
                            rng_states=rng_states, extra=extra)
            save_checkpoint(final_path, res.final_params, resolved, res.step,
                            adam=res.adam, rng_states=rng_states, extra=extra)
            log_path = os.path.join(run_dir, "log.jsonl")
            with open(log_path, "w") as f:
                for rec in res.log.evals:
                    f.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")
        return schemas.TrainResponse(
            run_dir=run_dir, best_checkpoint=best_path, final_checkpoint=final_path,
            log_path=log_path, status=res.status, stage=stage_cfg.stage,
            steps_run=res.step, best_step=res.best_step, best_metric=res.best_metric,
            evals=[schemas.EvalRecordModel(**r.as_dict()) for r in res.log.evals])

    @app.post("/generate", response_model=schemas.GenerateResponse)
    def generate_cmd(req: schemas.GenerateRequest) -> schemas.GenerateResponse:
        ckpt = _open_checkpoint(req.checkpoint)
        cfg = _load_cfg(ckpt.config_text, [])
        with _heavy:
            set_default_dtype(cfg.dtype())
            _cast_params(ckpt.params, cfg.dtype())
            codec = cfg.build_codec()
            model_cfg = ckpt.params.config
            if codec.d != model_cfg.frame_dim:
                raise _fail(400, f"codec frame_dim {codec.d} does not match "
                                 f"checkpoint frame_dim {model_cfg.frame_dim}")
            seeds = cfg.values["seeds"]
            if req.speaker is not None:
                speaker = np.asarray(req.speaker, dtype=np.float64)
                if speaker.shape != (model_cfg.speaker_dim,):
                    raise _fail(400, f"speaker vector must have {model_cfg.speaker_dim} "
                                     f"entries, got {speaker.shape}")
            else:
                sseed = req.speaker_seed if req.speaker_seed is not None else int(seeds["generate"])
                speaker = speaker_vectors(codec, 1, "generate", sseed)[0]
            try:
                prompt = Prompt(speaker=speaker, text=np.asarray(req.text, dtype=np.int64))
            except ValueError as e:
                raise _fail(400, str(e)) from None

            infer = cfg.values["infer"]
            steps = req.steps or int(infer["steps"])
            T = int(cfg.values["schedule"]["T"])
            if not 1 <= steps <= T:
                raise _fail(400, f"denoise steps {steps} outside [1, {T}]")
            schedule = respace(build_cosine_schedule(T, float(cfg.values["schedule"]["s"])), steps)
            criterion = (OracleDuration(req.force_frames)
                         if req.force_frames is not None else EosToken())
            max_frames = req.max_frames or int(infer["max_frames"]) \
                or codec.K * max(4 * len(req.text), 1)
            rng = Rng(req.seed if req.seed is not None else int(seeds["generate"]))
            res = generate(prompt, ckpt.params, schedule, criterion, max_frames,
                           req.temperature if req.temperature is not None
                           else float(infer["temperature"]),
                           req.guidance if req.guidance is not None
                           else float(infer["guidance"]),
                           rng.stream("generate"))
            if res.error:
                raise _fail(500, f"generation failed: {res.error}")
            out_path = req.out_path or os.path.join(cfg.out_root(), "generated.fseq")
            os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
            write_frameseq(out_path, res, model_cfg.tokens, codec.seed)
            decoded = decode(res.frames, codec).tolist() if len(res.frames) else []
        vocab = model_cfg.tokens
        return schemas.GenerateResponse(
            frameseq_path=out_path, n_frames=len(res.frames), stop_reason=res.stop_reason,
            decisions=[token_name(vocab, t) for t in res.control_trace],
            sequence=output_sequence(len(res.frames), res.stop_reason),
            decoded=decoded)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_cmd(req: schemas.EvalRequest) -> schemas.EvalResponse:
        if req.split not in ("train", "val"):
            raise _fail(422, f"split must be train or val, got {req.split!r}")
        ckpt = _open_checkpoint(req.checkpoint)
        cfg = _load_cfg(ckpt.config_text, req.overrides)
        with _heavy:
            set_default_dtype(cfg.dtype())
            _cast_params(ckpt.params, cfg.dtype())
            corpus = cfg.build_corpus()
            utts = corpus.train if req.split == "train" else corpus.val
            T = int(cfg.values["schedule"]["T"])
            steps = min(int(cfg.values["infer"]["steps"]), T)
            schedule = respace(build_cosine_schedule(T, float(cfg.values["schedule"]["s"])), steps)
            seed = req.seed if req.seed is not None else int(cfg.values["seeds"]["eval"])
            report = evaluate(ckpt.params, corpus.codec, utts, schedule,
                              cfg.gen_settings(), Rng(seed).stream("eval"),
                              with_drift=req.with_drift)
            report_path = None
            if req.out_path:
                os.makedirs(os.path.dirname(req.out_path) or ".", exist_ok=True)
                with open(req.out_path, "w") as f:
                    f.write(report.to_json() + "\n")
                report_path = req.out_path
        return schemas.EvalResponse(report=json.loads(report.to_json()),
                                    report_path=report_path, split=req.split,
                                    n_utterances=report.n_utterances)

    @app.post("/ablate", response_model=schemas.AblateResponse)
    def ablate_cmd(req: schemas.AblateRequest) -> schemas.AblateResponse:
        cfg = _load_cfg(req.config_text, req.overrides)
        if req.axis not in DEFAULT_VALUES:
            raise _fail(422, f"unknown sweep axis {req.axis!r}; "
                             f"expected one of {sorted(DEFAULT_VALUES)}")
        if req.eval_on not in ("train", "val"):
            raise _fail(422, f"eval_on must be train or val, got {req.eval_on!r}")
        values = req.values if req.values is not None else DEFAULT_VALUES[req.axis]
        c = cfg.values["corpus"]
        with _heavy:
            set_default_dtype(cfg.dtype())
            try:
                spec = SweepSpec(
                    axis=req.axis, values=values, seeds=req.seeds,
                    train=cfg.stage_config(), settings=cfg.gen_settings(),
                    model=cfg.model_config(),
                    codec_seed=int(cfg.values["codec"]["seed"]),
                    corpus_seed=int(c["seed"]), n_train=int(c["n_train"]),
                    n_val=int(c["n_val"]),
                    len_range=(int(c["len_min"]), int(c["len_max"])),
                    n_speakers=int(c["n_speakers"]),
                    n_val_speakers=int(c["n_val_speakers"]),
                    infer_steps=int(cfg.values["infer"]["steps"]),
                    eval_on=req.eval_on)
            except ValueError as e:
                raise _fail(422, str(e)) from None
            out_dir = req.out_dir or os.path.join(cfg.out_root(), f"sweep-{req.axis}")
            result = run_sweep(spec, out_dir=out_dir)
        return schemas.AblateResponse(axis=req.axis,
                                      rows=[cell.row() for cell in result.cells],
                                      aggregate=result.aggregate, out_dir=out_dir)

    @app.post("/schedule", response_model=schemas.ScheduleResponse)
    def schedule_cmd(req: schemas.ScheduleRequest) -> schemas.ScheduleResponse:
        try:
            sched = build_cosine_schedule(req.T, req.s)
            if req.K is not None:
                sched = respace(sched, req.K)
        except ValueError as e:
            raise _fail(422, str(e)) from None
        rows = schedule_rows(sched)
        csv = "\n".join(f"{t},{a:.17g},{b:.17g}" for t, a, b in rows)
        return schemas.ScheduleResponse(csv=csv, rows=len(rows))

    @app.post("/grad-check", response_model=schemas.GradCheckResponse)
    def grad_check_cmd(req: schemas.GradCheckRequest) -> schemas.GradCheckResponse:
        from ..checks import run_grad_check
        with _heavy:
            rep = run_grad_check(n_cases=req.n_cases, seed0=req.seed0)
        return schemas.GradCheckResponse(
            passed=rep.passed, max_error=rep.max_error, tolerance=rep.tolerance,
            n_cases=rep.n_cases, per_case=rep.per_case, elapsed_s=rep.elapsed_s)

    return app
