"""Command-line client for the HTTP service.

Every subcommand builds a request, posts it to the service, and prints the
response. By default the service runs in-process over an ASGI transport, so
no server needs to be up; --server targets a remote instance instead. Exit
status is 0 only when the invoked command (and any check it runs) passed.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys

import httpx


def _post_in_process(path: str, body: dict) -> httpx.Response:
    # ASGITransport is async-only; drive it on a private event loop so the
    # CLI stays synchronous.
    from .service import create_app

    async def go() -> httpx.Response:
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(transport=transport, timeout=None,
                                     base_url="http://duet.internal") as client:
            return await client.post(path, json=body)

    return asyncio.run(go())


def _post(args, path: str, body: dict) -> dict:
    if args.server:
        with httpx.Client(base_url=args.server, timeout=None) as client:
            resp = client.post(path, json=body)
    else:
        resp = _post_in_process(path, body)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except Exception:
            detail = resp.text
        print(f"error ({resp.status_code}): {detail}", file=sys.stderr)
        raise SystemExit(1)
    return resp.json()


def _config_body(args) -> dict:
    text = ""
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            text = f.read()
    return {"config_text": text, "overrides": list(getattr(args, "override") or [])}


def _ints(raw: str) -> list[int]:
    return [int(x) for x in raw.split(",") if x.strip() != ""]


def _floats(raw: str) -> list[float]:
    return [float(x) for x in raw.split(",") if x.strip() != ""]


def cmd_train(args) -> int:
    body = _config_body(args)
    body["run_name"] = args.run_name
    out = _post(args, "/train", body)
    if args.json:
        print(json.dumps(out, indent=2))
    else:
        print(f"status: {out['status']}  steps: {out['steps_run']}  "
              f"best step {out['best_step']} (free-running TER {out['best_metric']:.4f})")
        for r in out["evals"]:
            print(f"  step {r['step']:6d}  loss {r['loss']:.4f}  "
                  f"ter_tf {r['ter_teacher_forced']:.3f}  ter_fr {r['ter_free_running']:.3f}")
        print(f"run dir: {out['run_dir']}")
        print(f"best checkpoint: {out['best_checkpoint']}")
        print(f"final checkpoint: {out['final_checkpoint']}")
    return 0 if out["status"] in ("completed", "early_stopped") else 1


def cmd_generate(args) -> int:
    body = {
        "checkpoint": args.checkpoint,
        "text": _ints(args.text),
        "speaker_seed": args.speaker_seed,
        "speaker": _floats(args.speaker) if args.speaker else None,
        "out_path": args.out,
        "temperature": args.temperature,
        "steps": args.steps,
        "guidance": args.guidance,
        "max_frames": args.max_frames,
        "force_frames": args.force_frames,
        "seed": args.seed,
    }
    out = _post(args, "/generate", body)
    if args.json:
        print(json.dumps(out, indent=2))
    else:
        print(f"wrote {out['n_frames']} frames to {out['frameseq_path']} "
              f"(stop: {out['stop_reason']})")
        print(f"decoded ids: {out['decoded']}")
    return 0


def cmd_eval(args) -> int:
    body = {"checkpoint": args.checkpoint, "split": args.split,
            "overrides": list(args.override or []), "out_path": args.out,
            "with_drift": not args.no_drift, "seed": args.seed}
    out = _post(args, "/eval", body)
    if args.json:
        print(json.dumps(out, indent=2))
    else:
        r = out["report"]
        print(f"split {out['split']} ({out['n_utterances']} utterances, "
              f"{r['n_failures']} failures)")
        print(f"  TER teacher-forced {r['ter_teacher_forced']:.4f}  "
              f"free-running {r['ter_free_running']:.4f}")
        print(f"  SIM-R {r['sim_r']:.4f}  SIM-G {r['sim_g']:.4f}  "
              f"frame MSE {r['frame_mse']:.6f}  endpoint {r['endpoint_accuracy']:.3f}")
        if out["report_path"]:
            print(f"report: {out['report_path']}")
    return 0


def cmd_ablate(args) -> int:
    body = _config_body(args)
    body.update({"axis": args.axis, "seeds": _ints(args.seeds),
                 "eval_on": args.eval_on, "out_dir": args.out_dir,
                 "values": json.loads(args.values) if args.values else None})
    out = _post(args, "/ablate", body)
    if args.json:
        print(json.dumps(out, indent=2))
    else:
        print(f"axis: {out['axis']}")
        for row in out["aggregate"]:
            ter = row.get("ter_free_running")
            ter_s = "n/a" if ter is None else f"{ter:.4f}"
            print(f"  value {row['value']!r:24}  median free-running TER {ter_s}  "
                  f"({row['n_seeds']} seeds, {row['n_failed']} failed)")
        if out["out_dir"]:
            print(f"rows: {out['out_dir']}/cells.jsonl")
    failed = sum(r["n_failed"] for r in out["aggregate"])
    return 0 if failed == 0 else 1


def cmd_schedule_dump(args) -> int:
    out = _post(args, "/schedule", {"T": args.T, "s": args.s, "K": args.K})
    if args.out:
        with open(args.out, "w") as f:
            f.write(out["csv"] + "\n")
        print(f"wrote {out['rows']} rows to {args.out}")
    else:
        print(out["csv"])
    return 0


def cmd_grad_check(args) -> int:
    out = _post(args, "/grad-check", {"n_cases": args.cases, "seed0": args.seed0})
    verdict = "PASS" if out["passed"] else "FAIL"
    print(f"{verdict}: max relative error {out['max_error']:.3e} "
          f"(tolerance {out['tolerance']:.0e}, {out['n_cases']} cases, "
          f"{out['elapsed_s']:.1f}s)")
    return 0 if out["passed"] else 1


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duet",
        description="Train, sample, and evaluate the dual-head frame generator.")
    parser.add_argument("--server", default=None,
                        help="URL of a running service; default runs in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="config file path (defaults apply if omitted)")
        p.add_argument("-o", "--override", action="append", metavar="SECTION.KEY=VALUE",
                       help="config override; repeatable")

    p = sub.add_parser("train", help="run one training stage")
    add_config(p)
    p.add_argument("--run-name", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="sample a frame sequence from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True, help="comma-separated phoneme ids")
    p.add_argument("--speaker-seed", type=int, default=None)
    p.add_argument("--speaker", default=None, help="comma-separated explicit vector")
    p.add_argument("--out", default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--force-frames", type=int, default=None,
                   help="generate exactly this many frames instead of stopping on <eos>")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("-o", "--override", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", default=None, help="write the report as one JSON line")
    p.add_argument("--no-drift", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="single-axis sweep with median aggregation")
    add_config(p)
    p.add_argument("--axis", required=True,
                   choices=("p_mask", "head_depth", "stopping", "inference"))
    p.add_argument("--values", default=None, help="JSON list overriding axis defaults")
    p.add_argument("--seeds", default="101,102,103", help="comma-separated seed list")
    p.add_argument("--eval-on", choices=("train", "val"), default="val")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("schedule-dump", help="print the noise schedule as CSV rows")
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--s", type=float, default=0.008)
    p.add_argument("--K", type=int, default=None, help="respace to K steps")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_schedule_dump)

    p = sub.add_parser("grad-check", help="finite-difference check of the loss graph")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--seed0", type=int, default=100)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
