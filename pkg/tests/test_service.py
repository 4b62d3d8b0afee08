import json
import os

import pytest
from fastapi.testclient import TestClient

from duet.config import load_config
from duet.frameseq import read_frameseq
from duet.service.app import create_app

MICRO_CONFIG = """
[model]
width = 16
layers = 1
heads = 2
frame_dim = 4
speaker_dim = 4
cond_dim = 8
max_len = 48
vocab = 8
head_layers = 1
head_width = 8

[codec]
seed = 3
vocab = 8
frame_dim = 4
frames_per_phoneme = 2
sigma_obs = 0.02

[corpus]
seed = 13
n_train = 3
n_val = 2
len_min = 2
len_max = 3
n_speakers = 2
n_val_speakers = 1

[schedule]
T = 8

[train]
steps = 4
batch_size = 2
eval_every = 2
eval_steps = 2
val_cap = 1
lr_warmup = 2

[infer]
steps = 4
"""


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


@pytest.fixture(scope="module")
def trained(client, tmp_path_factory):
    root = str(tmp_path_factory.mktemp("runs"))
    r = client.post("/train", json={
        "config_text": MICRO_CONFIG,
        "overrides": [f"paths.out_root={root}"],
        "run_name": "micro",
    })
    assert r.status_code == 200, r.text
    return r.json()


class TestHealth:
    def test_health(self, client):
        r = client.get("/health")
        assert r.status_code == 200
        body = r.json()
        assert body["status"] == "ok"
        assert body["version"]


class TestSchedule:
    def test_full_table(self, client):
        r = client.post("/schedule", json={"T": 4})
        assert r.status_code == 200
        body = r.json()
        assert body["rows"] == 5  # anchor plus one row per step
        lines = body["csv"].splitlines()
        assert lines[0] == "0,1,0"
        assert len(lines) == 5

    def test_respaced(self, client):
        r = client.post("/schedule", json={"T": 100, "K": 10})
        assert r.json()["rows"] == 10

    def test_invalid(self, client):
        assert client.post("/schedule", json={"T": 0}).status_code == 422
        assert client.post("/schedule", json={"T": 10, "K": 20}).status_code == 422


class TestTrain:
    def test_artifacts_on_disk(self, trained):
        run_dir = trained["run_dir"]
        for name in ("config.resolved.ini", "best.duet", "final.duet",
                     "log.jsonl", "periodic.duet"):
            assert os.path.exists(os.path.join(run_dir, name)), name
        resolved = open(os.path.join(run_dir, "config.resolved.ini")).read()
        assert load_config(text=resolved)["train"]["steps"] == 4
        log_lines = open(trained["log_path"]).read().splitlines()
        assert len(log_lines) == len(trained["evals"])
        assert json.loads(log_lines[0])["step"] == 0

    def test_response_shape(self, trained):
        assert trained["status"] == "completed"
        assert trained["stage"] == 1
        assert trained["steps_run"] == 4
        assert [e["step"] for e in trained["evals"]] == [0, 2, 4]

    def test_bad_config_rejected(self, client):
        r = client.post("/train", json={"config_text": "[model]\nwidth = fat\n"})
        assert r.status_code == 422
        assert "model.width" in r.json()["detail"]


class TestGenerate:
    def test_forced_duration(self, client, trained, tmp_path):
        out = str(tmp_path / "g.fseq")
        r = client.post("/generate", json={
            "checkpoint": trained["best_checkpoint"],
            "text": [1, 2], "force_frames": 3, "out_path": out, "seed": 5,
        })
        assert r.status_code == 200, r.text
        body = r.json()
        assert body["n_frames"] == 3
        assert body["stop_reason"] == "oracle"
        assert body["sequence"] == ["<speech_bos>", "frame", "frame", "frame"]
        assert len(body["decisions"]) == 3
        assert all(isinstance(t, int) for t in body["decoded"])
        seq = read_frameseq(out)
        assert seq.n == 3 and seq.d == 4
        assert seq.codec_seed == 3

    def test_deterministic_across_calls(self, client, trained, tmp_path):
        def call(path):
            return client.post("/generate", json={
                "checkpoint": trained["best_checkpoint"],
                "text": [1, 2], "force_frames": 2, "out_path": path, "seed": 9,
            }).json()
        a = call(str(tmp_path / "a.fseq"))
        b = call(str(tmp_path / "b.fseq"))
        assert a["decisions"] == b["decisions"]
        fa = read_frameseq(str(tmp_path / "a.fseq"))
        fb = read_frameseq(str(tmp_path / "b.fseq"))
        assert fa.frames.tobytes() == fb.frames.tobytes()

    def test_missing_checkpoint(self, client):
        r = client.post("/generate", json={"checkpoint": "/nope.duet", "text": [1]})
        assert r.status_code == 404

    def test_bad_speaker_length(self, client, trained):
        r = client.post("/generate", json={
            "checkpoint": trained["best_checkpoint"], "text": [1],
            "speaker": [0.0, 1.0]})
        assert r.status_code == 400
        assert "speaker" in r.json()["detail"]

    def test_steps_out_of_range(self, client, trained):
        r = client.post("/generate", json={
            "checkpoint": trained["best_checkpoint"], "text": [1], "steps": 99})
        assert r.status_code == 400

    def test_corrupt_checkpoint(self, client, trained, tmp_path):
        bad = str(tmp_path / "bad.duet")
        blob = bytearray(open(trained["best_checkpoint"], "rb").read())
        blob[-5] ^= 0xFF
        open(bad, "wb").write(bytes(blob))
        r = client.post("/generate", json={"checkpoint": bad, "text": [1]})
        assert r.status_code == 400
        assert "checksum" in r.json()["detail"]


class TestEval:
    def test_val_split_with_report_file(self, client, trained, tmp_path):
        out = str(tmp_path / "report.json")
        r = client.post("/eval", json={
            "checkpoint": trained["best_checkpoint"], "split": "val",
            "out_path": out, "seed": 4})
        assert r.status_code == 200, r.text
        body = r.json()
        assert body["split"] == "val"
        assert body["n_utterances"] == 2
        assert body["report_path"] == out
        for key in ("ter_teacher_forced", "ter_free_running", "frame_mse",
                    "endpoint_accuracy", "drift"):
            assert key in body["report"]
        on_disk = json.loads(open(out).read())
        assert on_disk == body["report"]

    def test_train_split_no_drift(self, client, trained):
        r = client.post("/eval", json={
            "checkpoint": trained["best_checkpoint"], "split": "train",
            "with_drift": False, "seed": 4})
        assert r.status_code == 200
        assert r.json()["n_utterances"] == 3
        assert r.json()["report"]["drift"] == []

    def test_bad_split(self, client, trained):
        r = client.post("/eval", json={
            "checkpoint": trained["best_checkpoint"], "split": "test"})
        assert r.status_code == 422


class TestAblate:
    def test_stopping_axis(self, client, tmp_path):
        out_dir = str(tmp_path / "sweep")
        r = client.post("/ablate", json={
            "config_text": MICRO_CONFIG, "axis": "stopping",
            "values": ["eos", "oracle_endpoint"], "seeds": [101],
            "eval_on": "val", "out_dir": out_dir,
        })
        assert r.status_code == 200, r.text
        body = r.json()
        assert body["axis"] == "stopping"
        assert len(body["rows"]) == 2
        assert {row["value"] for row in body["rows"]} == {"eos", "oracle_endpoint"}
        assert len(body["aggregate"]) == 2
        assert os.path.exists(os.path.join(out_dir, "cells.jsonl"))
        assert os.path.exists(os.path.join(out_dir, "aggregate.json"))
        lines = open(os.path.join(out_dir, "cells.jsonl")).read().splitlines()
        assert len(lines) == 2

    def test_unknown_axis(self, client):
        r = client.post("/ablate", json={"config_text": MICRO_CONFIG,
                                         "axis": "optimizer"})
        assert r.status_code == 422

    def test_bad_eval_on(self, client):
        r = client.post("/ablate", json={"config_text": MICRO_CONFIG,
                                         "axis": "stopping", "eval_on": "test"})
        assert r.status_code == 422


class TestGradCheckEndpoint:
    def test_tiny_run(self, client):
        r = client.post("/grad-check", json={"n_cases": 1, "seed0": 8})
        assert r.status_code == 200
        body = r.json()
        assert body["passed"] is True
        assert body["n_cases"] == 1
        assert body["max_error"] <= body["tolerance"]
