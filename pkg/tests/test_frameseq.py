import json
import struct

import numpy as np
import pytest

from duet.frameseq import (
    MAGIC,
    VERSION,
    FrameSeqError,
    output_sequence,
    read_frameseq,
    token_name,
    write_frameseq,
)
from duet.inference import GenerationResult
from duet.model import Vocab
from duet.numerics import Rng

VOCAB = Vocab(8)


def make_result(n=3, stop="eos", trace=None):
    frames = Rng(1).normal((n, 4))
    if trace is None:
        trace = [VOCAB.cont] * n + ([VOCAB.eos] if stop == "eos" else [])
    return GenerationResult(frames=frames, control_trace=trace,
                            stop_reason=stop, diagnostics=[])


class TestTokenName:
    def test_control_names(self):
        assert token_name(VOCAB, VOCAB.bos) == "<speech_bos>"
        assert token_name(VOCAB, VOCAB.cont) == "<cont_speech_gen>"
        assert token_name(VOCAB, VOCAB.eos) == "<eos>"
        assert token_name(VOCAB, VOCAB.pad) == "<pad>"

    def test_text_ids_stringify(self):
        assert token_name(VOCAB, 0) == "0"
        assert token_name(VOCAB, 7) == "7"

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            token_name(VOCAB, VOCAB.size)
        with pytest.raises(ValueError):
            token_name(VOCAB, -1)


class TestOutputSequence:
    def test_eos_terminated(self):
        assert output_sequence(2, "eos") == ["<speech_bos>", "frame", "frame", "<eos>"]

    def test_cap_hit_has_no_eos(self):
        assert output_sequence(2, "max_frames") == ["<speech_bos>", "frame", "frame"]
        assert output_sequence(1, "oracle") == ["<speech_bos>", "frame"]

    def test_dense_marker_never_appears(self):
        res = make_result(4, "eos")
        assert "<cont_speech_gen>" in [token_name(VOCAB, t) for t in res.control_trace]
        assert "<cont_speech_gen>" not in output_sequence(4, "eos")


class TestRoundTrip:
    def test_fields_survive(self, tmp_path):
        res = make_result(3, "eos")
        path = str(tmp_path / "a.fseq")
        write_frameseq(path, res, VOCAB, codec_seed=7)
        back = read_frameseq(path)
        assert back.d == 4 and back.n == 3
        assert back.codec_seed == 7
        assert np.array_equal(back.frames, res.frames.astype(np.float64))
        assert back.decisions == ["<cont_speech_gen>"] * 3 + ["<eos>"]
        assert back.sequence == ["<speech_bos>", "frame", "frame", "frame", "<eos>"]
        assert back.stop_reason == "eos"

    def test_zero_frames(self, tmp_path):
        res = GenerationResult(frames=np.zeros((0, 4)), control_trace=[],
                               stop_reason="max_frames", diagnostics=[])
        path = str(tmp_path / "b.fseq")
        write_frameseq(path, res, VOCAB, codec_seed=-3)
        back = read_frameseq(path)
        assert back.n == 0 and back.frames.shape == (0, 4)
        assert back.codec_seed == -3
        assert back.sequence == ["<speech_bos>"]

    def test_byte_determinism(self, tmp_path):
        res = make_result(2, "oracle")
        p1, p2 = str(tmp_path / "c1.fseq"), str(tmp_path / "c2.fseq")
        write_frameseq(p1, res, VOCAB, 7)
        write_frameseq(p2, res, VOCAB, 7)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_golden_bytes(self, tmp_path):
        """The wire layout is pinned: header, little-endian float64 rows,
        compact sorted-key JSON trace."""
        frames = np.array([[1.5, -2.0], [0.25, 8.0]])
        res = GenerationResult(frames=frames, control_trace=[VOCAB.cont, VOCAB.eos],
                               stop_reason="eos", diagnostics=[])
        path = str(tmp_path / "g.fseq")
        write_frameseq(path, res, VOCAB, codec_seed=5)

        trace = json.dumps({"decisions": ["<cont_speech_gen>", "<eos>"],
                            "sequence": ["<speech_bos>", "frame", "frame", "<eos>"],
                            "stop_reason": "eos"},
                           sort_keys=True, separators=(",", ":")).encode()
        want = struct.pack("<4sIIIqI", b"FSEQ", 1, 2, 2, 5, len(trace))
        want += frames.astype("<f8").tobytes() + trace
        assert open(path, "rb").read() == want

    def test_rejects_non_2d(self, tmp_path):
        res = GenerationResult(frames=np.zeros(4), control_trace=[],
                               stop_reason="eos", diagnostics=[])
        with pytest.raises(ValueError):
            write_frameseq(str(tmp_path / "x.fseq"), res, VOCAB, 1)


class TestReadErrors:
    @pytest.fixture
    def saved(self, tmp_path):
        path = str(tmp_path / "r.fseq")
        write_frameseq(path, make_result(2, "eos"), VOCAB, 7)
        return path

    def test_bad_magic(self, saved):
        blob = open(saved, "rb").read()
        open(saved, "wb").write(b"XXXX" + blob[4:])
        with pytest.raises(FrameSeqError, match="magic"):
            read_frameseq(saved)

    def test_bad_version(self, saved):
        blob = open(saved, "rb").read()
        open(saved, "wb").write(blob[:4] + struct.pack("<I", VERSION + 1) + blob[8:])
        with pytest.raises(FrameSeqError, match="version"):
            read_frameseq(saved)

    def test_wrong_body_length(self, saved):
        blob = open(saved, "rb").read()
        open(saved, "wb").write(blob[:-1])
        with pytest.raises(FrameSeqError, match="body"):
            read_frameseq(saved)
        open(saved, "wb").write(blob + b"x")
        with pytest.raises(FrameSeqError, match="body"):
            read_frameseq(saved)

    def test_too_short(self, saved):
        open(saved, "wb").write(b"FSEQ")
        with pytest.raises(FrameSeqError):
            read_frameseq(saved)

    def test_magic_constant(self):
        assert MAGIC == b"FSEQ"
