"""Generated frame-sequence file format.

Layout (all multi-byte values little-endian):

    bytes 0..3    magic "FSEQ"
    bytes 4..7    format version, uint32
    bytes 8..11   frame dimension d, uint32
    bytes 12..15  frame count n, uint32
    bytes 16..23  codec seed, int64
    bytes 24..27  trace section length in bytes, uint32
    n*d*8 bytes   frames, float64 row-major
    trailing      trace section, UTF-8 JSON with sorted keys

The trace JSON has three fields. "decisions" lists the raw control-head
argmax per step by token name, a per-step diagnostic that may legitimately
contain "<cont_speech_gen>". "sequence" is the produced token-level
sequence: "<speech_bos>", one "frame" entry per emitted frame, and a final
"<eos>" only when generation stopped itself; the dense continue marker is
a training-only target and never appears here. "stop_reason" records why
generation ended.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .inference import GenerationResult
from .model import Vocab

MAGIC = b"FSEQ"
VERSION = 1
_HEADER = struct.Struct("<4sIIIqI")


class FrameSeqError(RuntimeError):
    """Malformed or truncated frame-sequence file."""


def token_name(vocab: Vocab, token: int) -> str:
    names = {vocab.bos: "<speech_bos>", vocab.cont: "<cont_speech_gen>",
             vocab.eos: "<eos>", vocab.pad: "<pad>"}
    if token in names:
        return names[token]
    if 0 <= token < vocab.V:
        return str(token)
    raise ValueError(f"token id {token} outside the extended vocabulary")


def output_sequence(n_frames: int, stop_reason: str) -> list[str]:
    seq = ["<speech_bos>"] + ["frame"] * n_frames
    if stop_reason == "eos":
        seq.append("<eos>")
    return seq


@dataclass(frozen=True)
class FrameSeq:
    d: int
    n: int
    codec_seed: int
    frames: np.ndarray        # (n, d) float64
    decisions: list[str]
    sequence: list[str]
    stop_reason: str


def write_frameseq(path: str, result: GenerationResult, vocab: Vocab,
                   codec_seed: int) -> None:
    frames = np.ascontiguousarray(result.frames, dtype=np.dtype("<f8"))
    if frames.ndim != 2:
        raise ValueError(f"frames must be 2-D, got shape {frames.shape}")
    n, d = frames.shape
    trace = {
        "decisions": [token_name(vocab, t) for t in result.control_trace],
        "sequence": output_sequence(n, result.stop_reason),
        "stop_reason": result.stop_reason,
    }
    blob = json.dumps(trace, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, d, n, codec_seed, len(blob)))
        f.write(frames.tobytes())
        f.write(blob)


def read_frameseq(path: str) -> FrameSeq:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise FrameSeqError(f"{path}: not a frame-sequence file (bad magic)")
    magic, version, d, n, codec_seed, trace_len = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FrameSeqError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size:]
    need = n * d * 8 + trace_len
    if len(body) != need:
        raise FrameSeqError(f"{path}: expected {need} body bytes, found {len(body)}")
    frames = np.frombuffer(body[: n * d * 8], dtype=np.dtype("<f8")).reshape(n, d)
    trace = json.loads(body[n * d * 8:].decode("utf-8"))
    return FrameSeq(d=d, n=n, codec_seed=codec_seed,
                    frames=frames.astype(np.float64, copy=True),
                    decisions=trace["decisions"], sequence=trace["sequence"],
                    stop_reason=trace["stop_reason"])
