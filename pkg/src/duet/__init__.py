"""Dual-head autoregressive generator for continuous frame sequences.

A causal transformer backbone drives two output heads: a categorical head
over control tokens decides when the sequence starts, continues, and stops,
while a small denoising head turns per-position conditioning vectors into
continuous frames. Training interleaves both losses on utterances drawn
from a synthetic reference codec; evaluation decodes the sampled frames
back through that codec and scores the round trip.
"""

__version__ = "0.1.0"

from .codec import CodecSpec, Corpus, Utterance, build_codec, decode, encode, sample_corpus
from .config import ConfigError, RunConfig, default_config, load_config
from .diffusion import NoiseSchedule, RespacedSchedule, build_cosine_schedule, respace
from .model import BackboneConfig, Layout, ModelParams, Prompt, Vocab, init_params
from .numerics import Rng, Tensor, set_default_dtype, tensor
from .training import StageConfig, TrainResult, joint_loss, train_stage1, train_stage2

__all__ = [
    "BackboneConfig",
    "CodecSpec",
    "ConfigError",
    "Corpus",
    "Layout",
    "ModelParams",
    "NoiseSchedule",
    "Prompt",
    "RespacedSchedule",
    "Rng",
    "RunConfig",
    "StageConfig",
    "Tensor",
    "TrainResult",
    "Utterance",
    "Vocab",
    "__version__",
    "build_codec",
    "build_cosine_schedule",
    "decode",
    "default_config",
    "encode",
    "init_params",
    "joint_loss",
    "load_config",
    "respace",
    "sample_corpus",
    "set_default_dtype",
    "tensor",
    "train_stage1",
    "train_stage2",
]
