"""Synthetic oracle codec: a fixed random codebook maps phoneme sequences
plus speaker vectors to continuous frames, and an exact nearest-neighbor
decoder maps frames back. Linear-Gaussian by construction, so intelligibility
and speaker similarity are computable in closed form.

Frame (m, k) = codebook[p_m] + trajectory[k] + gamma * speaker + sigma_obs * noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng

TRAJECTORY_NORM = 0.15
MAX_CODEBOOK_ATTEMPTS = 10_000
SEPARATION_COS = 0.5


@dataclass(frozen=True)
class CodecSpec:
    seed: int
    V: int
    d: int
    K: int
    gamma: float
    sigma_obs: float
    codebook: np.ndarray = field(repr=False)   # (V, d) unit rows, pairwise cos < 0.5
    trajectory: np.ndarray = field(repr=False)  # (K, d) deterministic sub-offsets


@dataclass(frozen=True)
class Utterance:
    uid: int
    phonemes: np.ndarray     # (M,) int ids
    speaker_id: int
    speaker: np.ndarray      # (d,) unit vector
    frames: np.ndarray       # (M*K, d) oracle encoding


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def build_codec(seed: int, V: int = 32, d: int = 8, K: int = 4,
                gamma: float = 0.3, sigma_obs: float = 0.05) -> CodecSpec:
    """Deterministic codec; codebook rows are rejection-sampled until every
    pair has cosine < 0.5 so nearest-neighbor decoding is unambiguous."""
    if d < 4:
        raise ValueError(f"frame dim {d} too small; need d >= 4")
    if V < 2:
        raise ValueError(f"vocab size {V} too small; need V >= 2")
    rng = Rng(seed).stream("codebook")
    rows = np.empty((V, d), dtype=np.float64)
    count = 0
    attempts = 0
    while count < V:
        if attempts >= MAX_CODEBOOK_ATTEMPTS:
            raise RuntimeError(
                f"could not find {V} codebook rows with pairwise cosine < "
                f"{SEPARATION_COS} in d={d}; increase the frame dim"
            )
        attempts += 1
        cand = _unit(rng.normal(d))
        if count == 0 or (rows[:count] @ cand).max() < SEPARATION_COS:
            rows[count] = cand
            count += 1
    traj_rng = Rng(seed).stream("trajectory")
    traj = traj_rng.normal((K, d))
    traj = traj / np.linalg.norm(traj, axis=1, keepdims=True) * TRAJECTORY_NORM
    return CodecSpec(seed=seed, V=V, d=d, K=K, gamma=gamma, sigma_obs=sigma_obs,
                     codebook=rows, trajectory=traj)


def encode(phonemes: np.ndarray, speaker: np.ndarray, codec: CodecSpec,
           rng: Rng | None = None) -> np.ndarray:
    """Oracle frames for a phoneme sequence; observation noise is drawn from
    ``rng`` when given, otherwise omitted."""
    phonemes = np.asarray(phonemes, dtype=np.int64)
    if phonemes.size and phonemes.max() >= codec.V:
        raise ValueError(f"phoneme id {phonemes.max()} outside codebook of size {codec.V}")
    M = len(phonemes)
    frames = np.repeat(codec.codebook[phonemes], codec.K, axis=0)
    frames = frames + np.tile(codec.trajectory, (M, 1))
    frames = frames + codec.gamma * np.asarray(speaker, dtype=np.float64)
    if rng is not None and codec.sigma_obs > 0:
        frames = frames + codec.sigma_obs * rng.normal(frames.shape)
    return frames


def decode(frames: np.ndarray, codec: CodecSpec) -> np.ndarray:
    """Per-frame nearest codebook row, then majority vote over consecutive
    K-frame groups; all ties break toward the lower id."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.size == 0:
        return np.zeros(0, dtype=np.int64)
    d2 = ((frames[:, None, :] - codec.codebook[None, :, :]) ** 2).sum(axis=2)
    per_frame = d2.argmin(axis=1)  # argmin takes the first (lowest) id on ties
    out = []
    for g in range(0, len(per_frame), codec.K):
        votes = np.bincount(per_frame[g:g + codec.K], minlength=codec.V)
        out.append(int(votes.argmax()))
    return np.asarray(out, dtype=np.int64)


def estimate_speaker(frames: np.ndarray, codec: CodecSpec) -> np.ndarray:
    """Speaker direction recovered from the mean residual after removing the
    decoded codebook row and trajectory offset per frame. Returns the zero
    vector when the residual degenerates (e.g. gamma == 0)."""
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) < 1:
        raise ValueError("estimate_speaker requires at least one frame")
    groups = decode(frames, codec)
    phon_per_frame = np.repeat(groups, codec.K)[: len(frames)]
    k_idx = np.arange(len(frames)) % codec.K
    residual = frames - codec.codebook[phon_per_frame] - codec.trajectory[k_idx]
    mean = residual.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        return np.zeros(codec.d, dtype=np.float64)
    return mean / norm


def speaker_vectors(codec: CodecSpec, n: int, pool: str, seed: int) -> np.ndarray:
    """n unit speaker vectors for a named pool, pure function of the seed."""
    rng = Rng(seed).stream(("speakers", pool))
    v = rng.normal((n, codec.d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass(frozen=True)
class Corpus:
    codec: CodecSpec
    train: list[Utterance]
    val: list[Utterance]

    @property
    def max_frames(self) -> int:
        lens = [len(u.frames) for u in self.train + self.val]
        return max(lens) if lens else 0


def sample_corpus(codec: CodecSpec, n_train: int, n_val: int,
                  length_range: tuple[int, int], n_speakers: int,
                  n_val_speakers: int, seed: int) -> Corpus:
    """Deterministic train/validation sets; validation speakers are disjoint
    from training speakers (zero-shot analog)."""
    if n_train < 2:
        raise ValueError(f"need at least 2 training utterances, got {n_train}")
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad length range {length_range}")
    train_spk = speaker_vectors(codec, n_speakers, "train", seed)
    val_spk = speaker_vectors(codec, n_val_speakers, "val", seed)

    def make(split: str, count: int, speakers: np.ndarray, id_base: int) -> list[Utterance]:
        utts = []
        for i in range(count):
            r = Rng(seed).stream(("utterance", split, i))
            m = int(r.uniform_int(lo, hi + 1))
            phonemes = r.uniform_int(0, codec.V, m)
            spk_id = int(r.uniform_int(0, len(speakers)))
            frames = encode(phonemes, speakers[spk_id], codec, rng=r.stream("obs"))
            utts.append(Utterance(uid=id_base + i, phonemes=phonemes,
                                  speaker_id=spk_id, speaker=speakers[spk_id],
                                  frames=frames))
        return utts

    return Corpus(
        codec=codec,
        train=make("train", n_train, train_spk, 0),
        val=make("val", n_val, val_spk, n_train),
    )
