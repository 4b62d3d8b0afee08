"""Dual-head network: modality projectors, a causal pre-LN transformer
backbone, an LM head over the control-token vocabulary, and a residual MLP
denoising head whose layer norms are modulated by (timestep, condition).

Parameters are split into two partitions: "backbone." tensors (the projectors,
transformer, condition projector, and LM head) and "head." tensors (the
denoising head plus its timestep embedding and the null condition). The second
training stage freezes the first partition bit-exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Tensor,
    add,
    concat,
    embed_lookup,
    get_default_dtype,
    layer_norm,
    matmul,
    mul,
    reshape,
    scale,
    silu,
    softmax,
    take_rows,
    tensor,
    transpose,
)

NEG_MASK = -1e30  # finite additive mask; exp underflows to exact zero


@dataclass(frozen=True)
class Vocab:
    """Text ids 0..V-1 plus the control tokens appended after them."""

    V: int

    @property
    def bos(self) -> int:
        return self.V

    @property
    def cont(self) -> int:
        return self.V + 1

    @property
    def eos(self) -> int:
        return self.V + 2

    @property
    def pad(self) -> int:
        return self.V + 3

    @property
    def size(self) -> int:
        return self.V + 4


@dataclass(frozen=True)
class BackboneConfig:
    width: int = 64
    layers: int = 4
    heads: int = 4
    frame_dim: int = 8
    speaker_dim: int = 8
    cond_dim: int = 64
    max_len: int = 256
    vocab: int = 32
    head_layers: int = 6
    head_width: int = 64

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        for name in ("width", "layers", "heads", "frame_dim", "speaker_dim",
                     "cond_dim", "max_len", "vocab", "head_layers", "head_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def tokens(self) -> Vocab:
        return Vocab(self.vocab)


@dataclass(frozen=True)
class Prompt:
    speaker: np.ndarray  # (speaker_dim,)
    text: np.ndarray     # (M,) int ids in [0, V)

    def validate(self, config: BackboneConfig) -> None:
        if len(self.text) == 0:
            raise ValueError("prompt text must be nonempty")
        if self.speaker.shape != (config.speaker_dim,):
            raise ValueError(
                f"speaker vector shape {self.speaker.shape} does not match "
                f"config speaker_dim {config.speaker_dim}"
            )
        if self.text.min() < 0 or self.text.max() >= config.vocab:
            raise ValueError("prompt text ids outside the text vocabulary")


@dataclass
class ModelParams:
    config: BackboneConfig
    tensors: dict[str, Tensor]
    theta_trainable: bool = True
    phi_trainable: bool = True

    def partition(self, name: str) -> str:
        if name.startswith("backbone."):
            return "theta"
        if name.startswith("head."):
            return "phi"
        raise KeyError(f"parameter {name} belongs to no partition")

    def names(self, part: str | None = None) -> list[str]:
        if part is None:
            return sorted(self.tensors)
        return sorted(n for n in self.tensors if self.partition(n) == part)

    def trainable_names(self) -> list[str]:
        out = []
        if self.theta_trainable:
            out.extend(self.names("theta"))
        if self.phi_trainable:
            out.extend(self.names("phi"))
        return sorted(out)

    def partition_hash(self, part: str) -> str:
        h = hashlib.sha256()
        for name in self.names(part):
            t = self.tensors[name]
            h.update(name.encode())
            h.update(str(t.dtype).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def _linear_init(rng, fan_in: int, fan_out: int, std: float = 0.02):
    return rng.normal((fan_in, fan_out)) * std


def init_params(config: BackboneConfig, rng) -> ModelParams:
    """Fresh parameters; modulation and output layers are small random so the
    condition path is active from the first step."""
    dt = get_default_dtype()
    w, hw, cd = config.width, config.head_width, config.cond_dim
    r = rng.stream("init")
    p: dict[str, np.ndarray] = {}

    p["backbone.tok_emb"] = r.stream("tok").normal((config.tokens.size, w)) * 0.02
    p["backbone.pos_emb"] = r.stream("pos").normal((config.max_len, w)) * 0.01
    p["backbone.spk_proj.w"] = _linear_init(r.stream("spk"), config.speaker_dim, w)
    p["backbone.spk_proj.b"] = np.zeros(w)
    p["backbone.frame_proj.w"] = _linear_init(r.stream("frm"), config.frame_dim, w)
    p["backbone.frame_proj.b"] = np.zeros(w)
    for i in range(config.layers):
        pre = f"backbone.layers.{i}"
        lr = r.stream(("layer", i))
        p[f"{pre}.ln1.g"] = np.ones(w)
        p[f"{pre}.ln1.b"] = np.zeros(w)
        for nm in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.attn.{nm}"] = _linear_init(lr.stream(nm), w, w)
            p[f"{pre}.attn.b{nm[1]}"] = np.zeros(w)
        p[f"{pre}.ln2.g"] = np.ones(w)
        p[f"{pre}.ln2.b"] = np.zeros(w)
        p[f"{pre}.mlp.w1"] = _linear_init(lr.stream("m1"), w, 4 * w)
        p[f"{pre}.mlp.b1"] = np.zeros(4 * w)
        p[f"{pre}.mlp.w2"] = _linear_init(lr.stream("m2"), 4 * w, w)
        p[f"{pre}.mlp.b2"] = np.zeros(w)
    p["backbone.ln_f.g"] = np.ones(w)
    p["backbone.ln_f.b"] = np.zeros(w)
    p["backbone.cond_proj.w"] = _linear_init(r.stream("cond"), w, cd)
    p["backbone.cond_proj.b"] = np.zeros(cd)
    p["backbone.lm_head.w"] = _linear_init(r.stream("lm"), w, config.tokens.size)
    p["backbone.lm_head.b"] = np.zeros(config.tokens.size)

    p["head.in_proj.w"] = _linear_init(r.stream("hin"), config.frame_dim, hw)
    p["head.in_proj.b"] = np.zeros(hw)
    p["head.t_mlp.w1"] = _linear_init(r.stream("t1"), hw, hw)
    p["head.t_mlp.b1"] = np.zeros(hw)
    p["head.t_mlp.w2"] = _linear_init(r.stream("t2"), hw, cd)
    p["head.t_mlp.b2"] = np.zeros(cd)
    p["head.z_null"] = r.stream("null").normal(cd) * 0.02
    for i in range(config.head_layers):
        pre = f"head.blocks.{i}"
        br = r.stream(("block", i))
        p[f"{pre}.mod.w"] = _linear_init(br.stream("mod"), cd, 2 * hw)
        p[f"{pre}.mod.b"] = np.zeros(2 * hw)
        p[f"{pre}.mlp.w1"] = _linear_init(br.stream("w1"), hw, hw)
        p[f"{pre}.mlp.b1"] = np.zeros(hw)
        p[f"{pre}.mlp.w2"] = _linear_init(br.stream("w2"), hw, hw)
        p[f"{pre}.mlp.b2"] = np.zeros(hw)
    p["head.out_mod.w"] = _linear_init(r.stream("omod"), cd, 2 * hw)
    p["head.out_mod.b"] = np.zeros(2 * hw)
    p["head.out_proj.w"] = _linear_init(r.stream("out"), hw, config.frame_dim)
    p["head.out_proj.b"] = np.zeros(config.frame_dim)

    tensors = {k: Tensor(v.astype(dt), requires_grad=True) for k, v in p.items()}
    return ModelParams(config=config, tensors=tensors)


ROLE_PROMPT = 0
ROLE_BOS = 1
ROLE_FRAME = 2


@dataclass(frozen=True)
class Layout:
    """Index map for one laid-out sequence.

    Positions: 0 speaker, 1..M text, M+1 bos, M+2..M+1+N frames. The hidden
    state that conditions frame i sits one position earlier (bos for i=1).
    """

    M: int
    N: int

    @property
    def length(self) -> int:
        return self.M + self.N + 2

    @property
    def bos_pos(self) -> int:
        return self.M + 1

    def frame_pos(self, i: int) -> int:
        return self.M + 1 + i  # i is 1-based

    def cond_positions(self) -> np.ndarray:
        """Positions whose hidden state conditions frames 1..N."""
        return np.arange(self.bos_pos, self.bos_pos + self.N)

    def roles(self) -> np.ndarray:
        return np.array([ROLE_PROMPT] * (self.M + 1) + [ROLE_BOS] + [ROLE_FRAME] * self.N)


def _affine(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return add(matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def layout_sequence(prompt: Prompt, frames: np.ndarray | Tensor,
                    params: ModelParams, masked: np.ndarray | None = None) -> tuple[Tensor, Layout]:
    """Compose [speaker][text][bos][frames] into backbone input embeddings.

    ``masked``: optional 0/1 per frame; 0 zeroes the frame before projection
    (the projector then emits its bias alone). Frame values pass through the
    frame projector, tokens through the embedding table.
    """
    prompt.validate(params.config)
    cfg = params.config
    t = params.tensors
    x = frames if isinstance(frames, Tensor) else tensor(np.asarray(frames, dtype=float))
    N = x.shape[0] if x.shape else 0
    lay = Layout(M=len(prompt.text), N=N)
    if lay.length > cfg.max_len:
        raise ValueError(f"sequence length {lay.length} exceeds max {cfg.max_len}")

    spk = tensor(prompt.speaker.reshape(1, -1))
    parts = [_affine(spk, t, "backbone.spk_proj")]
    tok_ids = np.concatenate([prompt.text, [cfg.tokens.bos]])
    parts.append(embed_lookup(t["backbone.tok_emb"], tok_ids))
    if N:
        if masked is not None:
            keep = np.asarray(masked, dtype=float).reshape(N, 1)
            x = mul(x, tensor(np.broadcast_to(keep, (N, cfg.frame_dim)).copy()))
        parts.append(_affine(x, t, "backbone.frame_proj"))
    emb = concat(parts, axis=0)
    return emb, lay


def causal_mask(L: int) -> Tensor:
    m = np.triu(np.full((L, L), NEG_MASK), k=1)
    return tensor(m)


def backbone_forward(params: ModelParams, emb: Tensor) -> Tensor:
    """Hidden states for (B, L, width) or (L, width) input embeddings."""
    cfg = params.config
    t = params.tensors
    squeeze = emb.data.ndim == 2
    if squeeze:
        emb = reshape(emb, (1,) + emb.shape)
    B, L, W = emb.shape
    H = cfg.heads
    dh = W // H

    h = add(emb, take_rows(t["backbone.pos_emb"], np.arange(L)))
    mask = causal_mask(L)
    for i in range(cfg.layers):
        pre = f"backbone.layers.{i}"
        n1 = add(mul(layer_norm(h), t[f"{pre}.ln1.g"]), t[f"{pre}.ln1.b"])
        q = add(matmul(n1, t[f"{pre}.attn.wq"]), t[f"{pre}.attn.bq"])
        k = add(matmul(n1, t[f"{pre}.attn.wk"]), t[f"{pre}.attn.bk"])
        v = add(matmul(n1, t[f"{pre}.attn.wv"]), t[f"{pre}.attn.bv"])
        q = transpose(reshape(q, (B, L, H, dh)), (0, 2, 1, 3))
        k = transpose(reshape(k, (B, L, H, dh)), (0, 2, 1, 3))
        v = transpose(reshape(v, (B, L, H, dh)), (0, 2, 1, 3))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = softmax(add(scores, mask))
        ctx = matmul(att, v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, L, W))
        h = add(h, add(matmul(ctx, t[f"{pre}.attn.wo"]), t[f"{pre}.attn.bo"]))
        n2 = add(mul(layer_norm(h), t[f"{pre}.ln2.g"]), t[f"{pre}.ln2.b"])
        m = matmul(silu(add(matmul(n2, t[f"{pre}.mlp.w1"]), t[f"{pre}.mlp.b1"])), t[f"{pre}.mlp.w2"])
        h = add(h, add(m, t[f"{pre}.mlp.b2"]))
    h = add(mul(layer_norm(h), t["backbone.ln_f.g"]), t["backbone.ln_f.b"])
    return reshape(h, (L, W)) if squeeze else h


def condition_project(params: ModelParams, h: Tensor) -> Tensor:
    return _affine(h, params.tensors, "backbone.cond_proj")


def lm_head(params: ModelParams, h: Tensor) -> Tensor:
    return _affine(h, params.tensors, "backbone.lm_head")


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    feat = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if feat.shape[1] < dim:
        feat = np.concatenate([feat, np.zeros((len(t), dim - feat.shape[1]))], axis=1)
    return feat


def _modulate(h: Tensor, c: Tensor, params: dict[str, Tensor], name: str, hw: int) -> Tensor:
    ss = add(matmul(c, params[f"{name}.w"]), params[f"{name}.b"])
    shift = take_cols(ss, 0, hw)
    sc = take_cols(ss, hw, 2 * hw)
    return add(mul(layer_norm(h), add(sc, 1.0)), shift)


def take_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    """Column slice of a 2-D tensor as a differentiable op."""
    # transpose -> take_rows -> transpose keeps the adjoint exact without a
    # dedicated slicing primitive.
    return transpose(take_rows(transpose(a, (1, 0)), np.arange(lo, hi)), (1, 0))


def diffusion_head_forward(params: ModelParams, x_t: Tensor | np.ndarray,
                           t: np.ndarray | int, z: Tensor | np.ndarray) -> Tensor:
    """Noise prediction for frames x_t at timesteps t under conditions z.

    Accepts (F, d) frames with per-frame integer t and (F, cond_dim)
    conditions; each residual block's layer norm is scaled and shifted by a
    linear map of silu(z + timestep embedding).
    """
    cfg = params.config
    p = params.tensors
    hw = cfg.head_width
    x_t = x_t if isinstance(x_t, Tensor) else tensor(np.asarray(x_t, dtype=float))
    z = z if isinstance(z, Tensor) else tensor(np.asarray(z, dtype=float))
    if x_t.data.ndim == 1:
        x_t = reshape(x_t, (1, cfg.frame_dim))
    if z.data.ndim == 1:
        z = reshape(z, (1, cfg.cond_dim))

    feats = tensor(timestep_features(t, hw))
    if feats.shape[0] == 1 and x_t.shape[0] > 1:
        feats = tensor(np.repeat(feats.data, x_t.shape[0], axis=0))
    t1 = silu(add(matmul(feats, p["head.t_mlp.w1"]), p["head.t_mlp.b1"]))
    t_emb = add(matmul(t1, p["head.t_mlp.w2"]), p["head.t_mlp.b2"])
    c = silu(add(z, t_emb))

    h = _affine(x_t, p, "head.in_proj")
    for i in range(cfg.head_layers):
        pre = f"head.blocks.{i}"
        hm = _modulate(h, c, p, f"{pre}.mod", hw)
        inner = matmul(silu(add(matmul(hm, p[f"{pre}.mlp.w1"]), p[f"{pre}.mlp.b1"])), p[f"{pre}.mlp.w2"])
        h = add(h, add(inner, p[f"{pre}.mlp.b2"]))
    h = _modulate(h, c, p, "head.out_mod", hw)
    return _affine(h, p, "head.out_proj")


def null_condition(params: ModelParams) -> Tensor:
    """Learned unconditional branch vector; only consulted when guidance != 1."""
    return params.tensors["head.z_null"]


def make_denoiser(params: ModelParams):
    """Plain-array callable (x_t, t, z) -> eps_hat for the sampling loop."""
    def denoiser(x_t: np.ndarray, t: int, z: np.ndarray) -> np.ndarray:
        out = diffusion_head_forward(params, x_t, np.full(len(np.atleast_2d(x_t)), t), z)
        return out.data
    return denoiser
