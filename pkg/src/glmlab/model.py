"""Tiny GLM: DeepNorm post-LN blocks, rotary attention, GeGLU feed-forward."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .tensor_io import read_tensor, write_tensor
from .tensorcore import PrecisionPolicy, Storage, Tensor, WIDE

BIDIRECTIONAL = "bidirectional-glm"
UNIDIRECTIONAL = "unidirectional"


class EmptyTargetWarning(UserWarning):
    """Loss requested for a sample without prediction targets; defined as 0."""


def default_ffn_hidden(hidden: int, num_heads: int) -> int:
    """8/3 of the hidden size, which keeps GeGLU at the parameter count of a 4x FFN.

    When ``hidden`` is not divisible by 3 the size is rounded to the nearest
    multiple of ``2 * num_heads``.
    """
    if hidden % 3 == 0:
        return 8 * hidden // 3
    step = 2 * num_heads
    return max(step, int(round(8 * hidden / 3 / step)) * step)


def deepnorm_alpha(num_layers: int) -> float:
    return math.sqrt(2 * num_layers)


def deepnorm_init_scale(num_layers: int) -> float:
    return (2 * num_layers) ** -0.5


@dataclass(frozen=True)
class GLMConfig:
    num_layers: int = 2
    hidden: int = 64
    num_heads: int = 4
    vocab: int = 256
    ffn_hidden: int = 0  # 0 means default_ffn_hidden
    dropout: float = 0.0
    attention: str = BIDIRECTIONAL
    ffn: str = "geglu"  # or "vanilla" (GeLU(x W1) W2) for the FFN ablation
    init_method_std: float = 0.0052
    layernorm_eps: float = 1e-5
    rope_base: float = 10000.0
    alpha: float = 0.0  # 0 means (2N)^(1/2)

    def __post_init__(self):
        if not isinstance(self.num_layers, int) or self.num_layers < 1:
            raise ValueError(f"num_layers must be a positive integer, got {self.num_layers}")
        if self.hidden % self.num_heads:
            raise ValueError("hidden must be divisible by num_heads")
        if (self.hidden // self.num_heads) % 2:
            raise ValueError("head dimension must be even for rotary pairs")
        if self.attention not in (BIDIRECTIONAL, UNIDIRECTIONAL):
            raise ValueError(f"unknown attention variant {self.attention!r}")
        if self.ffn not in ("geglu", "vanilla"):
            raise ValueError(f"unknown ffn variant {self.ffn!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not self.ffn_hidden:
            object.__setattr__(self, "ffn_hidden", default_ffn_hidden(self.hidden, self.num_heads))
        if not self.alpha:
            object.__setattr__(self, "alpha", deepnorm_alpha(self.num_layers))

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    def to_manifest(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_manifest(cls, text: str) -> "GLMConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kind = types[key]
            kw[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else raw.strip()
        return cls(**kw)


class ModelParams:
    """Named parameter tensors in a fixed order.

    Layout per layer ``i`` (prefix ``layers.i.``): ``qkv.weight [d, 3d]``
    (q | k | v columns), ``qkv.bias``, ``out.weight``, ``out.bias``,
    ``ln1.gain/bias``, ``ffn.w1/v/w2.weight/bias``, ``ln2.gain/bias``.
    The output head is tied to ``embedding``.
    """

    def __init__(self, cfg: GLMConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self.tensors.items()
        }

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {
            k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
            for k, t in self.tensors.items()
        })

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "manifest.txt").write_text(self.cfg.to_manifest())
        for name, t in self.tensors.items():
            write_tensor(directory / f"{name}.glmt", t.data)
        return directory

    @classmethod
    def load(cls, directory) -> "ModelParams":
        directory = Path(directory)
        cfg = GLMConfig.from_manifest((directory / "manifest.txt").read_text())
        names = init_parameters(cfg, np.random.default_rng(0)).names()
        tensors = {n: Tensor(read_tensor(directory / f"{n}.glmt"), requires_grad=True, name=n)
                   for n in names}
        return cls(cfg, tensors)


def is_bias_like(name: str) -> bool:
    return name.endswith(".bias") or name.endswith(".gain")


def xavier_normal_std(fan_in: int, fan_out: int) -> float:
    return math.sqrt(2.0 / (fan_in + fan_out))


def init_parameters(cfg: GLMConfig, rng: np.random.Generator) -> ModelParams:
    """DeepNorm initialisation.

    ffn weights, the value projection and the output projection are Xavier
    normal scaled by ``(2N)^(-1/2)``; q/k projections and the embedding use
    ``N(0, init_method_std)``. Biases start at zero, LN gains at one.
    """
    d, f, n = cfg.hidden, cfg.ffn_hidden, cfg.num_layers
    scale = deepnorm_init_scale(n)
    std = cfg.init_method_std

    def normal(shape, s):
        return rng.normal(0.0, s, size=shape)

    t: dict[str, np.ndarray] = {"embedding": normal((cfg.vocab, d), std)}
    for i in range(n):
        p = f"layers.{i}."
        qk = normal((d, 2 * d), std)
        v = normal((d, d), xavier_normal_std(d, d) * scale)
        t[p + "qkv.weight"] = np.concatenate([qk, v], axis=1)
        t[p + "qkv.bias"] = np.zeros(3 * d)
        t[p + "out.weight"] = normal((d, d), xavier_normal_std(d, d) * scale)
        t[p + "out.bias"] = np.zeros(d)
        t[p + "ln1.gain"] = np.ones(d)
        t[p + "ln1.bias"] = np.zeros(d)
        t[p + "ffn.w1.weight"] = normal((d, f), xavier_normal_std(d, f) * scale)
        t[p + "ffn.w1.bias"] = np.zeros(f)
        if cfg.ffn == "geglu":
            t[p + "ffn.v.weight"] = normal((d, f), xavier_normal_std(d, f) * scale)
            t[p + "ffn.v.bias"] = np.zeros(f)
        t[p + "ffn.w2.weight"] = normal((f, d), xavier_normal_std(f, d) * scale)
        t[p + "ffn.w2.bias"] = np.zeros(d)
        t[p + "ln2.gain"] = np.ones(d)
        t[p + "ln2.bias"] = np.zeros(d)
    return ModelParams(cfg, {k: Tensor(v, requires_grad=True, name=k) for k, v in t.items()})


# -- building blocks --------------------------------------------------------


def deepnorm_residual(x: Tensor, sublayer_output: Tensor, alpha: float,
                      gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """``LayerNorm(alpha * x + sublayer_output)``; ``alpha=1`` is plain post-LN."""
    if x.shape != sublayer_output.shape:
        raise tc.ShapeError(f"residual shapes differ: {x.shape} vs {sublayer_output.shape}")
    return tc.layer_norm(x * alpha + sublayer_output, gain, bias, eps)


def rope_rotate(x, position, base: float = 10000.0) -> Tensor:
    """Apply the rotary rotation for ``position`` to the last axis of ``x``.

    ``position`` may be a scalar (applied to a single vector or to every row)
    or one position per row of ``x``.
    """
    x = tc.as_tensor(x)
    if x.shape[-1] % 2:
        raise tc.ShapeError(f"rotary dimension must be even, got {x.shape[-1]}")
    pos = np.atleast_1d(np.asarray(position, dtype=np.float64))
    if x.ndim == 1:
        return tc.rope(x.reshape(1, -1), pos[:1], base).reshape(x.shape)
    if pos.size == 1:
        pos = np.repeat(pos, x.shape[-2])
    return tc.rope(x, pos, base)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def attention(q: Tensor, k: Tensor, v: Tensor, mask, policy: PrecisionPolicy = WIDE,
              positions=None, base: float = 10000.0, dropout: float = 0.0,
              rng: np.random.Generator | None = None) -> Tensor:
    """Scaled dot-product attention over ``[..., L, d_head]`` inputs.

    Rotary encoding is applied to q and k when ``positions`` is given. Masked
    scores become ``-inf`` before a wide-precision softmax.
    """
    if policy.storage is Storage.HALF:
        q, k, v = tc.half_emulate(q), tc.half_emulate(k), tc.half_emulate(v)
    if positions is not None:
        q = tc.rope(q, positions, base)
        k = tc.rope(k, positions, base)
    scores = (q @ tc.transpose(k, _swap_last(k.ndim))) * (1.0 / math.sqrt(q.shape[-1]))
    scores = tc.where_mask(scores, mask)
    probs = tc.dropout(tc.softmax_rows(scores, policy), dropout, rng)
    return probs @ v


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def geglu(x: Tensor, w1: Tensor, v: Tensor, w2: Tensor,
          b1=None, bv=None, b2=None) -> Tensor:
    """``(GeLU(x W1) * (x V)) W2`` with optional biases."""
    h1 = x @ w1 if b1 is None else x @ w1 + b1
    hv = x @ v if bv is None else x @ v + bv
    out = (tc.gelu(h1) * hv) @ w2
    return out if b2 is None else out + b2


def ffn_parameter_count(hidden: int, ffn_hidden: int, gated: bool) -> int:
    """Weight count (biases excluded) of a feed-forward block."""
    return hidden * ffn_hidden * (3 if gated else 2)


# -- full model -------------------------------------------------------------


def _mask_for(cfg: GLMConfig, sample, mask_override) -> np.ndarray:
    if mask_override is not None:
        return np.asarray(mask_override, dtype=bool)
    if cfg.attention == UNIDIRECTIONAL:
        return causal_mask(len(sample.input_tokens))
    return sample.attention_mask


def forward(params: ModelParams, sample, *, policy: PrecisionPolicy = WIDE,
            egs_alpha: float | None = None, rng: np.random.Generator | None = None,
            mask_override=None, embedding: Tensor | None = None,
            return_hidden: bool = False):
    """Logits ``[L, vocab]`` for a corrupted or packed sample.

    ``egs_alpha`` shrinks the gradient reaching the (tied) embedding matrix;
    forward values are unaffected. Dropout is active only when ``rng`` is
    given and ``cfg.dropout > 0``. ``embedding`` substitutes a pre-built
    embedding node (e.g. one EGS node shared across a whole batch).
    """
    cfg = params.cfg
    tokens = np.asarray(sample.input_tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError(f"token id outside vocabulary of {cfg.vocab}")
    positions = np.asarray(sample.positions)
    mask = _mask_for(cfg, sample, mask_override)
    L, d, h, dh = len(tokens), cfg.hidden, cfg.num_heads, cfg.head_dim
    rate = cfg.dropout if rng is not None else 0.0

    emb = params["embedding"] if embedding is None else embedding
    if egs_alpha is not None:
        emb = egs_apply(emb, egs_alpha)
    x = tc.take_rows(emb, tokens)
    hidden_states = [x]
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        if policy.storage is Storage.HALF:
            x = tc.half_emulate(x)
        qkv = x @ params[p + "qkv.weight"] + params[p + "qkv.bias"]
        qkv = tc.transpose(qkv.reshape(L, 3, h, dh), (1, 2, 0, 3))  # [3, h, L, dh]
        ctx = attention(qkv[0], qkv[1], qkv[2], mask, policy, positions,
                        cfg.rope_base, rate, rng)
        ctx = tc.transpose(ctx, (1, 0, 2)).reshape(L, d)
        attn_out = tc.dropout(ctx @ params[p + "out.weight"] + params[p + "out.bias"], rate, rng)
        x = deepnorm_residual(x, attn_out, cfg.alpha, params[p + "ln1.gain"],
                              params[p + "ln1.bias"], cfg.layernorm_eps)
        if cfg.ffn == "geglu":
            f = geglu(x, params[p + "ffn.w1.weight"], params[p + "ffn.v.weight"],
                      params[p + "ffn.w2.weight"], params[p + "ffn.w1.bias"],
                      params[p + "ffn.v.bias"], params[p + "ffn.w2.bias"])
        else:
            f = tc.gelu(x @ params[p + "ffn.w1.weight"] + params[p + "ffn.w1.bias"])
            f = f @ params[p + "ffn.w2.weight"] + params[p + "ffn.w2.bias"]
        x = deepnorm_residual(x, tc.dropout(f, rate, rng), cfg.alpha,
                              params[p + "ln2.gain"], params[p + "ln2.bias"], cfg.layernorm_eps)
        hidden_states.append(x)
    logits = x @ tc.transpose(emb, (1, 0))
    if return_hidden:
        return logits, hidden_states
    return logits


def egs_apply(embedding: Tensor, alpha: float) -> Tensor:
    """Embedding gradient shrink: forward identity, backward gradient times ``alpha``."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"EGS alpha must be in (0, 1], got {alpha}")
    return tc.grad_scale(embedding, alpha)


def loss_blank_infilling(logits: Tensor, sample) -> Tensor:
    """Mean negative log-likelihood over span tokens and end-of-span markers."""
    weights = np.asarray(sample.target_mask, dtype=np.float64)
    if not weights.any():
        warnings.warn("sample has no prediction targets; loss is 0", EmptyTargetWarning,
                      stacklevel=2)
        return Tensor(0.0)
    targets = np.where(sample.target_mask, sample.targets, 0)
    return tc.cross_entropy(logits, targets, weights)
