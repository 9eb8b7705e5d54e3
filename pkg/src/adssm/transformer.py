"""Causal transformer over the same embedded-token interface as the SSM backbone.

Pre-norm residual blocks (multi-head causal attention, GELU feed-forward) with
a fixed sinusoidal absolute position code.  Inference recomputes the whole
buffered context for every new token; there is no key/value cache.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor


class ContextOverflowError(ValueError):
    pass


@dataclass
class TransformerConfig:
    num_layers: int = 4
    num_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_context: int = 4096
    embed_dim: int = 32
    pos_encoding: str = "sinusoidal"

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "d_model", "d_ff", "max_context", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.pos_encoding != "sinusoidal":
            raise ValueError(f"unsupported pos_encoding {self.pos_encoding!r}")


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim), np.float32)
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return pe


def _causal_bias(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), -1e9, np.float32), k=1)


class CausalSelfAttention(Module):
    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator, out_scale: float = 1.0):
        if d_model % num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        self.h = num_heads
        self.dh = d_model // num_heads
        self.qkv = Linear(d_model, 3 * d_model, rng)
        self.out = Linear(d_model, d_model, rng, init_scale=out_scale)

    def attention_weights(self, x: Tensor) -> Tensor:
        return self._forward(x)[1]

    def _forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        B, L, D = x.shape
        qkv = T.permute(T.reshape(self.qkv(x), (B, L, 3, self.h, self.dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]                     # (B, H, L, dh)
        scores = T.matmul(q, T.transpose_last2(k)) * (1.0 / np.sqrt(self.dh))
        w = T.softmax_lastdim(scores + _causal_bias(L))
        y = T.permute(T.matmul(w, v), (0, 2, 1, 3))        # (B, L, H, dh)
        return self.out(T.reshape(y, (B, L, D))), w

    def forward(self, x: Tensor) -> Tensor:
        return self._forward(x)[0]


class TransformerBlock(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        scale = 1.0 / np.sqrt(2 * cfg.num_layers)
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg.d_model, cfg.num_heads, rng, out_scale=scale)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ff1 = Linear(cfg.d_model, cfg.d_ff, rng)
        self.ff2 = Linear(cfg.d_ff, cfg.d_model, rng, init_scale=scale)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ff2(T.gelu(self.ff1(self.ln2(x))))


class TransformerState:
    """Buffered embeddings for recompute-per-step inference."""

    def __init__(self, batch: int, owner: "CausalTransformer"):
        self.buf = np.zeros((batch, 0, owner.cfg.embed_dim), np.float32)
        self.owner = owner

    @property
    def tokens_seen(self) -> int:
        return self.buf.shape[1]

    def reset(self) -> None:
        self.buf = self.buf[:, :0]


class CausalTransformer(Module):
    """Embedded tokens (width ``embed_dim``) -> per-position action predictions."""

    kind = "transformer"

    def __init__(self, cfg: TransformerConfig, out_dim: int, rng: np.random.Generator):
        self.cfg = cfg
        self.out_dim = out_dim
        self.in_proj = Linear(cfg.embed_dim, cfg.d_model, rng)
        self.blocks = [TransformerBlock(cfg, rng) for _ in range(cfg.num_layers)]
        self.norm_f = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, out_dim, rng, init_scale=0.5)
        self._pe = sinusoidal_positions(cfg.max_context, cfg.d_model)

    def forward(self, emb: Tensor) -> Tensor:
        if emb.ndim != 3 or emb.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"transformer expects (B, L, {self.cfg.embed_dim}), got {emb.shape}")
        L = emb.shape[1]
        if L > self.cfg.max_context:
            raise ContextOverflowError(f"length {L} exceeds max_context {self.cfg.max_context}")
        x = self.in_proj(emb) + self._pe[:L]
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm_f(x))

    def init_state(self, batch: int) -> TransformerState:
        return TransformerState(batch, self)

    def step(self, state: TransformerState, emb: np.ndarray) -> np.ndarray:
        """Append one embedded token and recompute the full context; returns the last output."""
        if state.owner is not self:
            raise ValueError("state belongs to a different model")
        if state.tokens_seen >= self.cfg.max_context:
            raise ContextOverflowError(f"context full ({self.cfg.max_context} tokens)")
        state.buf = np.concatenate([state.buf, emb[:, None].astype(np.float32)], axis=1)
        with T.no_grad():
            return self.forward(Tensor(state.buf)).data[:, -1]


def dt_forward(model: CausalTransformer, emb: Tensor) -> Tensor:
    return model(emb)


def causal_attention(layer: CausalSelfAttention, x: Tensor) -> Tensor:
    return layer(x)
