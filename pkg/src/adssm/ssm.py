"""Selective state-space (S6) layers and a Mamba-style backbone.

Two execution paths share one parameter set:

* ``forward`` runs a whole sequence through a fused, chunked scan that is
  differentiable on the tape (training, teacher forcing);
* ``step`` advances an explicit recurrent state by one token with numpy only
  (constant time and memory per token; used at inference).

Shapes: batch ``B``, length ``L``, model width ``d_model``, inner width
``d_inner = expand * d_model``, state size ``N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Linear, Module, RMSNorm, param
from .tensor import ShapeError, Tensor


def hippo_init(n: int) -> np.ndarray:
    """Diagonal HiPPO state matrix: entry n is -(n+1)."""
    if n < 1:
        raise ValueError(f"state size must be >= 1, got {n}")
    return -np.arange(1, n + 1, dtype=np.float32)


def discretize(a_diag: np.ndarray, b: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold for A, Euler for B.

    ``delta`` broadcasts against both ``a_diag`` and ``b``.
    """
    delta = np.asarray(delta)
    if np.any(delta <= 0):
        raise ValueError("discretize: step size must be strictly positive")
    return np.exp(delta * a_diag), delta * b


def _softplus_inverse(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


@dataclass
class BackboneConfig:
    num_layers: int = 4
    d_model: int = 128
    embed_dim: int = 32
    state_size: int = 16
    conv_width: int = 4
    expand: int = 3
    dt_rank: int = 32
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    def __post_init__(self):
        for name in ("num_layers", "d_model", "embed_dim", "state_size", "conv_width", "expand",
                     "dt_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"BackboneConfig.{name} must be positive")
        if self.embed_dim > self.d_model:
            raise ValueError("BackboneConfig.embed_dim must not exceed d_model")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


# ------------------------------------------------------------------ fused scan


# Above this many state elements (B * L * d_inner * N) the forward pass keeps only
# chunk-boundary states and the backward pass recomputes the rest.
SCAN_CACHE_ELEMS = 1 << 25


def _chunk_tensors(u, delta, a, bm, s, e):
    dA = delta[:, s:e, :, None] * a
    np.exp(dA, out=dA)
    dBu = (delta[:, s:e] * u[:, s:e])[:, :, :, None] * bm[:, s:e, None, :]
    return dA, dBu


def _chunk_states(dA, dBu, h):
    hs = np.empty_like(dA)
    for i in range(dA.shape[1]):
        h = dA[:, i] * h
        h += dBu[:, i]
        hs[:, i] = h
    return hs


def selective_scan_fused(u: Tensor, delta: Tensor, a: Tensor, bm: Tensor, cm: Tensor,
                         d_skip: Tensor, chunk: int = 64, cache: bool | None = None) -> Tensor:
    """y_t = C_t . h_t + D * u_t with h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t.

    With ``cache`` off only the state at each chunk boundary is kept and the
    backward pass recomputes the states inside a chunk, so memory is
    O(B * L * d_inner + B * chunk * d_inner * N).  By default the full
    intermediates are cached when they fit under ``SCAN_CACHE_ELEMS``.
    """
    B, L, Di = u.shape
    N = a.shape[-1]
    if delta.shape != u.shape or a.shape != (Di, N) or bm.shape != (B, L, N) or cm.shape != (B, L, N):
        raise ShapeError(
            f"selective_scan: u{u.shape} delta{delta.shape} A{a.shape} B{bm.shape} C{cm.shape}")
    if cache is None:
        cache = B * L * Di * N <= SCAN_CACHE_ELEMS
    ud, dd, ad, bd, cd, Dd = u.data, delta.data, a.data, bm.data, cm.data, d_skip.data
    y = np.empty_like(ud)
    starts = list(range(0, L, chunk))
    h = np.zeros((B, Di, N), dtype=ud.dtype)
    saved, kept = [], []
    for s in starts:
        e = min(s + chunk, L)
        saved.append(h)
        dA, dBu = _chunk_tensors(ud, dd, ad, bd, s, e)
        hs = _chunk_states(dA, dBu, h)
        h = hs[:, -1]
        y[:, s:e] = np.matmul(hs, cd[:, s:e, :, None])[..., 0]
        if cache:
            kept.append((dA, hs))
    y += ud * Dd

    def grad_fn(gy):
        gu = gy * Dd
        gdelta = np.empty_like(dd)
        ga = np.zeros_like(ad)
        gb = np.empty_like(bd)
        gc = np.empty_like(cd)
        gD = np.einsum("btd,btd->d", gy, ud)
        carry = np.zeros((B, Di, N), dtype=ud.dtype)
        for ci in range(len(starts) - 1, -1, -1):
            s = starts[ci]
            e = min(s + chunk, L)
            if cache:
                dA, hs = kept[ci]
            else:
                dA, dBu = _chunk_tensors(ud, dd, ad, bd, s, e)
                hs = _chunk_states(dA, dBu, saved[ci])
                del dBu
            g = gy[:, s:e]
            gc[:, s:e] = np.matmul(g[:, :, None, :], hs)[:, :, 0]
            gh = g[:, :, :, None] * cd[:, s:e, None, :]
            for i in range(e - s - 1, -1, -1):
                gh[:, i] += carry
                carry = gh[:, i] * dA[:, i]
            # gdA = gh * h_{t-1} * dA, built in place over a shifted copy of the states
            gdA = np.empty_like(hs)
            gdA[:, 0] = saved[ci]
            gdA[:, 1:] = hs[:, :-1]
            gdA *= dA
            gdA *= gh
            dlt = dd[:, s:e]
            gdelta[:, s:e] = np.einsum("btdn,dn->btd", gdA, ad)
            ga += np.einsum("btdn,btd->dn", gdA, dlt)
            du = dlt * ud[:, s:e]
            gdu = np.matmul(gh, bd[:, s:e, :, None])[..., 0]
            gb[:, s:e] = np.matmul(du[:, :, None, :], gh)[:, :, 0]
            gdelta[:, s:e] += gdu * ud[:, s:e]
            gu[:, s:e] += gdu * dlt
        return gu, gdelta, ga, gb, gc, gD

    return T.custom_op(y, (u, delta, a, bm, cm, d_skip), grad_fn, "selective_scan")


def selective_scan_reference(u: Tensor, delta: Tensor, a: Tensor, bm: Tensor, cm: Tensor,
                             d_skip: Tensor) -> Tensor:
    """Same map composed from generic tape ops (materializes every state)."""
    dA = T.exp(T.reshape(delta, delta.shape + (1,)) * a)
    du = T.reshape(delta * u, u.shape + (1,))
    dBu = du * T.reshape(bm, (bm.shape[0], bm.shape[1], 1, bm.shape[2]))
    B, L, Di, N = dA.shape
    h = T.cumulative_scan_linear(T.reshape(dA, (B, L, Di * N)), T.reshape(dBu, (B, L, Di * N)))
    h = T.reshape(h, (B, L, Di, N))
    y = T.sum(h * T.reshape(cm, (B, L, 1, N)), axis=-1)
    return y + u * d_skip


# ------------------------------------------------------------------- layers


@dataclass
class SsmState:
    """Recurrent state of one Mamba block for a batch of streams."""

    h: np.ndarray
    conv: np.ndarray
    owner: int
    tokens_seen: int = 0

    def reset(self) -> None:
        self.h[...] = 0
        self.conv[...] = 0
        self.tokens_seen = 0


class SelectiveSSM(Module):
    """S6 layer: input-dependent B, C and step size over a diagonal A."""

    def __init__(self, d_inner: int, cfg: BackboneConfig, rng: np.random.Generator):
        N, R = cfg.state_size, cfg.dt_rank
        self.d_inner, self.state_size, self.dt_rank = d_inner, N, R
        self.x_proj = Linear(d_inner, R + 2 * N, rng, bias=False)
        self.dt_proj = Linear(R, d_inner, rng)
        dt = np.exp(rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), d_inner))
        self.dt_proj.bias.data = _softplus_inverse(dt).astype(np.float32)
        # A = -exp(A_log) stays negative under any update
        self.A_log = param(np.tile(np.log(-hippo_init(N)), (d_inner, 1)))
        self.D = param(np.ones(d_inner))

    def A(self) -> np.ndarray:
        return -np.exp(self.A_log.data)

    def _projections(self, x: Tensor):
        R, N = self.dt_rank, self.state_size
        xdbc = self.x_proj(x)
        delta = T.softplus(self.dt_proj(xdbc[..., :R]))
        return delta, xdbc[..., R:R + N], xdbc[..., R + N:]

    def forward(self, x: Tensor, fused: bool = True) -> Tensor:
        if x.shape[-1] != self.d_inner:
            raise ShapeError(f"SelectiveSSM expects width {self.d_inner}, got {x.shape}")
        delta, bm, cm = self._projections(x)
        a = -T.exp(self.A_log)
        scan = selective_scan_fused if fused else selective_scan_reference
        return scan(x, delta, a, bm, cm, self.D)

    def step_np(self, h: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        R, N = self.dt_rank, self.state_size
        xdbc = x @ self.x_proj.weight.data
        delta = T._softplus(self.dt_proj.apply_np(xdbc[:, :R]))
        bm, cm = xdbc[:, R:R + N], xdbc[:, R + N:]
        dA, dB = discretize(self.A(), bm[:, None, :], delta[:, :, None])
        h = dA * h + dB * x[:, :, None]
        y = np.einsum("bdn,bn->bd", h, cm) + self.D.data * x
        return h, y


def selective_scan(x: Tensor, layer: SelectiveSSM) -> Tensor:
    return layer(x)


class MambaBlock(Module):
    """Pre-norm residual block: in-proj, causal depthwise conv, SiLU, S6, gate, out-proj."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, zero_out: bool = False):
        D, Di, K = cfg.d_model, cfg.d_inner, cfg.conv_width
        self.d_model, self.d_inner, self.conv_width = D, Di, K
        self.norm = RMSNorm(D)
        self.in_proj = Linear(D, 2 * Di, rng, bias=False)
        self.conv_weight = param(rng.uniform(-1, 1, (K, Di)) / math.sqrt(K))
        self.conv_bias = param(np.zeros(Di))
        self.ssm = SelectiveSSM(Di, cfg, rng)
        self.out_proj = Linear(Di, D, rng, bias=False,
                               init_scale=1.0 / math.sqrt(2 * cfg.num_layers))
        if zero_out:
            self.out_proj.weight.data[...] = 0

    def _conv(self, x: Tensor) -> Tensor:
        B, L, Di = x.shape
        K = self.conv_width
        padded = T.concat([T.zeros((B, K - 1, Di)), x], axis=1)
        out = self.conv_bias
        for k in range(K):
            out = out + padded[:, k:k + L] * self.conv_weight[k]
        return out

    def forward(self, x: Tensor, fused: bool = True) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise ShapeError(f"MambaBlock expects (B, L, {self.d_model}), got {x.shape}")
        xz = self.in_proj(self.norm(x))
        xi, z = xz[..., :self.d_inner], xz[..., self.d_inner:]
        xi = T.silu(self._conv(xi))
        y = self.ssm(xi, fused=fused) * T.silu(z)
        return x + self.out_proj(y)

    def init_state(self, batch: int) -> SsmState:
        return SsmState(
            h=np.zeros((batch, self.d_inner, self.ssm.state_size), dtype=np.float32),
            conv=np.zeros((batch, self.conv_width - 1, self.d_inner), dtype=np.float32),
            owner=id(self),
        )

    def step(self, state: SsmState, x: np.ndarray) -> tuple[SsmState, np.ndarray]:
        """Advance by one token. ``x`` has shape (batch, d_model)."""
        if state.owner != id(self) or state.h.shape[0] != x.shape[0]:
            raise ValueError("SsmState does not belong to this block or batch size differs")
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"step expects width {self.d_model}, got {x.shape}")
        xz = self.in_proj.apply_np(self.norm.apply_np(x))
        xi, z = xz[:, :self.d_inner], xz[:, self.d_inner:]
        window = np.concatenate([state.conv, xi[:, None, :]], axis=1)
        conv = np.einsum("bkd,kd->bd", window, self.conv_weight.data) + self.conv_bias.data
        state.conv = window[:, 1:]
        xc = conv * T._sigmoid(conv)
        state.h, y = self.ssm.step_np(state.h, xc)
        y = y * (z * T._sigmoid(z))
        state.tokens_seen += 1
        return state, x + self.out_proj.apply_np(y)


class MambaBackbone(Module):
    """Embedded tokens (width ``embed_dim``) -> per-position action predictions."""

    kind = "ssm"

    def __init__(self, cfg: BackboneConfig, out_dim: int, rng: np.random.Generator,
                 zero_out: bool = False):
        self.cfg = cfg
        self.out_dim = out_dim
        self.in_proj = Linear(cfg.embed_dim, cfg.d_model, rng)
        self.blocks = [MambaBlock(cfg, rng, zero_out) for _ in range(cfg.num_layers)]
        self.norm_f = RMSNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, out_dim, rng, init_scale=0.5)

    def forward(self, emb: Tensor, fused: bool = True) -> Tensor:
        if emb.ndim != 3 or emb.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"backbone expects (B, L, {self.cfg.embed_dim}), got {emb.shape}")
        x = self.in_proj(emb)
        for blk in self.blocks:
            x = blk(x, fused=fused)
        return self.head(self.norm_f(x))

    def init_state(self, batch: int) -> list[SsmState]:
        return [blk.init_state(batch) for blk in self.blocks]

    def step(self, states: list[SsmState], emb: np.ndarray) -> np.ndarray:
        x = self.in_proj.apply_np(emb)
        for blk, st in zip(self.blocks, states):
            _, x = blk.step(st, x)
        return self.head.apply_np(self.norm_f.apply_np(x))


def backbone_forward(model: MambaBackbone, emb: Tensor) -> Tensor:
    return model(emb)
