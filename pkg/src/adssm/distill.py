"""Distilling learning histories into a sequence model, and testing it in context.

Model input at position t is the sum of two embeddings: the previous completed
transition ``c_{t-1}`` and the query token ``q_t`` (the current observation with
the action, reward and next-observation fields zero-filled).  The model predicts
``a_t`` at every position, so a training window of c transitions gives c
supervised positions, and rollout inference is one backbone step per env step.

Besides the action mean the head emits a per-dimension variance, regressed onto
the squared residual of the (detached) mean.  Rollouts act on the mean by
default, or sample from ``N(mean, var)``; see :class:`RunConfig.eval_sampling`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as D
from . import envs
from . import tensor as T
from .nn import Adam, Linear, Module, cosine_lr
from .source_rl import TEST_SEED_BASE, derive_rng, test_task
from .ssm import BackboneConfig, MambaBackbone
from .tensor import ShapeError, Tensor
from .transformer import CausalTransformer, TransformerConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ADCKPT01"
CKPT_VERSION = 1
VAR_FLOOR = 1e-4


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    """Non-finite loss; the last good checkpoint has been written if a path was given."""


class FrozenWeightsViolation(RuntimeError):
    pass


# -------------------------------------------------------------------- config


@dataclass
class RunConfig:
    model: str = "ssm"
    env_id: str = "point-reacher-goal"
    ssm: dict = field(default_factory=dict)
    transformer: dict = field(default_factory=dict)
    context: int | str = 80           # transitions per window, or "full"
    downsample_k: int = 4
    noise_sigma: float = 0.01
    epochs: float = 30
    max_steps: int | None = None      # overrides epochs when set
    batch_size: int = 16
    peak_lr: float = 3e-4
    warmup_frac: float = 0.1
    weight_decay: float = 5e-4
    grad_clip: float = 1.0
    var_weight: float = 1.0
    standardize: bool = False
    seed: int = 0
    log_every: int = 50
    eval_sampling: str = "mean"       # "mean", or "sample" from the variance head
    eval_episodes: int = 40

    def __post_init__(self):
        if self.model not in ("ssm", "transformer"):
            raise ConfigError(f"model must be 'ssm' or 'transformer', got {self.model!r}")
        if self.env_id not in envs.ENV_IDS:
            raise ConfigError(f"unknown env_id {self.env_id!r}")
        if not (self.context == "full" or (isinstance(self.context, int) and self.context >= 1)):
            raise ConfigError("context must be a positive int or 'full'")
        for name in ("downsample_k", "batch_size", "log_every", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("epochs", "peak_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must be in [0, 1)")
        if self.noise_sigma < 0 or self.weight_decay < 0 or self.var_weight < 0:
            raise ConfigError("noise_sigma, weight_decay and var_weight must be >= 0")
        if self.eval_sampling not in ("sample", "mean"):
            raise ConfigError("eval_sampling must be 'sample' or 'mean'")
        try:
            self.ssm_config()
            self.transformer_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def ssm_config(self) -> BackboneConfig:
        return BackboneConfig(**self.ssm)

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(**self.transformer)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self) -> dict:
        """Every field including nested backbone defaults."""
        d = self.to_dict()
        d["ssm"] = asdict(self.ssm_config())
        d["transformer"] = asdict(self.transformer_config())
        return d


# --------------------------------------------------------------------- model


class TokenEmbedder(Module):
    """(previous transition, query token) -> one embedding per position."""

    def __init__(self, token_dim: int, embed_dim: int, rng: np.random.Generator):
        self.ctx = Linear(token_dim, embed_dim, rng)
        self.query = Linear(token_dim, embed_dim, rng, bias=False)

    def forward(self, prev: Tensor, query: Tensor) -> Tensor:
        return self.ctx(prev) + self.query(query)

    def apply_np(self, prev: np.ndarray, query: np.ndarray) -> np.ndarray:
        return self.ctx.apply_np(prev) + self.query.apply_np(query)


class ADModel(Module):
    def __init__(self, cfg: RunConfig, obs_dim: int = envs.OBS_DIM, act_dim: int = envs.ACT_DIM,
                 rng: np.random.Generator | None = None, norm: D.Standardizer | None = None):
        rng = rng if rng is not None else derive_rng(cfg.seed, 2)
        self.cfg = cfg
        self.obs_dim, self.act_dim = obs_dim, act_dim
        width = D.token_width(obs_dim, act_dim)
        self.norm = norm or D.Standardizer.identity(width)
        if cfg.model == "ssm":
            bcfg = cfg.ssm_config()
            self.embed = TokenEmbedder(width, bcfg.embed_dim, rng)
            self.backbone = MambaBackbone(bcfg, 2 * act_dim, rng)
        else:
            tcfg = cfg.transformer_config()
            self.embed = TokenEmbedder(width, tcfg.embed_dim, rng)
            self.backbone = CausalTransformer(tcfg, 2 * act_dim, rng)

    @property
    def kind(self) -> str:
        return self.backbone.kind

    def _inputs(self, prev: np.ndarray, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.norm(prev), D.query_tokens(self.norm(tokens), self.obs_dim)

    def forward(self, prev: np.ndarray, tokens: np.ndarray) -> tuple[Tensor, Tensor]:
        """prev, tokens: (B, L, W).  Returns action mean and variance, each (B, L, act)."""
        p, q = self._inputs(prev, tokens)
        out = self.backbone(self.embed(Tensor(p), Tensor(q)))
        a = self.act_dim
        return out[..., :a], T.softplus(out[..., a:]) + VAR_FLOOR

    def embed_np(self, prev: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        p, q = self._inputs(prev, tokens)
        return self.embed.apply_np(p, q).astype(np.float32)

    def split_np(self, out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = self.act_dim
        return out[..., :a], T._softplus(out[..., a:]) + VAR_FLOOR


def prev_tokens(tokens: np.ndarray, first_prev: np.ndarray) -> np.ndarray:
    """Shift a (B, L, W) window right by one, filling slot 0 with ``first_prev``."""
    return np.concatenate([first_prev[:, None], tokens[:, :-1]], axis=1)


# --------------------------------------------------------------------- losses


def ad_mse_loss(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over unmasked (batch, position) entries and action dims."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ShapeError(f"ad_mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target.astype(pred.dtype)
    sq = diff * diff
    if mask is None:
        return T.mean(sq)
    m = np.broadcast_to(np.asarray(mask, pred.dtype).reshape(mask.shape + (1,) * (pred.ndim - mask.ndim)),
                        pred.shape)
    count = m.sum()
    if count == 0:
        raise ValueError("ad_mse_loss: every position is masked")
    return T.sum(sq * m) / float(count)


def ad_nll_loss(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of integer ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets)
    n = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"ad_nll_loss: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= n or
                         not np.issubdtype(targets.dtype, np.integer)):
        raise ValueError(f"ad_nll_loss: targets must be integers in [0, {n})")
    z = logits - np.max(logits.data, axis=-1, keepdims=True)
    logz = T.log(T.sum(T.exp(z), axis=-1))
    onehot = np.eye(n, dtype=logits.dtype)[targets]
    picked = T.sum(z * onehot, axis=-1)
    return T.mean(logz - picked)


def variance_loss(var: Tensor, mean: Tensor, target: np.ndarray) -> Tensor:
    resid = (mean.data - target) ** 2
    d = var - resid
    return T.mean(d * d)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict[str, np.ndarray]
    step: int
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        head = json.dumps({"kind": self.kind, "config": self.config, "meta": self.meta},
                          sort_keys=True).encode()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<III", CKPT_VERSION, len(head), len(self.params)))
        buf.write(head)
        buf.write(struct.pack("<Q", self.step))
        for name, arr in self.params.items():
            nb = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            buf.write(struct.pack("<HB", len(nb), arr.ndim))
            buf.write(nb)
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        try:
            if raw[:8] != CKPT_MAGIC:
                raise CheckpointError("not an ADCKPT01 checkpoint")
            version, hlen, n = struct.unpack_from("<III", raw, 8)
            if version != CKPT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            off = 20
            head = json.loads(raw[off:off + hlen])
            off += hlen
            (step,) = struct.unpack_from("<Q", raw, off)
            off += 8
            params = {}
            for _ in range(n):
                ln, nd = struct.unpack_from("<HB", raw, off)
                off += 3
                name = raw[off:off + ln].decode()
                off += ln
                shape = struct.unpack_from(f"<{nd}I", raw, off)
                off += 4 * nd
                size = int(np.prod(shape, dtype=np.int64)) * 4
                if off + size > len(raw):
                    raise CheckpointError("checkpoint truncated")
                params[name] = np.frombuffer(raw, "<f4", size // 4, off).reshape(shape).copy()
                off += size
            if off != len(raw):
                raise CheckpointError("trailing bytes after checkpoint body")
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from None
        return cls(head["kind"], head["config"], params, step, head.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def make_checkpoint(model: ADModel, step: int) -> Checkpoint:
    meta = {"norm_mean": model.norm.mean.tolist(), "norm_std": model.norm.std.tolist()}
    return Checkpoint(model.kind, model.cfg.resolved(), model.state_dict(), step, meta)


def model_from_checkpoint(ckpt: Checkpoint) -> ADModel:
    cfg = RunConfig.from_dict(ckpt.config)
    if cfg.model != ckpt.kind:
        raise CheckpointError(f"checkpoint kind {ckpt.kind!r} disagrees with config {cfg.model!r}")
    norm = D.Standardizer(np.asarray(ckpt.meta["norm_mean"], np.float32),
                          np.asarray(ckpt.meta["norm_std"], np.float32))
    model = ADModel(cfg, norm=norm)
    try:
        model.load_state_dict(ckpt.params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint incompatible with its config: {exc}") from None
    return model


def params_hash(model: Module) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ training


def resolve_context(cfg: RunConfig, ds: D.Dataset) -> int:
    c = ds.seq_len if cfg.context == "full" else int(cfg.context)
    if c > ds.seq_len:
        raise ConfigError(f"context {c} exceeds the downsampled history length {ds.seq_len}")
    if cfg.model == "transformer" and c > cfg.transformer_config().max_context:
        raise ConfigError(f"context {c} exceeds transformer max_context")
    return c


def total_steps(cfg: RunConfig, ds: D.Dataset, c: int) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    tokens = sum(len(s) for s in ds.sequences)
    per_epoch = math.ceil(tokens / (cfg.batch_size * c))
    return max(1, int(round(cfg.epochs * per_epoch)))


def sample_batch(ds: D.Dataset, batch: int, c: int, rng: np.random.Generator, sigma: float
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(prev, tokens, targets) for ``batch`` windows drawn from uniformly chosen tasks."""
    width = ds.sequences[0].width
    prev = np.zeros((batch, c, width), np.float32)
    toks = np.zeros((batch, c, width), np.float32)
    tgts = np.zeros((batch, c, ds.sequences[0].act_dim), np.float32)
    for b, i in enumerate(rng.integers(0, len(ds.sequences), batch)):
        seq = ds.sequences[i]
        w = D.sample_window(seq, c, rng)
        first = seq.tokens[w.start - 1] if w.start > 0 else np.zeros(width, np.float32)
        both = np.concatenate([first[None], w.tokens])
        both = D.augment_noise(D.Window(both, w.targets, w.start), sigma, rng).tokens
        prev[b], toks[b], tgts[b] = both[:-1], both[1:], w.targets
    return prev, toks, tgts


def _clip_grads(params: list[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                          for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[tuple[int, float, float, float]]   # (step, lr, mse, total)
    context: int

    def loss_csv(self) -> str:
        lines = ["step,lr,mse,total"]
        lines += [f"{s},{lr:.8g},{m:.8g},{t:.8g}" for s, lr, m, t in self.losses]
        return "\n".join(lines) + "\n"


def train_ad(ds: D.Dataset, cfg: RunConfig, ckpt_path: str | Path | None = None,
             progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fit the AD objective on ``ds``; deterministic given ``cfg.seed``."""
    if ds.env_id != cfg.env_id:
        raise ConfigError(f"dataset env {ds.env_id!r} does not match config {cfg.env_id!r}")
    c = resolve_context(cfg, ds)
    steps = total_steps(cfg, ds, c)
    norm = D.Standardizer.fit(ds.sequences) if cfg.standardize else None
    model = ADModel(cfg, ds.sequences[0].obs_dim, ds.sequences[0].act_dim,
                    derive_rng(cfg.seed, 2), norm)
    params = model.parameters()
    opt = Adam(params, lr=cfg.peak_lr, weight_decay=cfg.weight_decay)
    rng = derive_rng(cfg.seed, 3)
    losses = []
    last_good = make_checkpoint(model, 0)
    for step in range(steps):
        prev, toks, tgts = sample_batch(ds, cfg.batch_size, c, rng, cfg.noise_sigma)
        lr = cosine_lr(step, steps, cfg.peak_lr, cfg.warmup_frac)
        opt.zero_grad()
        mean, var = model.forward(prev, toks)
        mse = ad_mse_loss(mean, tgts)
        loss = mse + variance_loss(var, mean, tgts) * cfg.var_weight if cfg.var_weight else mse
        lv = loss.item()
        if not math.isfinite(lv):
            if ckpt_path is not None:
                last_good.save(ckpt_path)
            raise TrainingDiverged(f"non-finite loss at step {step} (lr {lr:.3g}); "
                                   f"last good state is step {last_good.step}")
        loss.backward()
        _clip_grads(params, cfg.grad_clip)
        opt.step(lr=lr)
        if step % cfg.log_every == 0 or step == steps - 1:
            losses.append((step, lr, mse.item(), lv))
            last_good = make_checkpoint(model, step + 1)
            if progress:
                progress(step, mse.item())
    ckpt = make_checkpoint(model, steps)
    if ckpt_path is not None:
        ckpt.save(ckpt_path)
    return TrainResult(ckpt, losses, c)


def smoothed(values, frac: float = 0.1) -> tuple[float, float]:
    """Mean of the first and last ``frac`` of a loss curve."""
    v = np.asarray(values, float)
    n = max(1, int(len(v) * frac))
    return float(v[:n].mean()), float(v[-n:].mean())


# ------------------------------------------------------------------ rollouts


class _Context:
    """Inference-time context: recurrent state or a sliding window of embeddings."""

    def __init__(self, model: ADModel, batch: int, window: int | None):
        self.model = model
        self.window = window
        if window is None:
            if model.kind != "ssm":
                raise ConfigError("unbounded context needs the recurrent (ssm) backbone")
            self.states = model.backbone.init_state(batch)
        else:
            self.buf = np.zeros((batch, 0, model.embed.ctx.d_out), np.float32)

    def push(self, emb: np.ndarray) -> np.ndarray:
        if self.window is None:
            return self.model.backbone.step(self.states, emb)
        self.buf = np.concatenate([self.buf, emb[:, None]], axis=1)[:, -self.window:]
        with T.no_grad():
            return self.model.backbone(Tensor(self.buf)).data[:, -1]


def icrl_rollout(model: ADModel | Checkpoint, tasks: list[envs.TaskSpec], num_episodes: int,
                 rng: np.random.Generator | int, context: int | None = None,
                 sampling: str | None = None) -> np.ndarray:
    """Let the frozen model interact with ``tasks``; returns (n_tasks, num_episodes) returns.

    ``context=None`` keeps an unbounded recurrent state (ssm only); an int keeps
    a sliding window of that many positions.
    """
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    sampling = sampling or model.cfg.eval_sampling
    before = params_hash(model)
    n = len(tasks)
    width = D.token_width(model.obs_dim, model.act_dim)
    ctx = _Context(model, n, context)
    prev = np.zeros((n, width), np.float32)
    out = np.zeros((n, num_episodes))
    with T.no_grad():
        for e in range(num_episodes):
            state, obs = envs.reset(tasks, rng)
            while not state.done:
                cur = np.zeros((n, width), np.float32)
                cur[:, :model.obs_dim] = obs
                y = ctx.push(model.embed_np(prev, cur))
                mean, var = model.split_np(y)
                act = mean + np.sqrt(var) * rng.standard_normal(mean.shape) if sampling == "sample" else mean
                act = np.clip(act, -1.0, 1.0).astype(np.float32)
                state, nxt, r, _ = envs.step(state, act)
                prev = np.concatenate([obs, act, r[:, None], nxt], axis=1).astype(np.float32)
                obs = nxt
                out[:, e] += r
    if params_hash(model) != before:
        raise FrozenWeightsViolation("parameters changed during rollout")
    return out


def rollout_context(cfg: RunConfig, trained_context: int, full_len: int) -> int | None:
    """Recurrent state for an ssm trained on full histories, else a sliding window."""
    if cfg.model == "ssm" and trained_context >= full_len:
        return None
    return trained_context


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    env_id: str
    returns: np.ndarray         # (seeds, tasks, episodes)
    seeds: list[int]
    task_seeds: list[int]
    oracle: float
    random: float
    label: str = ""

    @property
    def curve_mean(self) -> np.ndarray:
        return self.returns.mean(axis=(0, 1))

    @property
    def curve_std(self) -> np.ndarray:
        # spread across pre-training seeds of the per-seed task-mean curve
        return self.returns.mean(axis=1).std(axis=0)

    def final_mean(self, last: int = 10) -> float:
        return float(self.returns[:, :, -last:].mean())

    def first_mean(self, first: int = 10) -> float:
        return float(self.returns[:, :, :first].mean())

    def normalized_final(self, last: int = 10) -> float:
        return float(envs.normalized(self.final_mean(last), self.random, self.oracle))

    def to_csv(self) -> str:
        lines = ["seed,task,episode,return"]
        S, N, E = self.returns.shape
        for s in range(S):
            for t in range(N):
                for e in range(E):
                    lines.append(f"{self.seeds[s]},{self.task_seeds[t]},{e + 1},"
                                 f"{self.returns[s, t, e]:.6f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "env_id": self.env_id,
            "label": self.label,
            "seeds": self.seeds,
            "task_seeds": self.task_seeds,
            "num_rollouts": int(self.returns.shape[0] * self.returns.shape[1]),
            "episodes": int(self.returns.shape[2]),
            "mean_curve": [round(float(x), 6) for x in self.curve_mean],
            "std_curve": [round(float(x), 6) for x in self.curve_std],
            "first10_mean": round(self.first_mean(), 6),
            "final10_mean": round(self.final_mean(), 6),
            "final10_normalized": round(self.normalized_final(), 6),
            "oracle": round(self.oracle, 6),
            "random": round(self.random, 6),
        }

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_p, json_p = out / f"{stem}.csv", out / f"{stem}.json"
        csv_p.write_text(self.to_csv())
        json_p.write_text(json.dumps(self.summary(), indent=1, sort_keys=True))
        return csv_p, json_p


def reference_lines(tasks: list[envs.TaskSpec], seed: int) -> tuple[float, float]:
    """Mean per-episode oracle and random-policy returns on ``tasks``."""
    orc = envs.oracle_returns(tasks, derive_rng(seed, 5), episodes=1).mean()
    rnd = envs.random_returns(tasks, derive_rng(seed, 6), episodes=20).mean()
    return float(orc), float(rnd)


def _load_all(checkpoints) -> list[Checkpoint]:
    out, missing = [], []
    for i, c in enumerate(checkpoints):
        if isinstance(c, Checkpoint):
            out.append(c)
        elif isinstance(c, ADModel):
            out.append(make_checkpoint(c, 0))
        elif c is None or not Path(c).exists():
            missing.append(f"seed index {i}: {c}")
        else:
            out.append(Checkpoint.load(c))
    if missing:
        raise FileNotFoundError("missing checkpoints: " + "; ".join(missing))
    return out


def evaluate(checkpoints, env_id: str, num_test_tasks: int = 10, num_episodes: int | None = None,
             eval_seed: int = 0, contexts: list[int | None] | None = None, label: str = ""
             ) -> EvalReport:
    """Roll out every checkpoint on the same held-out tasks (seeds x tasks grid)."""
    ckpts = _load_all(checkpoints)
    tasks = [test_task(env_id, i) for i in range(num_test_tasks)]
    results, seeds = [], []
    for j, ck in enumerate(ckpts):
        model = model_from_checkpoint(ck)
        if model.cfg.env_id != env_id:
            raise ConfigError(f"checkpoint {j} was trained on {model.cfg.env_id!r}, not {env_id!r}")
        E = num_episodes or model.cfg.eval_episodes
        ctx = contexts[j] if contexts is not None else ck.meta.get("rollout_context")
        rng = derive_rng(eval_seed, 4, j)
        results.append(icrl_rollout(model, tasks, E, rng, ctx))
        seeds.append(model.cfg.seed)
    orc, rnd = reference_lines(tasks, eval_seed)
    return EvalReport(env_id, np.stack(results), seeds, [t.seed - TEST_SEED_BASE for t in tasks],
                      orc, rnd, label)


def train_for_eval(ds: D.Dataset, cfg: RunConfig, ckpt_path=None, progress=None) -> TrainResult:
    """train_ad plus the rollout context mode recorded in the checkpoint."""
    res = train_ad(ds, cfg, None, progress)
    res.checkpoint.meta["rollout_context"] = rollout_context(cfg, res.context, ds.seq_len)
    if ckpt_path is not None:
        res.checkpoint.save(ckpt_path)
    return res


def context_sweep(ds: D.Dataset, context_lengths: list[int | str], cfg: RunConfig,
                  seeds: list[int], num_test_tasks: int = 10, eval_seed: int = 0,
                  progress=None) -> dict[str, EvalReport]:
    """One trained-and-evaluated variant per context length, same data and seeds."""
    reports = {}
    for c in context_lengths:
        ckpts = []
        for s in seeds:
            vcfg = dataclasses.replace(cfg, context=c, seed=s)
            ckpts.append(train_for_eval(ds, vcfg, progress=progress).checkpoint)
        reports[str(c)] = evaluate(ckpts, cfg.env_id, num_test_tasks, eval_seed=eval_seed,
                                   label=f"context={c}")
    return reports


# ------------------------------------------------------------------ timing


def benchmark_inference(context_lengths: list[int], reps: int = 100, warmup: int = 3,
                        models: dict | None = None, seed: int = 0) -> list[dict]:
    """Median seconds per new token after ``length`` tokens of context, per model kind.

    The ssm advances its recurrent state; the transformer recomputes its whole
    buffered context for every token (no key/value cache).
    """
    if list(context_lengths) != sorted(context_lengths):
        raise ValueError("context lengths must be ascending")
    import time

    if models is None:
        longest = max(context_lengths) + warmup + reps + 1
        models = {
            "ssm": ADModel(RunConfig(model="ssm", seed=seed)),
            "transformer": ADModel(RunConfig(model="transformer", seed=seed,
                                             transformer={"max_context": max(4096, longest)})),
        }
    rng = np.random.default_rng(seed)
    rows = []
    for name, model in models.items():
        bb = model.backbone
        E = model.embed.ctx.d_out
        for L in context_lengths:
            prefix = rng.normal(size=(1, L, E)).astype(np.float32)
            tok = rng.normal(size=(1, E)).astype(np.float32)
            times = []
            if model.kind == "ssm":
                states = bb.init_state(1)
                for t in range(L):
                    bb.step(states, prefix[:, t])
                for i in range(warmup + reps):
                    t0 = time.perf_counter()
                    bb.step(states, tok)
                    times.append(time.perf_counter() - t0)
            else:
                st = bb.init_state(1)
                st.buf = prefix
                for i in range(warmup + reps):
                    st.buf = st.buf[:, :L]
                    t0 = time.perf_counter()
                    bb.step(st, tok)
                    times.append(time.perf_counter() - t0)
            rows.append({"model": name, "context": L,
                         "median_s_per_token": float(np.median(times[warmup:])),
                         "reps": reps,
                         "kv_cache": False if model.kind == "transformer" else None})
    return rows


def benchmark_csv(rows: list[dict]) -> str:
    lines = ["model,context,median_s_per_token,reps,note"]
    for r in rows:
        note = "recompute-per-step" if r["model"] == "transformer" else "recurrent-step"
        lines.append(f"{r['model']},{r['context']},{r['median_s_per_token']:.6e},{r['reps']},{note}")
    return "\n".join(lines) + "\n"
