"""Learning histories as files and as model-ready token streams.

A token is one packed transition ``(s, a, r, s')``.  The trajectory file only
stores ``(s, a, r)`` per step; ``s'`` is the next step's observation, and for
the final step of an episode it is recomputed from the (deterministic,
fully observed) dynamics.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import envs

MAGIC = b"ADTRAJ01"
VERSION = 1
_HEADER = struct.Struct("<8s5I")
_FOOTER = struct.Struct("<I")


class TrajectoryFormatError(ValueError):
    """Base class for unreadable trajectory files."""


class BadMagicError(TrajectoryFormatError):
    pass


class VersionError(TrajectoryFormatError):
    pass


class CrcError(TrajectoryFormatError):
    """Checksum mismatch, including truncated files."""


class DimensionError(ValueError):
    pass


# ------------------------------------------------------------------ file I/O


@dataclass
class TrajectoryFile:
    obs: np.ndarray       # (E, T, obs_dim) float32
    actions: np.ndarray   # (E, T, act_dim) float32
    rewards: np.ndarray   # (E, T) float32
    version: int = VERSION

    @property
    def num_episodes(self) -> int:
        return self.obs.shape[0]

    @property
    def episode_len(self) -> int:
        return self.obs.shape[1]

    def body(self) -> bytes:
        step = np.concatenate([self.obs, self.actions, self.rewards[..., None]], axis=-1)
        return np.ascontiguousarray(step, dtype="<f4").tobytes()


def _as_file(obj) -> TrajectoryFile:
    if isinstance(obj, TrajectoryFile):
        return obj
    return TrajectoryFile(np.asarray(obj.obs, np.float32), np.asarray(obj.actions, np.float32),
                          np.asarray(obj.rewards, np.float32))


def write_trajectory(path: str | Path, history) -> None:
    """Write a history (anything with obs/actions/rewards arrays) in the ADTRAJ01 format."""
    tf = _as_file(history)
    E, T, od = tf.obs.shape
    if tf.actions.shape[:2] != (E, T) or tf.rewards.shape != (E, T):
        raise DimensionError(f"inconsistent shapes obs {tf.obs.shape}, actions "
                             f"{tf.actions.shape}, rewards {tf.rewards.shape}")
    body = tf.body()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, od, tf.actions.shape[2], T, E))
        fh.write(body)
        fh.write(_FOOTER.pack(zlib.crc32(body)))


def read_trajectory(path: str | Path) -> TrajectoryFile:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:8] != MAGIC:
        raise BadMagicError(f"{path}: not an ADTRAJ01 file")
    if len(raw) < _HEADER.size + _FOOTER.size:
        raise CrcError(f"{path}: truncated")
    _, version, od, ad, T, E = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    width = od + ad + 1
    n_body = E * T * width * 4
    if len(raw) != _HEADER.size + n_body + _FOOTER.size:
        raise CrcError(f"{path}: expected {n_body} body bytes, file has "
                       f"{len(raw) - _HEADER.size - _FOOTER.size}")
    body = raw[_HEADER.size:_HEADER.size + n_body]
    (crc,) = _FOOTER.unpack_from(raw, _HEADER.size + n_body)
    if zlib.crc32(body) != crc:
        raise CrcError(f"{path}: CRC mismatch")
    arr = np.frombuffer(body, dtype="<f4").reshape(E, T, width).astype(np.float32)
    return TrajectoryFile(arr[..., :od].copy(), arr[..., od:od + ad].copy(),
                          arr[..., od + ad].copy(), version)


# --------------------------------------------------------------- histories


@dataclass
class History:
    """Minimal ordered history; source_rl.LearningHistory is also accepted everywhere."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    downsample_k: int = 1
    meta: dict = field(default_factory=dict)


def downsample(history, k: int):
    """Keep episodes 0, k, 2k, ... in order; the result records ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    E = history.obs.shape[0]
    if k > E:
        raise ValueError(f"k={k} exceeds the {E} episodes available")
    if k == 1:
        return history
    sel = slice(None, None, k)
    kw = dict(obs=history.obs[sel], actions=history.actions[sel], rewards=history.rewards[sel],
              downsample_k=getattr(history, "downsample_k", 1) * k)
    if hasattr(history, "policy_std") and history.policy_std:
        kw["policy_std"] = list(history.policy_std[sel])
    return replace(history, **kw)


def downsampled_count(num_episodes: int, k: int) -> int:
    return math.ceil(num_episodes / k)


@dataclass
class TokenSequence:
    tokens: np.ndarray      # (L, obs+act+1+obs)
    targets: np.ndarray     # (L, act)
    boundaries: np.ndarray  # start index of each episode
    obs_dim: int
    act_dim: int

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def token_width(obs_dim: int = envs.OBS_DIM, act_dim: int = envs.ACT_DIM) -> int:
    return 2 * obs_dim + act_dim + 1


def final_next_obs(obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Observation after each episode's last step, via the env dynamics."""
    od = obs.shape[-1] // 2
    pos, vel, _ = envs.dynamics(obs[:, -1, :od], obs[:, -1, od:], actions[:, -1])
    return envs.observe(pos, vel)


def pack_tokens(history) -> TokenSequence:
    obs = np.asarray(history.obs, np.float32)
    act = np.asarray(history.actions, np.float32)
    rew = np.asarray(history.rewards, np.float32)
    if obs.ndim != 3 or act.ndim != 3 or rew.ndim != 2:
        raise DimensionError("expected obs (E,T,o), actions (E,T,a), rewards (E,T)")
    E, T, od = obs.shape
    if act.shape[:2] != (E, T) or rew.shape != (E, T):
        raise DimensionError(f"episode dims disagree: obs {obs.shape}, actions {act.shape}, "
                             f"rewards {rew.shape}")
    nxt = np.concatenate([obs[:, 1:], final_next_obs(obs, act)[:, None]], axis=1)
    tok = np.concatenate([obs, act, rew[..., None], nxt], axis=-1).reshape(E * T, -1)
    return TokenSequence(tok, act.reshape(E * T, -1).copy(), np.arange(E) * T, od, act.shape[2])


def unpack(seq: TokenSequence) -> History:
    """Inverse of :func:`pack_tokens` (episode length from the boundary list)."""
    od, ad = seq.obs_dim, seq.act_dim
    E = len(seq.boundaries)
    T = len(seq) // E
    tok = seq.tokens.reshape(E, T, -1)
    return History(tok[..., :od].copy(), tok[..., od:od + ad].copy(), tok[..., od + ad].copy())


def query_tokens(tokens: np.ndarray, obs_dim: int) -> np.ndarray:
    """Copy of ``tokens`` with everything but the current observation zero-filled."""
    q = np.zeros_like(tokens)
    q[..., :obs_dim] = tokens[..., :obs_dim]
    return q


@dataclass
class Window:
    tokens: np.ndarray
    targets: np.ndarray
    start: int


def sample_window(seq: TokenSequence, c: int, rng: np.random.Generator) -> Window:
    """Contiguous length-``c`` window with a uniform start; may span episodes."""
    L = len(seq)
    if not 1 <= c <= L:
        raise ValueError(f"window length {c} outside [1, {L}]")
    s = int(rng.integers(0, L - c + 1))
    return Window(seq.tokens[s:s + c], seq.targets[s:s + c], s)


def augment_noise(window: Window, sigma: float, rng: np.random.Generator) -> Window:
    """Add i.i.d. N(0, sigma^2) to every token component; targets untouched."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return window
    noisy = window.tokens + rng.normal(0.0, sigma, window.tokens.shape).astype(np.float32)
    return Window(noisy.astype(np.float32), window.targets, window.start)


# --------------------------------------------------------------- datasets


@dataclass
class Standardizer:
    """Per-component token affine map, only used when standardization is switched on."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, seqs: list[TokenSequence]) -> "Standardizer":
        allt = np.concatenate([s.tokens for s in seqs])
        return cls(allt.mean(0).astype(np.float32), np.maximum(allt.std(0), 1e-6).astype(np.float32))

    @classmethod
    def identity(cls, width: int) -> "Standardizer":
        return cls(np.zeros(width, np.float32), np.ones(width, np.float32))

    def __call__(self, tokens: np.ndarray) -> np.ndarray:
        return ((tokens - self.mean) / self.std).astype(np.float32)


@dataclass
class Dataset:
    env_id: str
    sequences: list[TokenSequence]
    downsample_k: int
    manifest: dict

    @property
    def seq_len(self) -> int:
        return min(len(s) for s in self.sequences)

    def batch(self, batch_size: int, c: int, rng: np.random.Generator, sigma: float = 0.0
              ) -> tuple[np.ndarray, np.ndarray]:
        """Windows from uniformly drawn tasks: tokens (B, c, W), targets (B, c, act)."""
        idx = rng.integers(0, len(self.sequences), batch_size)
        wins = [augment_noise(sample_window(self.sequences[i], c, rng), sigma, rng) for i in idx]
        return np.stack([w.tokens for w in wins]), np.stack([w.targets for w in wins])


class DataError(RuntimeError):
    pass


def load_dataset(path: str | Path, k: int = 1, max_tasks: int | None = None) -> Dataset:
    """Read a directory written by ``source_rl.generate_dataset`` and pack it."""
    import json

    root = Path(path)
    man_path = root / "manifest.json"
    if not man_path.exists():
        raise DataError(f"{root}: no manifest.json")
    manifest = json.loads(man_path.read_text())
    entries = manifest.get("tasks", [])
    if max_tasks is not None:
        entries = entries[:max_tasks]
    if not entries:
        raise DataError(f"{root}: manifest lists no trajectory files")
    seqs = []
    for ent in entries:
        tf = read_trajectory(root / ent["file"])
        seqs.append(pack_tokens(downsample(History(tf.obs, tf.actions, tf.rewards), k)))
    return Dataset(manifest["env_id"], seqs, k, manifest)
