"""Learning-history generation: one REINFORCE learner per task.

The learner is deliberately simple. A tanh MLP gives the action mean, a
global log-std gives exploration noise, and each update uses a batch of
episodes with reward-to-go returns minus a per-timestep moving-average
baseline. Every episode is recorded in order, including early exploration,
because that ordered improvement is what distillation learns from.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from . import tensor as T
from .nn import Adam, Linear, Module, param
from .tensor import Tensor

log = logging.getLogger(__name__)

TEST_SEED_BASE = 1_000_000_000


class SourceRLError(RuntimeError):
    pass


def derive_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Independent stream for ``path`` under ``master_seed`` (SeedSequence spawn keys)."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(path)))


def train_task(env_id: str, master_seed: int, index: int) -> envs.TaskSpec:
    """Training task ``index``; seeds live below TEST_SEED_BASE."""
    seed = int(np.random.SeedSequence(master_seed, spawn_key=(0, index)).generate_state(1)[0])
    return envs.task_from_seed(env_id, seed % TEST_SEED_BASE)


def test_task(env_id: str, index: int) -> envs.TaskSpec:
    """Held-out task ``index``, from the reserved seed range."""
    return envs.task_from_seed(env_id, TEST_SEED_BASE + index)


@dataclass
class LearnerConfig:
    hidden: int = 64
    lr: float = 1e-2
    batch_episodes: int = 5
    baseline_decay: float = 0.9
    init_log_std: float = -1.0
    log_std_min: float = -3.0
    log_std_max: float = 1.0
    mean_gain: float = 4.0


class GaussianPolicy(Module):
    def __init__(self, obs_dim: int, act_dim: int, cfg: LearnerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.l1 = Linear(obs_dim, cfg.hidden, rng)
        self.l2 = Linear(cfg.hidden, act_dim, rng, init_scale=0.01)
        self.log_std = param(np.full(act_dim, cfg.init_log_std))

    def mean(self, obs: Tensor) -> Tensor:
        return self.l2(T.tanh(self.l1(obs))) * self.cfg.mean_gain

    def mean_np(self, obs: np.ndarray) -> np.ndarray:
        return self.l2.apply_np(np.tanh(self.l1.apply_np(obs))) * self.cfg.mean_gain

    def std_np(self) -> np.ndarray:
        return np.exp(self.log_std.data)

    def log_prob(self, obs: Tensor, raw_actions: np.ndarray) -> Tensor:
        """Gaussian log-density of the unclipped actions, summed over action dims."""
        mu = self.mean(obs)
        z = (raw_actions - mu) / T.exp(self.log_std)
        return T.sum(z * z * -0.5 - self.log_std, axis=-1) - 0.5 * np.log(2 * np.pi) * mu.shape[-1]

    def clamp(self) -> None:
        np.clip(self.log_std.data, self.cfg.log_std_min, self.cfg.log_std_max,
                out=self.log_std.data)


@dataclass
class LearningHistory:
    """Ordered episodes from one learner run on one task."""

    task: envs.TaskSpec
    obs: np.ndarray          # (E, T, obs_dim)
    actions: np.ndarray      # (E, T, act_dim), clipped
    rewards: np.ndarray      # (E, T)
    learner_seed: int = 0
    policy_std: list[float] = field(default_factory=list)
    downsample_k: int = 1
    aborted: str | None = None

    @property
    def env_id(self) -> str:
        return self.task.env_id

    @property
    def num_episodes(self) -> int:
        return self.obs.shape[0]

    @property
    def episode_len(self) -> int:
        return self.obs.shape[1]

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)


def _reward_to_go(rewards: np.ndarray) -> np.ndarray:
    return np.cumsum(rewards[:, ::-1], axis=1)[:, ::-1]


def train_source(task: envs.TaskSpec, num_episodes: int, rng: np.random.Generator | int,
                 cfg: LearnerConfig | None = None) -> LearningHistory:
    """Run REINFORCE on ``task`` and record every episode."""
    if num_episodes < 1:
        raise ValueError("num_episodes must be >= 1")
    cfg = cfg or LearnerConfig()
    seed = rng if isinstance(rng, int) else int(rng.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    policy = GaussianPolicy(envs.OBS_DIM, envs.ACT_DIM, cfg, rng)
    opt = Adam(policy.parameters(), lr=cfg.lr)
    H = task.horizon
    obs_all, act_all, rew_all, stds = [], [], [], []
    baseline = None
    aborted = None
    done_eps = 0
    while done_eps < num_episodes:
        n = min(cfg.batch_episodes, num_episodes - done_eps)
        state, obs = envs.reset([task] * n, rng)
        O = np.zeros((n, H, envs.OBS_DIM), np.float32)
        A = np.zeros((n, H, envs.ACT_DIM), np.float32)
        raw = np.zeros((n, H, envs.ACT_DIM), np.float32)
        R = np.zeros((n, H), np.float32)
        std = policy.std_np()
        for t in range(H):
            O[:, t] = obs
            raw[:, t] = policy.mean_np(obs) + std * rng.standard_normal((n, envs.ACT_DIM))
            state, obs, R[:, t], _ = envs.step(state, raw[:, t])
            A[:, t] = np.clip(raw[:, t], -1, 1)
        G = _reward_to_go(R)
        if baseline is None:
            baseline = G.mean(axis=0)
        adv = G - baseline
        baseline = cfg.baseline_decay * baseline + (1 - cfg.baseline_decay) * G.mean(axis=0)

        opt.zero_grad()
        logp = policy.log_prob(Tensor(O.reshape(-1, envs.OBS_DIM)), raw.reshape(-1, envs.ACT_DIM))
        loss = -T.sum(logp * adv.reshape(-1).astype(np.float32)) / n
        if not np.isfinite(loss.item()):
            aborted = f"non-finite loss after {done_eps} episodes"
            log.warning("task %s: %s", task.seed, aborted)
            break
        loss.backward()
        opt.step()
        policy.clamp()

        obs_all.append(O)
        act_all.append(A)
        rew_all.append(R)
        stds.extend([float(std.mean())] * n)
        done_eps += n
    if not obs_all:
        raise SourceRLError(aborted or "no episodes recorded")
    return LearningHistory(task, np.concatenate(obs_all), np.concatenate(act_all),
                           np.concatenate(rew_all), seed, stds, 1, aborted)


# -------------------------------------------------------------- dataset files


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("AD_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(env_id: str, num_train_tasks: int, num_episodes: int, master_seed: int,
                     out_dir: str | Path, cfg: LearnerConfig | None = None) -> dict:
    """Train one learner per task and write trajectory files plus ``manifest.json``."""
    from .data import write_trajectory

    envs._check_env(env_id)
    cfg = cfg or LearnerConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def work(i: int):
        task = train_task(env_id, master_seed, i)
        seed = int(derive_rng(master_seed, 1, i).integers(0, 2**31 - 1))
        hist = train_source(task, num_episodes, seed, cfg)
        name = f"task_{i:04d}.adtraj"
        try:
            write_trajectory(out / name, hist)
        except OSError as exc:
            return i, None, f"{type(exc).__name__}: {exc}"
        return i, (name, hist), None

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(work, range(num_train_tasks)))

    tasks, failures = [], []
    for i, ok, err in results:
        if err is not None:
            failures.append({"index": i, "error": err})
            continue
        name, hist = ok
        tasks.append({
            "index": i,
            "file": name,
            "task": hist.task.to_json(),
            "learner_seed": hist.learner_seed,
            "returns": [round(float(r), 6) for r in hist.returns],
            "policy_std": [round(s, 6) for s in hist.policy_std],
            "aborted": hist.aborted,
        })
    manifest = {
        "format": "ADTRAJ01",
        "env_id": env_id,
        "master_seed": master_seed,
        "num_train_tasks": num_train_tasks,
        "num_episodes": num_episodes,
        "episode_len": envs.HORIZON[env_id],
        "obs_dim": envs.OBS_DIM,
        "act_dim": envs.ACT_DIM,
        "learner": asdict(cfg),
        "tasks": tasks,
        "failures": failures,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
