"""Point-mass tasks with a hidden goal.

All three environments share the same 2-D dynamics and observation (position,
velocity); they differ in the hidden task parameter and the reward:

=====================  ======================  ======================================
env_id                 hidden parameter        reward after each step
=====================  ======================  ======================================
point-reacher-goal     goal in the unit disk   -||p - goal||
point-vel              target speed [0.1, 1]   -| ||v|| - speed |
point-dir              angle [0, 2 pi)         v . (cos, sin) - 0.01 ||a||^2
=====================  ======================  ======================================

Everything here is vectorized over a leading batch axis so that many tasks
(or many episodes of one task) can be simulated together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ENV_IDS = ("point-reacher-goal", "point-vel", "point-dir")
HORIZON = {"point-reacher-goal": 20, "point-vel": 40, "point-dir": 40}
OBS_DIM = 4
ACT_DIM = 2
RESET_JITTER = 0.01
VEL_DECAY = 0.8
ACTION_GAIN = 0.2
DT = 0.1
ACTION_COST = 0.01


class EnvError(ValueError):
    pass


def _check_env(env_id: str) -> None:
    if env_id not in ENV_IDS:
        raise EnvError(f"unknown env_id {env_id!r}; expected one of {ENV_IDS}")


@dataclass(frozen=True)
class TaskSpec:
    env_id: str
    params: tuple[float, ...]
    seed: int

    @property
    def horizon(self) -> int:
        return HORIZON[self.env_id]

    def to_json(self) -> dict:
        return {"env_id": self.env_id, "params": list(self.params), "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "TaskSpec":
        return cls(d["env_id"], tuple(float(x) for x in d["params"]), int(d["seed"]))


def sample_task(env_id: str, rng: np.random.Generator) -> TaskSpec:
    """Draw a task uniformly from the env's task distribution."""
    _check_env(env_id)
    return task_from_seed(env_id, int(rng.integers(0, 2**31 - 1)))


def task_from_seed(env_id: str, seed: int) -> TaskSpec:
    """The task whose hidden parameter is drawn from ``default_rng(seed)``."""
    _check_env(env_id)
    trng = np.random.default_rng(seed)
    if env_id == "point-reacher-goal":
        # uniform in the disk: radius ~ sqrt(U)
        r = np.sqrt(trng.uniform())
        th = trng.uniform(0.0, 2 * np.pi)
        params = (float(r * np.cos(th)), float(r * np.sin(th)))
    elif env_id == "point-vel":
        params = (float(trng.uniform(0.1, 1.0)),)
    else:
        params = (float(trng.uniform(0.0, 2 * np.pi)),)
    return TaskSpec(env_id, params, int(seed))


@dataclass
class EnvState:
    """Simulation state for a batch of episodes (one task per row)."""

    env_id: str
    task_params: np.ndarray  # (n, k) hidden, never exposed through obs()
    pos: np.ndarray
    vel: np.ndarray
    t: int = 0
    horizon: int = field(default=0)

    def obs(self) -> np.ndarray:
        return observe(self.pos, self.vel)

    @property
    def done(self) -> bool:
        return self.t >= self.horizon


def observe(pos: np.ndarray, vel: np.ndarray) -> np.ndarray:
    return np.concatenate([pos, vel], axis=-1).astype(np.float32)


def _params_matrix(tasks: list[TaskSpec]) -> np.ndarray:
    env_ids = {t.env_id for t in tasks}
    if len(env_ids) != 1:
        raise EnvError(f"a batch must share one env_id, got {sorted(env_ids)}")
    return np.array([t.params for t in tasks], dtype=np.float64)


def reset(tasks: TaskSpec | list[TaskSpec], rng: np.random.Generator | int | None = None
          ) -> tuple[EnvState, np.ndarray]:
    """Start an episode at the origin with small Gaussian jitter (clipped at 5 sigma)."""
    if isinstance(tasks, TaskSpec):
        tasks = [tasks]
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = _params_matrix(tasks)
    n = len(tasks)
    jit = np.clip(rng.normal(0.0, RESET_JITTER, (n, 4)), -5 * RESET_JITTER, 5 * RESET_JITTER)
    state = EnvState(tasks[0].env_id, params, jit[:, :2].astype(np.float32),
                     jit[:, 2:].astype(np.float32), 0, tasks[0].horizon)
    return state, state.obs()


def dynamics(pos: np.ndarray, vel: np.ndarray, action: np.ndarray):
    a = np.clip(action, -1.0, 1.0)
    vel2 = (VEL_DECAY * vel + ACTION_GAIN * a).astype(np.float32)
    pos2 = (pos + DT * vel2).astype(np.float32)
    return pos2, vel2, a


def reward(env_id: str, params: np.ndarray, pos: np.ndarray, vel: np.ndarray,
           action: np.ndarray) -> np.ndarray:
    """Reward for arriving at (pos, vel) after applying the clipped ``action``."""
    if env_id == "point-reacher-goal":
        r = -np.linalg.norm(pos - params[:, :2], axis=-1)
    elif env_id == "point-vel":
        r = -np.abs(np.linalg.norm(vel, axis=-1) - params[:, 0])
    elif env_id == "point-dir":
        d = np.stack([np.cos(params[:, 0]), np.sin(params[:, 0])], axis=-1)
        r = np.sum(vel * d, axis=-1) - ACTION_COST * np.sum(action * action, axis=-1)
    else:
        _check_env(env_id)
    return r.astype(np.float32)


def step(state: EnvState, action: np.ndarray) -> tuple[EnvState, np.ndarray, np.ndarray, bool]:
    """Pure transition: returns (next_state, next_obs, reward, done)."""
    action = np.asarray(action, dtype=np.float32).reshape(state.pos.shape)
    if not np.all(np.isfinite(action)):
        raise EnvError("non-finite action")
    if state.done:
        raise EnvError("episode already finished; call reset")
    pos, vel, a = dynamics(state.pos, state.vel, action)
    r = reward(state.env_id, state.task_params, pos, vel, a)
    nxt = EnvState(state.env_id, state.task_params, pos, vel, state.t + 1, state.horizon)
    return nxt, nxt.obs(), r, nxt.done


# ------------------------------------------------------------- reference lines


def oracle_action(env_id: str, params: np.ndarray, pos: np.ndarray, vel: np.ndarray,
                  t: int, horizon: int) -> np.ndarray:
    """Task-aware controller used as the asymptotic-performance reference."""
    if env_id == "point-reacher-goal":
        a = 20.0 * (params[:, :2] - pos) - 3.0 * vel
    elif env_id == "point-vel":
        # deadbeat speed control along the diagonal, which allows |a| up to sqrt(2)
        speed = np.linalg.norm(vel, axis=-1)
        mag = np.clip((params[:, 0] - VEL_DECAY * speed) / ACTION_GAIN, 0.0, np.sqrt(2.0))
        direction = np.where(speed[:, None] > 1e-6, vel / np.maximum(speed, 1e-6)[:, None],
                             np.full_like(vel, 1 / np.sqrt(2.0)))
        a = direction * mag[:, None]
    elif env_id == "point-dir":
        # per-step optimum of gain * (d . a) - cost * |a|^2, gain = 1 - 0.8^(T - t)
        gain = 1.0 - VEL_DECAY ** (horizon - t)
        d = np.stack([np.cos(params[:, 0]), np.sin(params[:, 0])], axis=-1)
        a = gain * d / (2 * ACTION_COST)
    else:
        _check_env(env_id)
    return np.clip(a, -1.0, 1.0).astype(np.float32)


def rollout_returns(tasks: list[TaskSpec], policy, rng: np.random.Generator,
                    episodes: int = 1) -> np.ndarray:
    """Returns (n_tasks, episodes) for a memoryless ``policy(state) -> action``."""
    out = np.zeros((len(tasks), episodes))
    for e in range(episodes):
        state, _ = reset(tasks, rng)
        while not state.done:
            state, _, r, _ = step(state, policy(state))
            out[:, e] += r
    return out


def oracle_returns(tasks: list[TaskSpec], rng: np.random.Generator, episodes: int = 1) -> np.ndarray:
    def pol(s):
        return oracle_action(s.env_id, s.task_params, s.pos, s.vel, s.t, s.horizon)
    return rollout_returns(tasks, pol, rng, episodes)


def random_returns(tasks: list[TaskSpec], rng: np.random.Generator, episodes: int = 20) -> np.ndarray:
    def pol(s):
        return rng.uniform(-1.0, 1.0, s.pos.shape).astype(np.float32)
    return rollout_returns(tasks, pol, rng, episodes)


def normalized(returns: np.ndarray, random_ref: np.ndarray, oracle_ref: np.ndarray) -> np.ndarray:
    """0 at the random-policy return, 1 at the oracle return."""
    return (returns - random_ref) / (oracle_ref - random_ref)
