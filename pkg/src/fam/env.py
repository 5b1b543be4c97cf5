"""Particle-world Dec-POMDP: Cooperative Navigation (CN) and Predator-Prey (PP).

Entities live on a 2D plane. Controlled agents (CN agents, PP predators) are
driven by five discrete force actions; landmarks are static; prey flee from
their closest predator with a fixed scripted policy.

Entity layout inside a state is ``[controlled agents..., targets...]`` where
targets are landmarks (CN) or prey (PP). Array helpers prefixed with ``_``
operate on a leading batch axis so that :class:`VecParticleEnv` can step many
worlds at once; the public single-world operations call them with batch 1.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from fam.errors import ConfigError, InputError, StateError

OBS_DIM = 14
N_ACTIONS = 5
N_VISIBLE_TARGETS = 3
N_VISIBLE_AGENTS = 2

# no-op, +x, -x, +y, -y
ACTION_DIRECTIONS = np.array(
    [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
)

TASKS = ("CN", "PP")


@dataclass(frozen=True)
class EnvConfig:
    """Episode and physics parameters for one particle world."""

    task: str = "CN"
    n_agents: int = 5
    n_landmarks: int = 5
    n_prey: int = 3
    episode_len: int = 25
    agent_radius: float = 0.1
    landmark_radius: float = 0.05
    dt: float = 0.1
    damping: float = 0.25
    accel_controlled: float = 5.0
    max_speed_controlled: float = 1.0
    max_speed_prey: float = 1.4
    occupy_threshold: float = 0.15
    prey_velocity_obs: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.n_agents < 1:
            raise ConfigError("n_agents must be >= 1")
        if self.task == "CN" and self.n_landmarks < 1:
            raise ConfigError("CN needs n_landmarks >= 1")
        if self.task == "PP" and self.n_prey < 1:
            raise ConfigError("PP needs n_prey >= 1")
        if self.episode_len < 1:
            raise ConfigError("episode_len must be >= 1")
        if self.agent_radius <= 0 or self.landmark_radius <= 0:
            raise ConfigError("radii must be > 0")
        if not 0 <= self.damping < 1:
            raise ConfigError("damping must be in [0, 1)")
        if self.dt <= 0:
            raise ConfigError("dt must be > 0")
        if self.max_speed_controlled <= 0 or self.max_speed_prey <= 0:
            raise ConfigError("speed caps must be > 0")

    @classmethod
    def cn(cls, n_agents: int = 5, n_landmarks: int = 5, **kw: Any) -> "EnvConfig":
        return cls(task="CN", n_agents=n_agents, n_landmarks=n_landmarks, **kw)

    @classmethod
    def pp(cls, n_predators: int = 7, n_prey: int = 3, **kw: Any) -> "EnvConfig":
        return cls(task="PP", n_agents=n_predators, n_prey=n_prey, **kw)

    @property
    def n_targets(self) -> int:
        return self.n_landmarks if self.task == "CN" else self.n_prey

    @property
    def n_entities(self) -> int:
        return self.n_agents + self.n_targets

    @property
    def obs_dim(self) -> int:
        if self.task == "PP" and self.prey_velocity_obs:
            return OBS_DIM + 2 * N_VISIBLE_TARGETS
        return OBS_DIM

    def to_text(self) -> str:
        """Flat ``key = value`` record, one field per line."""
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "EnvConfig":
        values: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"malformed line: {line!r}")
            values[key.strip()] = val.strip()
        return cls(**coerce_fields(cls, values))


def coerce_fields(cls: type, values: dict[str, str]) -> dict[str, Any]:
    """Convert string values to the annotated types of dataclass ``cls``."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out: dict[str, Any] = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        out[key] = parse_scalar(raw, types[key], key)
    return out


def parse_scalar(raw: str, type_name: Any, key: str = "") -> Any:
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if type_name == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if type_name == "int":
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if type_name == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {type_name})") from exc
    return raw


@dataclass
class WorldState:
    positions: np.ndarray  # (n_entities, 2)
    velocities: np.ndarray  # (n_entities, 2)
    t: int = 0
    done: bool = False

    def copy(self) -> "WorldState":
        return WorldState(self.positions.copy(), self.velocities.copy(), self.t, self.done)


@dataclass
class StepResult:
    state: WorldState
    observations: np.ndarray  # (n_agents, obs_dim)
    team_reward: float
    done: bool
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# batched array helpers; leading axis is the world index


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, :, None, :] - b[:, None, :, :]) ** 2).sum(-1))


def _collision_count(agent_pos: np.ndarray, radius: float) -> np.ndarray:
    n = agent_pos.shape[1]
    d = _pairwise_dist(agent_pos, agent_pos)
    iu = np.triu_indices(n, k=1)
    return (d[:, iu[0], iu[1]] < 2 * radius).sum(-1)


def _target_min_dist(pos: np.ndarray, n_agents: int) -> np.ndarray:
    """Distance from every target to its nearest controlled agent, (B, n_targets)."""
    return _pairwise_dist(pos[:, n_agents:], pos[:, :n_agents]).min(-1)


def _team_reward(pos: np.ndarray, config: EnvConfig) -> np.ndarray:
    a = config.n_agents
    return -_target_min_dist(pos, a).sum(-1) - _collision_count(pos[:, :a], config.agent_radius)


def _nearest(rel: np.ndarray, k: int, exclude_self: bool) -> np.ndarray:
    """Pick the ``k`` closest relative vectors per agent, zero-filled to ``k`` slots.

    rel: (B, N, M, 2). Ordering is by ascending distance with ties broken by
    entity index (stable sort).
    """
    b, n, m, _ = rel.shape
    d = np.sqrt((rel**2).sum(-1))
    if exclude_self:
        d = d + np.where(np.eye(n, m, dtype=bool), np.inf, 0.0)[None]
    avail = m - 1 if exclude_self else m
    take = min(k, avail)
    order = np.argsort(d, axis=-1, kind="stable")[..., :take]
    picked = np.take_along_axis(rel, order[..., None], axis=2)
    out = np.zeros((b, n, k, 2))
    out[:, :, :take] = picked
    return out, order


def _observe(pos: np.ndarray, vel: np.ndarray, config: EnvConfig) -> np.ndarray:
    a = config.n_agents
    own_pos = pos[:, :a]
    rel_t = pos[:, None, a:] - own_pos[:, :, None]
    rel_a = pos[:, None, :a] - own_pos[:, :, None]
    targets, t_order = _nearest(rel_t, N_VISIBLE_TARGETS, exclude_self=False)
    agents, _ = _nearest(rel_a, N_VISIBLE_AGENTS, exclude_self=True)
    b = pos.shape[0]
    parts = [vel[:, :a], own_pos, targets.reshape(b, a, -1), agents.reshape(b, a, -1)]
    if config.task == "PP" and config.prey_velocity_obs:
        tv = np.zeros((b, a, N_VISIBLE_TARGETS, 2))
        take = t_order.shape[-1]
        prey_vel = np.broadcast_to(vel[:, None, a:], (b, a, config.n_targets, 2))
        tv[:, :, :take] = np.take_along_axis(prey_vel, t_order[..., None], axis=2)
        parts.append(tv.reshape(b, a, -1))
    return np.concatenate(parts, axis=-1)


def _prey_commands(pos: np.ndarray, config: EnvConfig) -> np.ndarray:
    a = config.n_agents
    prey = pos[:, a:]
    d = _pairwise_dist(prey, pos[:, :a])
    closest = d.argmin(-1)  # first index wins ties
    pred = np.take_along_axis(pos[:, :a], closest[..., None], axis=1)
    away = prey - pred
    norm = np.sqrt((away**2).sum(-1, keepdims=True))
    direction = np.divide(away, norm, out=np.zeros_like(away), where=norm > 0)
    cmd = direction * config.max_speed_prey
    outward = ((prey >= 1.0) & (cmd > 0)) | ((prey <= -1.0) & (cmd < 0))
    return np.where(outward, -cmd, cmd)


def _clip_speed(vel: np.ndarray, cap: float) -> np.ndarray:
    speed = np.sqrt((vel**2).sum(-1, keepdims=True))
    scale = np.where(speed > cap, cap / np.maximum(speed, 1e-12), 1.0)
    return vel * scale


def _physics(pos: np.ndarray, vel: np.ndarray, actions: np.ndarray, config: EnvConfig):
    a = config.n_agents
    pos = pos.copy()
    vel = vel.copy()
    force = ACTION_DIRECTIONS[actions] * config.accel_controlled
    v = vel[:, :a] * (1.0 - config.damping) + force * config.dt  # unit mass
    v = _clip_speed(v, config.max_speed_controlled)
    vel[:, :a] = v
    pos[:, :a] = pos[:, :a] + v * config.dt
    if config.task == "PP":
        cmd = _prey_commands(pos, config)
        p = pos[:, a:] + cmd * config.dt
        over = np.abs(p) > 1.0
        p = np.where(over, np.sign(p) * 2.0 - p, p)
        cmd = np.where(over, -cmd, cmd)
        vel[:, a:] = cmd
        pos[:, a:] = p
    return pos, vel


def _check_actions(actions: np.ndarray, n_agents: int) -> np.ndarray:
    actions = np.asarray(actions)
    if actions.shape[-1] != n_agents:
        raise InputError(f"expected {n_agents} actions, got shape {actions.shape}")
    if not np.issubdtype(actions.dtype, np.integer):
        if not np.all(actions == np.round(actions)):
            raise InputError("actions must be integers")
        actions = actions.astype(np.int64)
    if np.any((actions < 0) | (actions >= N_ACTIONS)):
        raise InputError(f"actions must be in 0..{N_ACTIONS - 1}")
    return actions


# ---------------------------------------------------------------------------
# single-world operations


def reset(config: EnvConfig, seed: int | None = None) -> tuple[WorldState, np.ndarray]:
    """Draw a fresh world: positions uniform in [-1, 1]^2, zero velocities."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    pos = rng.uniform(-1.0, 1.0, size=(config.n_entities, 2))
    state = WorldState(pos, np.zeros_like(pos))
    return state, observe(state, config)


def observe(state: WorldState, config: EnvConfig) -> np.ndarray:
    return _observe(state.positions[None], state.velocities[None], config)[0]


def step(state: WorldState, joint_action, config: EnvConfig) -> StepResult:
    if state.done:
        raise StateError("episode is done; call reset")
    actions = _check_actions(joint_action, config.n_agents)
    pos, vel = _physics(state.positions[None], state.velocities[None], actions[None], config)
    t = state.t + 1
    new = WorldState(pos[0], vel[0], t, t == config.episode_len)
    reward = float(_team_reward(pos, config)[0])
    info = {
        "collision_count": int(collision_count(new, config)),
        "min_distances": _target_min_dist(pos, config.n_agents)[0],
    }
    if config.task == "CN":
        info["occupied_count"] = count_occupied(new, config)
    return StepResult(new, observe(new, config), reward, new.done, info)


def collision_count(state: WorldState, config: EnvConfig) -> int:
    """Unordered pairs of controlled agents closer than the sum of their radii."""
    return int(_collision_count(state.positions[None, : config.n_agents], config.agent_radius)[0])


def reward_cn(state: WorldState, config: EnvConfig) -> float:
    if config.task != "CN":
        raise ConfigError("reward_cn requires task CN")
    return float(_team_reward(state.positions[None], config)[0])


def reward_pp(state: WorldState, config: EnvConfig) -> float:
    if config.task != "PP":
        raise ConfigError("reward_pp requires task PP")
    return float(_team_reward(state.positions[None], config)[0])


def team_reward(state: WorldState, config: EnvConfig) -> float:
    return float(_team_reward(state.positions[None], config)[0])


def prey_policy(state: WorldState, prey_id: int, config: EnvConfig) -> np.ndarray:
    """Velocity command for one prey: flee the closest predator at full prey speed."""
    if config.task != "PP":
        raise ConfigError("prey_policy requires task PP")
    return _prey_commands(state.positions[None], config)[0, prey_id]


def count_occupied(state: WorldState, config: EnvConfig) -> int:
    if config.task != "CN":
        raise ConfigError("count_occupied requires task CN")
    d = _target_min_dist(state.positions[None], config.n_agents)[0]
    return int((d < config.occupy_threshold).sum())


class ParticleEnv:
    """Stateful single-world wrapper around :func:`reset` / :func:`step`."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state: WorldState | None = None

    def reset(self, seed: int | None = None) -> np.ndarray:
        self.state, obs = reset(self.config, seed)
        return obs

    def step(self, joint_action) -> StepResult:
        if self.state is None:
            raise StateError("reset before step")
        result = step(self.state, joint_action, self.config)
        self.state = result.state
        return result


class VecParticleEnv:
    """Synchronously stepped batch of independent worlds sharing one config."""

    def __init__(self, config: EnvConfig, n_envs: int):
        if n_envs < 1:
            raise ConfigError("n_envs must be >= 1")
        self.config = config
        self.n_envs = n_envs
        self.positions = np.zeros((n_envs, config.n_entities, 2))
        self.velocities = np.zeros_like(self.positions)
        self.t = 0

    def reset(self, seeds) -> np.ndarray:
        """Reset every world; world ``k`` is bit-identical to ``reset(config, seeds[k])``."""
        seeds = list(seeds)
        if len(seeds) != self.n_envs:
            raise InputError("need one seed per environment")
        for k, s in enumerate(seeds):
            rng = np.random.default_rng(s)
            self.positions[k] = rng.uniform(-1.0, 1.0, size=(self.config.n_entities, 2))
        self.velocities[:] = 0.0
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        return _observe(self.positions, self.velocities, self.config)

    def step(self, actions) -> tuple[np.ndarray, np.ndarray, bool, dict]:
        """Apply (n_envs, n_agents) actions; returns obs, team rewards, done, info."""
        if self.t >= self.config.episode_len:
            raise StateError("episode is done; call reset")
        actions = _check_actions(actions, self.config.n_agents)
        self.positions, self.velocities = _physics(self.positions, self.velocities, actions, self.config)
        self.t += 1
        reward = _team_reward(self.positions, self.config)
        min_d = _target_min_dist(self.positions, self.config.n_agents)
        info = {
            "collision_count": _collision_count(self.positions[:, : self.config.n_agents], self.config.agent_radius),
            "min_distances": min_d,
            "occupied_count": (min_d < self.config.occupy_threshold).sum(-1),
        }
        return self.observe(), reward, self.t == self.config.episode_len, info
