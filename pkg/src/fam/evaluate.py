"""Evaluation metrics and trajectory / embedding export.

Metrics over ``episodes`` full-length episodes:

* ``avg_return``: mean over episodes of the summed team reward.
* ``avg_final_reward``: mean team reward received at the last step.
* ``avg_occupied``: mean number of occupied landmarks at the last step (CN).
* ``avg_distance``: mean last-step sum over targets of the distance to the
  nearest controlled agent.

Every metric is a pure function of the positions and rewards written by
:func:`export_trajectories`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fam.config import RunConfig
from fam.env import EnvConfig, VecParticleEnv, _target_min_dist
from fam.errors import InputError, LoadError
from fam.trainer import (
    AgentStack,
    TrajectoryBatch,
    Variant,
    cycle_generator,
    episode_seed,
    load_checkpoint,
    play_episodes,
)

EVAL_STREAM = 1_000_000_007


@dataclass
class EvalReport:
    avg_return: float
    avg_final_reward: float
    avg_occupied: float | None
    avg_distance: float
    returns: list[float] = field(default_factory=list)
    final_rewards: list[float] = field(default_factory=list)
    occupied: list[int] | None = None
    distances: list[float] = field(default_factory=list)
    episodes: int = 0
    config_digest: str = ""
    deterministic: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def eval_seeds(seed: int, episodes: int) -> list[int]:
    return [episode_seed(seed, EVAL_STREAM, e) for e in range(episodes)]


def report_from_arrays(
    rewards: np.ndarray,
    positions: np.ndarray,
    env_config: EnvConfig,
    digest: str = "",
    deterministic: bool = True,
) -> EvalReport:
    """Build a report from per-episode rewards (E, T) and positions (E, T+1, entities, 2)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    final_pos = np.asarray(positions)[:, -1]
    min_d = _target_min_dist(final_pos, env_config.n_agents)
    returns = rewards.sum(-1)
    final = rewards[:, -1]
    dist = min_d.sum(-1)
    occ = None
    if env_config.task == "CN":
        occ = (min_d < env_config.occupy_threshold).sum(-1).astype(int).tolist()
    return EvalReport(
        avg_return=float(returns.mean()),
        avg_final_reward=float(final.mean()),
        avg_occupied=None if occ is None else float(np.mean(occ)),
        avg_distance=float(dist.mean()),
        returns=returns.tolist(),
        final_rewards=final.tolist(),
        occupied=occ,
        distances=dist.tolist(),
        episodes=int(rewards.shape[0]),
        config_digest=digest,
        deterministic=deterministic,
    )


def _play(stack, variant, config: RunConfig, episodes: int, deterministic: bool, seed: int | None) -> TrajectoryBatch:
    if episodes < 1:
        raise InputError("episodes must be >= 1")
    seed = config.seed if seed is None else seed
    gen = cycle_generator(seed, EVAL_STREAM, 3)
    return play_episodes(
        stack, variant, config.env, eval_seeds(seed, episodes), max(config.n_envs, episodes),
        deterministic, gen, config.zero_latent,
    )


def evaluate_stack(
    stack: AgentStack,
    variant: Variant,
    config: RunConfig,
    episodes: int = 100,
    deterministic: bool = True,
    seed: int | None = None,
) -> EvalReport:
    batch = _play(stack, variant, config, episodes, deterministic, seed)
    return report_from_arrays(
        batch.rewards.double().numpy(), batch.positions, config.env, config.digest(), deterministic
    )


def _load(checkpoint):
    if isinstance(checkpoint, (str, Path)):
        stack, variant, config, _ = load_checkpoint(checkpoint)
        return stack, variant, config
    return checkpoint


def evaluate(checkpoint, episodes: int = 100, deterministic: bool = True, seed: int | None = None) -> EvalReport:
    """Evaluate frozen parameters; ``checkpoint`` is a path or a ``(stack, variant, config)`` triple."""
    stack, variant, config = _load(checkpoint)
    return evaluate_stack(stack, variant, config, episodes, deterministic, seed)


def evaluate_random(env_config: EnvConfig, episodes: int = 100, seed: int = 0) -> EvalReport:
    """Uniform-random joint policy on the evaluation seeds."""
    rng = np.random.default_rng(seed)
    venv = VecParticleEnv(env_config, episodes)
    venv.reset(eval_seeds(seed, episodes))
    pos = [venv.positions.copy()]
    rewards = []
    for _ in range(env_config.episode_len):
        _, r, _, _ = venv.step(rng.integers(0, 5, size=(episodes, env_config.n_agents)))
        rewards.append(r)
        pos.append(venv.positions.copy())
    return report_from_arrays(np.stack(rewards, 1), np.stack(pos, 1), env_config, deterministic=False)


# ---------------------------------------------------------------------------
# exports


def _entity_names(env_config: EnvConfig) -> list[str]:
    kind = "landmark" if env_config.task == "CN" else "prey"
    return [f"agent{i}" for i in range(env_config.n_agents)] + [f"{kind}{j}" for j in range(env_config.n_targets)]


def trajectory_columns(env_config: EnvConfig) -> list[str]:
    cols = ["episode", "t"]
    for name in _entity_names(env_config):
        cols += [f"{name}_x", f"{name}_y"]
    cols.append("reward")
    cols += [f"action{i}" for i in range(env_config.n_agents)]
    return cols


def _write(path: Path, columns: list[str], rows: list[list]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            fh.write("\t".join(columns) + "\n")
            for row in rows:
                fh.write("\t".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def export_trajectories(checkpoint, n_episodes: int, path, deterministic: bool = True, seed: int | None = None) -> Path:
    """One row per (episode, step t = 1..T): entity positions after the step, team reward, actions taken."""
    stack, variant, config = _load(checkpoint)
    batch = _play(stack, variant, config, n_episodes, deterministic, seed)
    env = config.env
    rows = []
    for e in range(batch.n_episodes):
        for t in range(env.episode_len):
            row: list = [e, t + 1]
            row += [float(v) for v in batch.positions[e, t + 1].reshape(-1)]
            row.append(float(batch.rewards[e, t]))
            row += [int(a) for a in batch.actions[:, e, t]]
            rows.append(row)
    return _write(path, trajectory_columns(env), rows)


def embedding_columns(env_config: EnvConfig, d: int) -> list[str]:
    cols = ["episode", "t", "agent"]
    for stat in ("mu", "log_sigma", "z"):
        cols += [f"{stat}_{j}" for j in range(d)]
    cols += ["pos_x", "pos_y"]
    cols += [f"obs_{j}" for j in range(env_config.obs_dim)]
    cols += ["prev_action", "prev_reward"]
    return cols


def export_embeddings(checkpoint, n_episodes: int, path, deterministic: bool = True, seed: int | None = None) -> Path:
    """Per (episode, t, agent) encoder statistics, own position and the encoder's inputs."""
    stack, variant, config = _load(checkpoint)
    if stack.fbi is None:
        raise LoadError(f"algorithm {variant.name} has no belief encoder to export")
    batch = _play(stack, variant, config, n_episodes, deterministic, seed)
    env = config.env
    d = batch.mu.shape[-1]
    rows = []
    for e in range(batch.n_episodes):
        for t in range(env.episode_len):
            for i in range(env.n_agents):
                row: list = [e, t, i]
                for x in (batch.mu, batch.log_sigma, batch.z):
                    row += [float(v) for v in x[i, e, t]]
                row += [float(v) for v in batch.positions[e, t, i]]
                row += [float(v) for v in batch.obs[i, e, t]]
                row.append(int(batch.actions[i, e, t - 1]) if t > 0 else -1)
                row.append(float(batch.rewards[e, t - 1]) if t > 0 else 0.0)
                rows.append(row)
    return _write(path, embedding_columns(env, d), rows)


def read_columns(path) -> dict[str, np.ndarray]:
    """Load a tab-separated export into float64 columns keyed by header name."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    data = np.array([[float(v) for v in ln.split("\t")] for ln in lines[1:]], dtype=np.float64)
    data = data.reshape(-1, len(header))
    return {name: data[:, k] for k, name in enumerate(header)}


def report_from_trajectory_file(path, env_config: EnvConfig) -> EvalReport:
    """Recompute every report metric from an exported trajectory file alone."""
    cols = read_columns(path)
    episodes = np.unique(cols["episode"]).size
    t = env_config.episode_len
    rewards = cols["reward"].reshape(episodes, t)
    names = _entity_names(env_config)
    pos = np.stack([np.stack([cols[f"{n}_x"], cols[f"{n}_y"]], -1) for n in names], axis=1)
    pos = pos.reshape(episodes, t, len(names), 2)
    return report_from_arrays(rewards, pos, env_config)

