"""Run configuration and its flat ``section.key = value`` text form."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Any

from fam.env import EnvConfig, coerce_fields, parse_scalar
from fam.errors import ConfigError

ALGORITHMS = (
    "fam",
    "fam_wo_in_oa",
    "fam_wo_rec_obs",
    "fam_wo_rec_rew",
    "ippo",
    "ia2c",
    "mappo",
    "maa2c",
)

ALGO_KEYS = (
    "algorithm",
    "gamma",
    "alpha1",
    "alpha2",
    "beta",
    "epsilon_clip",
    "entropy_coef",
    "tau_soft",
    "hidden",
    "latent_dim",
    "max_grad_norm",
    "share_params",
    "soft_update_all",
    "bootstrap_truncation",
    "zero_latent",
    "normalize_advantages",
)


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    algorithm: str = "fam"
    total_steps: int = 1_000_000
    batch_episodes: int = 10
    epochs: int = 4
    minibatches: int = 1
    n_envs: int = 8
    gamma: float = 0.99
    alpha1: float = 3e-4
    alpha2: float = 1e-3
    beta: float = 0.001
    epsilon_clip: float = 0.2
    entropy_coef: float = 0.01
    tau_soft: float = 0.01
    hidden: int = 64
    latent_dim: int = 5
    max_grad_norm: float = 0.5
    share_params: bool = False
    soft_update_all: bool = False
    bootstrap_truncation: bool = False
    zero_latent: bool = False
    normalize_advantages: bool = True
    seed: int = 0
    eval_interval: int = 0
    eval_episodes: int = 100
    checkpoint_interval: int = 0

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.batch_episodes < 1 or self.n_envs < 1 or self.minibatches < 1:
            raise ConfigError("batch_episodes, n_envs and minibatches must be >= 1")
        if self.minibatches > self.batch_episodes:
            raise ConfigError("minibatches cannot exceed batch_episodes")
        if self.total_steps < self.steps_per_cycle:
            raise ConfigError("total_steps must be >= batch_episodes * episode_len")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("learning rates must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if not 0.0 <= self.tau_soft <= 1.0:
            raise ConfigError("tau_soft must be in [0, 1]")
        if self.beta < 0 or self.epsilon_clip < 0 or self.entropy_coef < 0:
            raise ConfigError("beta, epsilon_clip and entropy_coef must be >= 0")
        if self.latent_dim < 1 or self.hidden < 1:
            raise ConfigError("latent_dim and hidden must be >= 1")

    @property
    def steps_per_cycle(self) -> int:
        return self.batch_episodes * self.env.episode_len

    @property
    def n_cycles(self) -> int:
        return self.total_steps // self.steps_per_cycle

    def replace(self, **kw: Any) -> "RunConfig":
        env_kw = {k[4:]: kw.pop(k) for k in list(kw) if k.startswith("env.")}
        env = dataclasses.replace(self.env, **env_kw) if env_kw else self.env
        return dataclasses.replace(self, env=kw.pop("env", env), **kw)

    def to_dict(self) -> dict[str, Any]:
        out = {f"env.{k}": v for k, v in dataclasses.asdict(self.env).items()}
        for f in dataclasses.fields(self):
            if f.name != "env":
                section = "algo" if f.name in ALGO_KEYS else "train"
                out[f"{section}.{f.name}"] = getattr(self, f.name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "RunConfig":
        return cls().with_overrides({k: str(v) for k, v in values.items()})

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().with_overrides(parse_kv_text(text))

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        """Apply string-valued ``key=value`` overrides, type-checked against the fields.

        Keys may be dotted (``env.n_agents``, ``algo.beta``, ``train.seed``) or
        bare; a bare key resolves to a run field first, then to an env field.
        """
        run_types = {f.name: f.type for f in dataclasses.fields(self) if f.name != "env"}
        env_fields = {f.name for f in dataclasses.fields(EnvConfig)}
        run_kw: dict[str, Any] = {}
        env_kw: dict[str, str] = {}
        for key, raw in overrides.items():
            section, _, name = key.rpartition(".")
            if section == "env" and name in env_fields:
                env_kw[name] = raw
            elif section in ("algo", "train", "") and name in run_types:
                run_kw[name] = parse_scalar(raw, run_types[name], key)
            elif section == "" and name in env_fields:
                env_kw[name] = raw
            else:
                raise ConfigError(f"unknown config key {key!r}")
        env = dataclasses.replace(self.env, **coerce_fields(EnvConfig, env_kw)) if env_kw else self.env
        return dataclasses.replace(self, env=env, **run_kw)


def canonical_key(key: str) -> str:
    """Dotted ``section.name`` spelling of a config key; unknown keys are returned unchanged."""
    section, _, name = key.rpartition(".")
    run_fields = {f.name for f in dataclasses.fields(RunConfig) if f.name != "env"}
    if section == "env":
        return key
    if section in ("", "algo", "train") and name in run_fields:
        return f"{'algo' if name in ALGO_KEYS else 'train'}.{name}"
    if not section and name in {f.name for f in dataclasses.fields(EnvConfig)}:
        return f"env.{name}"
    return key


def parse_kv_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        values[key.strip()] = val.strip()
    return values
