"""Training loop: rollout collection with per-agent belief inference, epoch updates, targets.

One update cycle collects ``batch_episodes`` episodes, fills returns and
advantages, runs ``epochs`` passes of critic, actor and belief-inference
updates per agent, then soft-updates the target critic. Every random draw of
cycle ``k`` comes from generators seeded by ``(seed, k)``, so a run resumed
from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import logging
import math
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from fam import fbi as fbi_mod
from fam import rl
from fam.config import RunConfig
from fam.env import N_ACTIONS, EnvConfig, VecParticleEnv
from fam.errors import ConfigError, InputError, LoadError, NumericError, RunError
from fam.nn import Adam, ParamSet, clip_grad_norm, compute_gradients, init_mlp, iter_chunks, soft_update

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step",
    "mean_episode_return",
    "occupied_landmarks",
    "loss_actor",
    "loss_critic",
    "loss_fbi",
    "kl",
    "recon_obs",
    "recon_rew",
    "entropy",
    "wall_time",
)


@dataclass(frozen=True)
class Variant:
    name: str
    uses_fbi: bool
    rl: str  # "ppo" | "a2c"
    centralized_critic: bool = False
    decoder_uses_oa: bool = True
    recon_obs: bool = True
    recon_rew: bool = True


VARIANTS = {
    "fam": Variant("fam", True, "ppo"),
    "fam_wo_in_oa": Variant("fam_wo_in_oa", True, "ppo", decoder_uses_oa=False),
    "fam_wo_rec_obs": Variant("fam_wo_rec_obs", True, "ppo", recon_obs=False),
    "fam_wo_rec_rew": Variant("fam_wo_rec_rew", True, "ppo", recon_rew=False),
    "ippo": Variant("ippo", False, "ppo"),
    "ia2c": Variant("ia2c", False, "a2c"),
    "mappo": Variant("mappo", False, "ppo", centralized_critic=True),
    "maa2c": Variant("maa2c", False, "a2c", centralized_critic=True),
}


@dataclass
class AgentStack:
    """Every agent's networks, stacked along the leading slot axis."""

    n_agents: int
    slots: int
    actor: ParamSet
    critic: ParamSet
    critic_target: ParamSet
    fbi: fbi_mod.FbiParams | None = None
    actor_target: ParamSet | None = None
    fbi_target: ParamSet | None = None
    optimizers: dict = field(default_factory=dict)

    def networks(self) -> dict[str, ParamSet]:
        nets = {"actor": self.actor, "critic": self.critic, "critic_target": self.critic_target}
        if self.fbi is not None:
            nets["fbi"] = self.fbi.all_params()
        if self.actor_target is not None:
            nets["actor_target"] = self.actor_target
        if self.fbi_target is not None:
            nets["fbi_target"] = self.fbi_target
        return nets


def build_variant(name: str, config: RunConfig) -> tuple[AgentStack, Variant]:
    """Construct freshly initialised networks for algorithm ``name``."""
    if name not in VARIANTS:
        raise ConfigError(f"unknown algorithm {name!r}")
    variant = VARIANTS[name]
    env = config.env
    n = env.n_agents
    slots = 1 if config.share_params else n
    gen = torch.Generator().manual_seed(config.seed)
    d = config.latent_dim if variant.uses_fbi else 0
    h = config.hidden
    actor, _ = init_mlp([env.obs_dim + d, h, h, N_ACTIONS], gen, slots, out_gain=0.01)
    critic_in = n * env.obs_dim if variant.centralized_critic else env.obs_dim + d
    critic, _ = init_mlp([critic_in, h, h, 1], gen, slots, out_gain=1.0)
    actor.requires_grad_(True)
    critic.requires_grad_(True)
    fbi = None
    if variant.uses_fbi:
        fbi = fbi_mod.init_fbi(
            env.obs_dim,
            N_ACTIONS,
            gen,
            slots,
            latent_dim=config.latent_dim,
            hidden=h,
            beta=config.beta,
            decoder_uses_oa=variant.decoder_uses_oa,
            recon_obs=variant.recon_obs,
            recon_rew=variant.recon_rew,
        )
    stack = AgentStack(n, slots, actor, critic, critic.clone(requires_grad=False), fbi)
    if config.soft_update_all:
        stack.actor_target = actor.clone(requires_grad=False)
        if fbi is not None:
            stack.fbi_target = fbi.all_params().clone(requires_grad=False)
    stack.optimizers = {
        "actor": Adam(actor, config.alpha1),
        "critic": Adam(critic, config.alpha1),
    }
    if fbi is not None:
        stack.optimizers["fbi"] = Adam(fbi.all_params(), config.alpha2)
    return stack, variant


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class TrajectoryBatch:
    """Episodes laid out ``(agents, episodes, T, ...)``; observations carry T+1 steps.

    ``rewards`` and ``occupied`` are team quantities ``(episodes, T)``;
    ``rewards[:, t]`` is r_{t+1}, received after the joint action at step t.
    """

    obs: torch.Tensor
    critic_obs: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    logp: torch.Tensor
    values: torch.Tensor
    positions: np.ndarray
    occupied: np.ndarray
    z: torch.Tensor | None = None
    mu: torch.Tensor | None = None
    log_sigma: torch.Tensor | None = None
    returns: torch.Tensor | None = None
    advantages: torch.Tensor | None = None
    terminal: torch.Tensor | None = None
    seeds: list = field(default_factory=list)

    @property
    def n_agents(self) -> int:
        return self.obs.shape[0]

    @property
    def n_episodes(self) -> int:
        return self.obs.shape[1]

    @property
    def episode_len(self) -> int:
        return self.actions.shape[2]

    def episode_returns(self) -> np.ndarray:
        return self.rewards.sum(-1).double().numpy()

    def select(self, idx: torch.Tensor) -> "TrajectoryBatch":
        def pick(x, axis=1):
            if x is None:
                return None
            return x.index_select(axis, idx)

        return TrajectoryBatch(
            obs=pick(self.obs),
            critic_obs=pick(self.critic_obs),
            actions=pick(self.actions),
            rewards=pick(self.rewards, 0),
            logp=pick(self.logp),
            values=pick(self.values),
            positions=self.positions[idx.numpy()],
            occupied=self.occupied[idx.numpy()],
            z=pick(self.z),
            mu=pick(self.mu),
            log_sigma=pick(self.log_sigma),
            returns=pick(self.returns),
            advantages=pick(self.advantages),
            terminal=pick(self.terminal),
            seeds=[self.seeds[i] for i in idx.tolist()] if self.seeds else [],
        )

    def transitions(self) -> rl.Transitions:
        a, m, t = self.actions.shape

        def flat(x):
            return None if x is None else x.reshape(a, m * t, *x.shape[3:])

        z = None if self.z is None else self.z[:, :, :t]
        next_z = None if self.z is None else self.z[:, :, 1:]
        rewards = self.rewards.to(self.obs.dtype).unsqueeze(0).expand(a, m, t)
        terminal = self.terminal if self.terminal is not None else _terminal_mask(a, m, t, True)
        zeros = torch.zeros(a, m, t)
        return rl.Transitions(
            obs=flat(self.obs[:, :, :t]),
            z=flat(z),
            critic_obs=flat(self.critic_obs[:, :, :t]),
            next_critic_obs=flat(self.critic_obs[:, :, 1:]),
            next_z=flat(next_z),
            actions=flat(self.actions),
            rewards=flat(rewards),
            terminal=flat(terminal),
            logp_old=flat(self.logp),
            values=flat(self.values),
            returns=flat(self.returns if self.returns is not None else zeros),
            advantages=flat(self.advantages if self.advantages is not None else zeros),
        )

    def fbi_batch(self) -> fbi_mod.FbiBatch:
        a, m, t = self.actions.shape
        onehot = F.one_hot(self.actions, N_ACTIONS).to(self.obs.dtype)
        prev_a = torch.cat([torch.zeros_like(onehot[:, :, :1]), onehot[:, :, :-1]], dim=2)
        rew = self.rewards.unsqueeze(0).expand(a, m, t).to(self.obs.dtype)
        prev_r = torch.cat([torch.zeros_like(rew[:, :, :1]), rew[:, :, :-1]], dim=2)
        return fbi_mod.FbiBatch(
            enc_inputs=fbi_mod.encoder_input(self.obs[:, :, :t], prev_a, prev_r),
            obs=self.obs[:, :, :t],
            actions=onehot,
            next_obs=self.obs[:, :, 1:],
            next_reward=rew,
        )


def _terminal_mask(a: int, m: int, t: int, true_terminal: bool) -> torch.Tensor:
    term = torch.zeros(a, m, t)
    if true_terminal:
        term[:, :, -1] = 1.0
    return term


def episode_seed(seed: int, cycle: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, cycle, episode]).generate_state(1)[0])


def cycle_generator(seed: int, cycle: int, stream: int) -> torch.Generator:
    s = int(np.random.SeedSequence([seed, cycle, stream, 7919]).generate_state(2, np.uint64)[0] >> 1)
    return torch.Generator().manual_seed(s)


def _critic_features(obs: torch.Tensor, centralized: bool) -> torch.Tensor:
    """obs (A, ..., D) -> per-agent critic input; centralised critics see every agent's observation."""
    if not centralized:
        return obs
    a = obs.shape[0]
    joint = torch.cat([obs[i] for i in range(a)], dim=-1)
    return joint.unsqueeze(0).expand(a, *joint.shape)


@torch.no_grad()
def play_episodes(
    stack: AgentStack,
    variant: Variant,
    env_config: EnvConfig,
    seeds: list[int],
    n_envs: int,
    deterministic: bool = False,
    gen: torch.Generator | None = None,
    zero_latent: bool = False,
) -> TrajectoryBatch:
    """Run one full episode per seed, ``n_envs`` worlds at a time."""
    chunks = []
    for start in range(0, len(seeds), n_envs):
        chunk = seeds[start:start + n_envs]
        try:
            chunks.append(
                _play_chunk(stack, variant, env_config, chunk, deterministic, gen, zero_latent)
            )
        except (FloatingPointError, ValueError, RuntimeError) as exc:
            raise RunError(f"rollout failed in episodes {start}..{start + len(chunk) - 1}: {exc}") from exc
    return _concat(chunks, seeds)


def _play_chunk(stack, variant, env_config, seeds, deterministic, gen, zero_latent) -> TrajectoryBatch:
    venv = VecParticleEnv(env_config, len(seeds))
    obs_np = venv.reset(seeds)
    a, n, t_len = env_config.n_agents, len(seeds), env_config.episode_len
    mode = "greedy" if deterministic else "sample"
    uses_fbi = variant.uses_fbi and stack.fbi is not None
    d = stack.fbi.psi["head.0.w"].shape[-1] // 2 if uses_fbi else 0
    if uses_fbi:
        hidden = stack.fbi.psi["gru.w_hh"].shape[-2]
        state = fbi_mod.RecurrentState.zeros(a, n, hidden)
        prev_a = torch.zeros(a, n, N_ACTIONS)
        prev_r = torch.zeros(a, n)
    obs_l, act_l, logp_l, val_l, rew_l, occ_l, z_l, mu_l, ls_l = ([] for _ in range(9))
    pos_l = [venv.positions.copy()]
    for t in range(t_len + 1):
        obs = torch.from_numpy(obs_np).float().transpose(0, 1).contiguous()  # (A, n, D)
        obs_l.append(obs)
        z = None
        if uses_fbi:
            state, mu, ls = fbi_mod.encode_step(stack.fbi.psi, state, obs, prev_a, prev_r)
            if zero_latent:
                mu, ls = torch.zeros_like(mu), torch.zeros_like(ls)
                z = torch.zeros_like(mu)
            elif deterministic:
                z = mu
            else:
                z = fbi_mod.sample_latent(mu, ls, torch.randn(mu.shape, generator=gen))
            z_l.append(z)
            mu_l.append(mu)
            ls_l.append(ls)
        if t == t_len:
            break
        out = rl.act(stack.actor, obs, z, mode, gen)
        cfeat = _critic_features(obs, variant.centralized_critic)
        v = rl.value(stack.critic, cfeat, None if variant.centralized_critic else z)
        obs_np, reward, _, info = venv.step(out.action.T.numpy())
        act_l.append(out.action)
        logp_l.append(out.log_prob)
        val_l.append(v)
        rew_l.append(torch.from_numpy(reward))
        occ_l.append(info["occupied_count"])
        pos_l.append(venv.positions.copy())
        if uses_fbi:
            prev_a = F.one_hot(out.action, N_ACTIONS).float()
            prev_r = rew_l[-1].float().unsqueeze(0).expand(a, n)
    obs_all = torch.stack(obs_l, dim=2)
    stack_t = lambda xs: torch.stack(xs, dim=2) if xs else None  # noqa: E731
    return TrajectoryBatch(
        obs=obs_all,
        critic_obs=_critic_features(obs_all, variant.centralized_critic),
        actions=stack_t(act_l),
        rewards=torch.stack(rew_l, dim=1),
        logp=stack_t(logp_l),
        values=stack_t(val_l),
        positions=np.stack(pos_l, axis=1),
        occupied=np.stack(occ_l, axis=1),
        z=stack_t(z_l),
        mu=stack_t(mu_l),
        log_sigma=stack_t(ls_l),
        seeds=list(seeds),
    )


def _concat(chunks: list[TrajectoryBatch], seeds: list[int]) -> TrajectoryBatch:
    if len(chunks) == 1:
        return chunks[0]

    def cat(name, axis=1):
        vals = [getattr(c, name) for c in chunks]
        if vals[0] is None:
            return None
        return torch.cat(vals, dim=axis)

    return TrajectoryBatch(
        obs=cat("obs"),
        critic_obs=cat("critic_obs"),
        actions=cat("actions"),
        rewards=cat("rewards", 0),
        logp=cat("logp"),
        values=cat("values"),
        positions=np.concatenate([c.positions for c in chunks]),
        occupied=np.concatenate([c.occupied for c in chunks]),
        z=cat("z"),
        mu=cat("mu"),
        log_sigma=cat("log_sigma"),
        seeds=list(seeds),
    )


def collect_rollouts(stack: AgentStack, variant: Variant, config: RunConfig, cycle: int) -> TrajectoryBatch:
    """Gather ``batch_episodes`` training episodes for update cycle ``cycle``."""
    seeds = [episode_seed(config.seed, cycle, e) for e in range(config.batch_episodes)]
    gen = cycle_generator(config.seed, cycle, 0)
    return play_episodes(
        stack, variant, config.env, seeds, config.n_envs, False, gen, config.zero_latent
    )


@torch.no_grad()
def compute_returns(batch: TrajectoryBatch, stack: AgentStack, variant: Variant, config: RunConfig) -> TrajectoryBatch:
    """Fill ``returns``, ``advantages`` and ``terminal`` in place."""
    a, m, t = batch.actions.shape
    rewards = batch.rewards.to(batch.values.dtype).unsqueeze(0).expand(a, m, t)
    terminal = _terminal_mask(a, m, t, not config.bootstrap_truncation)
    bootstrap = None
    if config.bootstrap_truncation:
        z_last = None
        if batch.z is not None and not variant.centralized_critic:
            z_last = batch.z[:, :, t]
        bootstrap = rl.value(stack.critic_target, batch.critic_obs[:, :, t], z_last)
    batch.returns, batch.advantages = rl.returns_and_advantages(
        rewards, terminal, batch.values, config.gamma, bootstrap, config.normalize_advantages
    )
    batch.terminal = terminal
    return batch


# ---------------------------------------------------------------------------
# updates


def _apply(stack: AgentStack, key: str, loss: torch.Tensor, lr: float, config: RunConfig) -> None:
    opt: Adam = stack.optimizers[key]
    grads = compute_gradients(loss.sum(), opt.params)
    grads = clip_grad_norm(grads, config.max_grad_norm, stack.slots)
    if not opt.step(grads, lr):
        raise NumericError(f"non-finite gradient in {key}")


def rl_losses(stack: AgentStack, variant: Variant, tr: rl.Transitions, config: RunConfig):
    """Per-slot (actor, critic, entropy) losses for the variant's RL algorithm."""
    if variant.rl == "a2c":
        actor, critic, stats = rl.a2c_losses(stack.actor, stack.critic, tr, config.entropy_coef)
        return actor, critic, stats["entropy"]
    z_for_critic = tr
    if variant.centralized_critic:
        z_for_critic = rl.Transitions(**{**tr.__dict__, "z": None, "next_z": None})
    critic = rl.critic_loss(stack.critic, stack.critic_target, z_for_critic, config.gamma)
    actor, stats = rl.actor_loss_ppo(stack.actor, tr, config.epsilon_clip, config.entropy_coef)
    return actor, critic, stats["entropy"]


def train_epoch(
    batch: TrajectoryBatch,
    stack: AgentStack,
    variant: Variant,
    config: RunConfig,
    gen: torch.Generator | None = None,
) -> dict[str, float]:
    """Run the epoch loop of one update cycle and return mean loss components.

    For every minibatch the critic, the actor and the belief-inference
    networks are updated in that order. A2C variants make a single pass
    since their losses carry no importance correction. On a non-finite loss
    the remaining updates of this cycle are skipped and ``aborted`` is set.
    """
    if batch.actions.numel() == 0:
        raise InputError("empty batch")
    if batch.returns is None:
        compute_returns(batch, stack, variant, config)
    epochs = 1 if variant.rl == "a2c" else config.epochs
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}

    def record(key: str, v: torch.Tensor) -> None:
        sums[key] = sums.get(key, 0.0) + float(v.detach().mean())
        counts[key] = counts.get(key, 0) + 1

    aborted = False
    try:
        for _ in range(epochs):
            perm = torch.randperm(batch.n_episodes, generator=gen)
            for idx in iter_chunks(batch.n_episodes, config.minibatches, perm):
                mb = batch.select(idx)
                tr = mb.transitions()
                if variant.rl == "a2c":
                    actor, critic, ent = rl_losses(stack, variant, tr, config)
                    record("loss_critic", critic)
                    record("loss_actor", actor)
                    record("entropy", ent)
                    _apply(stack, "critic", critic, config.alpha1, config)
                    _apply(stack, "actor", actor, config.alpha1, config)
                else:
                    _, critic, _ = rl_losses(stack, variant, tr, config)
                    record("loss_critic", critic)
                    _apply(stack, "critic", critic, config.alpha1, config)
                    actor, stats = rl.actor_loss_ppo(stack.actor, tr, config.epsilon_clip, config.entropy_coef)
                    record("loss_actor", actor)
                    record("entropy", stats["entropy"])
                    _apply(stack, "actor", actor, config.alpha1, config)
                if stack.fbi is not None and variant.uses_fbi and not config.zero_latent:
                    loss, comps = fbi_mod.fbi_loss(mb.fbi_batch(), stack.fbi, gen)
                    record("loss_fbi", loss)
                    for k, v in comps.items():
                        record(k, v)
                    _apply(stack, "fbi", loss, config.alpha2, config)
    except NumericError as exc:
        log.warning("update cycle aborted: %s", exc)
        aborted = True
    report = {k: sums[k] / counts[k] for k in sums}
    report["loss_total"] = report.get("loss_actor", 0.0) + report.get("loss_critic", 0.0) + report.get("loss_fbi", 0.0)
    report["aborted"] = aborted
    return report


def update_targets(stack: AgentStack, tau: float) -> None:
    soft_update(stack.critic_target, stack.critic, tau)
    if stack.actor_target is not None:
        soft_update(stack.actor_target, stack.actor, tau)
    if stack.fbi_target is not None and stack.fbi is not None:
        soft_update(stack.fbi_target, stack.fbi.all_params(), tau)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, stack: AgentStack, variant: Variant, config: RunConfig, cycle: int) -> None:
    payload = {
        "format": 1,
        "run_config": config.to_dict(),
        "algorithm": variant.name,
        "cycle": cycle,
        "step": (cycle + 1) * config.steps_per_cycle,
        "params": {k: v.state_dict() for k, v in stack.networks().items()},
        "optimizers": {k: opt.state_dict() for k, opt in stack.optimizers.items()},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise RunError(f"checkpoint write failed: {exc}") from exc


def load_checkpoint(path) -> tuple[AgentStack, Variant, RunConfig, dict]:
    """Rebuild the agent stack stored at ``path``; raises :class:`LoadError` on mismatch."""
    try:
        payload = torch.load(Path(path), weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        config = RunConfig.from_dict(payload["run_config"])
        stack, variant = build_variant(payload["algorithm"], config)
        nets = stack.networks()
        if set(nets) != set(payload["params"]):
            raise LoadError("checkpoint networks do not match the configured algorithm")
        for name, ps in nets.items():
            saved = ParamSet.from_state_dict(payload["params"][name])
            if saved.shapes() != ps.shapes():
                raise LoadError(f"shape mismatch in {name}")
            ps.load_(saved)
            ps.version = saved.version
        if stack.fbi is not None:
            for ps in (stack.fbi.psi, stack.fbi.phi, stack.fbi.varphi):
                ps.version = payload["params"]["fbi"]["version"]
        for name, opt in stack.optimizers.items():
            opt.load_state_dict(payload["optimizers"][name])
    except (KeyError, ConfigError, ValueError) as exc:
        raise LoadError(f"checkpoint/config mismatch: {exc}") from exc
    meta = {k: payload[k] for k in ("cycle", "step", "algorithm")}
    return stack, variant, config, meta


# ---------------------------------------------------------------------------
# metric log


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metric_row(step: int, batch: TrajectoryBatch, report: dict, task: str, wall: float) -> dict:
    row = {
        "step": step,
        "mean_episode_return": float(batch.episode_returns().mean()),
        "occupied_landmarks": float(batch.occupied[:, -1].mean()) if task == "CN" else None,
        "wall_time": round(wall, 3),
    }
    for key in METRIC_COLUMNS:
        if key not in row:
            row[key] = report.get(key)
    return row


def append_row(path: Path, columns, row: dict) -> None:
    new = not path.exists()
    with path.open("a") as fh:
        if new:
            fh.write("\t".join(columns) + "\n")
        fh.write("\t".join(_fmt(row.get(c)) for c in columns) + "\n")


def read_table(path) -> tuple[list[str], list[dict[str, str]]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path} is empty")
    header = lines[0].split("\t")
    return header, [dict(zip(header, ln.split("\t"))) for ln in lines[1:] if ln]


# ---------------------------------------------------------------------------
# driver


@dataclass
class RunArtifacts:
    out_dir: Path
    metrics_path: Path
    eval_path: Path | None
    checkpoints: list[Path]
    stack: AgentStack
    variant: Variant
    rows: list[dict]


def run(config: RunConfig, out_dir, resume=None, max_cycles: int | None = None) -> RunArtifacts:
    """Collect -> train -> soft-update until ``total_steps``; log, evaluate and checkpoint.

    ``resume`` continues from a checkpoint written by an earlier call with the
    same config; ``max_cycles`` stops early (used for interrupted runs).
    """
    from fam.evaluate import evaluate_stack  # deferred: evaluate imports this module

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(config.to_text())
    metrics_path = out_dir / "metrics.tsv"
    eval_path = out_dir / "eval.tsv" if config.eval_interval else None
    start = 0
    if resume is not None:
        stack, variant, saved_cfg, meta = load_checkpoint(resume)
        if saved_cfg.to_dict() != config.to_dict():
            raise LoadError("resume checkpoint was produced by a different config")
        start = meta["cycle"] + 1
    else:
        stack, variant = build_variant(config.algorithm, config)
        for p in (metrics_path,) + ((eval_path,) if eval_path else ()):
            if p.exists():
                p.unlink()
    checkpoints: list[Path] = []
    rows: list[dict] = []
    t0 = time.perf_counter()
    end = config.n_cycles if max_cycles is None else min(config.n_cycles, start + max_cycles)
    for cycle in range(start, end):
        batch = collect_rollouts(stack, variant, config, cycle)
        report = train_epoch(batch, stack, variant, config, cycle_generator(config.seed, cycle, 1))
        update_targets(stack, config.tau_soft)
        step = (cycle + 1) * config.steps_per_cycle
        row = metric_row(step, batch, report, config.env.task, time.perf_counter() - t0)
        append_row(metrics_path, METRIC_COLUMNS, row)
        rows.append(row)
        log.info("step %d return %.3f", step, row["mean_episode_return"])
        if config.eval_interval and step % config.eval_interval < config.steps_per_cycle:
            rep = evaluate_stack(stack, variant, config, config.eval_episodes, deterministic=True)
            append_row(
                eval_path,
                ("step", "avg_return", "avg_final_reward", "avg_occupied", "avg_distance"),
                {"step": step, **{k: getattr(rep, k) for k in ("avg_return", "avg_final_reward", "avg_occupied", "avg_distance")}},
            )
        last = cycle == config.n_cycles - 1
        if last or (config.checkpoint_interval and step % config.checkpoint_interval < config.steps_per_cycle):
            path = out_dir / "checkpoints" / f"ckpt_{step:09d}.pt"
            save_checkpoint(path, stack, variant, config, cycle)
            checkpoints.append(path)
            if last:
                save_checkpoint(out_dir / "checkpoints" / "final.pt", stack, variant, config, cycle)
                checkpoints.append(out_dir / "checkpoints" / "final.pt")
    return RunArtifacts(out_dir, metrics_path, eval_path, checkpoints, stack, variant, rows)
