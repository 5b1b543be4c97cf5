"""Latent-conditioned actor-critic losses: PPO clipped surrogate, TD critic, A2C.

Tensors are slot-major, ``(slots, n, ...)``, matching :mod:`fam.nn`. Every
loss returns one value per slot so that summing them yields each agent's own
gradient on disjoint parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch

from fam.errors import ConfigError, InputError
from fam.nn import ParamSet, mlp_forward

N_ACTIONS = 5


@dataclass
class PolicyOutput:
    probs: torch.Tensor
    action: torch.Tensor
    log_prob: torch.Tensor
    entropy: torch.Tensor


def net_input(x: torch.Tensor, z: torch.Tensor | None) -> torch.Tensor:
    """Concatenate features with a stop-gradient latent (``None`` means no latent)."""
    if z is None:
        return x
    return torch.cat([x, z.detach()], dim=-1)


def policy_logits(theta: ParamSet, obs: torch.Tensor, z: torch.Tensor | None) -> torch.Tensor:
    return mlp_forward(theta, net_input(obs, z))


def _entropy(logp: torch.Tensor) -> torch.Tensor:
    return -(logp.exp() * logp).sum(-1)


def act(
    theta: ParamSet,
    obs: torch.Tensor,
    z: torch.Tensor | None,
    mode: str = "sample",
    gen: torch.Generator | None = None,
) -> PolicyOutput:
    """Softmax policy over the five moves; ``greedy`` takes the argmax (lowest index on ties)."""
    logits = policy_logits(theta, obs, z)
    logp = torch.log_softmax(logits, dim=-1)
    probs = logp.exp()
    if mode == "greedy":
        action = logits.argmax(-1)
    elif mode == "sample":
        flat = probs.reshape(-1, probs.shape[-1])
        action = torch.multinomial(flat, 1, generator=gen).reshape(probs.shape[:-1])
    else:
        raise InputError(f"unknown mode {mode!r}")
    log_prob = logp.gather(-1, action.unsqueeze(-1)).squeeze(-1)
    return PolicyOutput(probs, action, log_prob, _entropy(logp))


def value(omega: ParamSet, obs: torch.Tensor, z: torch.Tensor | None) -> torch.Tensor:
    return mlp_forward(omega, net_input(obs, z)).squeeze(-1)


@dataclass
class Transitions:
    """Flattened transitions, every field ``(slots, n, ...)``.

    ``obs``/``z`` feed the actor, ``critic_obs`` the critic (equal to ``obs``
    for decentralised critics). ``terminal`` is 1 where the bootstrap from the
    next state is cut.
    """

    obs: torch.Tensor
    z: torch.Tensor | None
    critic_obs: torch.Tensor
    next_critic_obs: torch.Tensor
    next_z: torch.Tensor | None
    actions: torch.Tensor
    rewards: torch.Tensor
    terminal: torch.Tensor
    logp_old: torch.Tensor
    values: torch.Tensor
    returns: torch.Tensor
    advantages: torch.Tensor

    def __len__(self) -> int:
        return self.actions.shape[1]

    def select(self, idx: torch.Tensor) -> "Transitions":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = None if v is None else v[:, idx]
        return Transitions(**kw)


def _check_nonempty(tr: Transitions) -> None:
    if tr.actions.numel() == 0:
        raise InputError("empty batch")


def discounted_returns(
    rewards: torch.Tensor,
    terminal: torch.Tensor,
    gamma: float,
    bootstrap: torch.Tensor | None = None,
) -> torch.Tensor:
    """Backward recursion ``R_t = r_{t+1} + gamma * (1 - terminal_t) * R_{t+1}`` over the last axis.

    ``bootstrap`` supplies the value after the final step (used only where
    the final step is not terminal).
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigError("gamma must be in [0, 1)")
    t_len = rewards.shape[-1]
    out = torch.empty_like(rewards)
    nxt = torch.zeros_like(rewards[..., 0]) if bootstrap is None else bootstrap
    for t in reversed(range(t_len)):
        nxt = rewards[..., t] + gamma * (1.0 - terminal[..., t]) * nxt
        out[..., t] = nxt
    return out


def returns_and_advantages(
    rewards: torch.Tensor,
    terminal: torch.Tensor,
    values: torch.Tensor,
    gamma: float,
    bootstrap_values: torch.Tensor | None = None,
    normalize: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return-to-go and ``A = R - V`` for episodes laid out as ``(..., T)``.

    Advantages are normalised to zero mean and unit std over everything but
    the leading slot axis when ``normalize`` is set.
    """
    returns = discounted_returns(rewards, terminal, gamma, bootstrap_values)
    adv = returns - values
    if normalize:
        flat = adv.reshape(adv.shape[0], -1)
        mean = flat.mean(1)
        std = flat.std(1, unbiased=False) if flat.shape[1] > 1 else torch.ones_like(mean)
        shape = (-1,) + (1,) * (adv.dim() - 1)
        adv = (adv - mean.view(shape)) / (std.view(shape) + 1e-8)
    return returns, adv


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, epsilon: float) -> torch.Tensor:
    return torch.min(ratio * adv, ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * adv)


def actor_loss_ppo(theta: ParamSet, tr: Transitions, epsilon_clip: float = 0.2, entropy_coef: float = 0.01):
    """Negative clipped surrogate minus the entropy bonus, per slot.

    Returns ``(loss, stats)``; ``stats`` holds per-slot ``surrogate``,
    ``entropy`` and the raw ``ratio`` tensor.
    """
    _check_nonempty(tr)
    logp_all = torch.log_softmax(policy_logits(theta, tr.obs, tr.z), dim=-1)
    logp = logp_all.gather(-1, tr.actions.unsqueeze(-1)).squeeze(-1)
    ratio = torch.exp(logp - tr.logp_old)
    surrogate = clipped_surrogate(ratio, tr.advantages, epsilon_clip).mean(1)
    entropy = _entropy(logp_all).mean(1)
    loss = -surrogate - entropy_coef * entropy
    return loss, {"surrogate": surrogate, "entropy": entropy, "ratio": ratio}


def critic_loss(omega: ParamSet, omega_target: ParamSet, tr: Transitions, gamma: float):
    """Mean squared TD error against a frozen target critic, per slot."""
    _check_nonempty(tr)
    with torch.no_grad():
        nxt = value(omega_target, tr.next_critic_obs, tr.next_z)
        target = tr.rewards + gamma * (1.0 - tr.terminal) * nxt
    v = value(omega, tr.critic_obs, tr.z)
    return ((target - v) ** 2).mean(1)


def a2c_losses(theta: ParamSet, omega: ParamSet, tr: Transitions, entropy_coef: float = 0.01):
    """On-policy advantage actor-critic losses ``(actor, critic, stats)``, per slot."""
    _check_nonempty(tr)
    logp_all = torch.log_softmax(policy_logits(theta, tr.obs, tr.z), dim=-1)
    logp = logp_all.gather(-1, tr.actions.unsqueeze(-1)).squeeze(-1)
    entropy = _entropy(logp_all).mean(1)
    actor = -(logp * tr.advantages).mean(1) - entropy_coef * entropy
    v = value(omega, tr.critic_obs, tr.z)
    critic = ((tr.returns - v) ** 2).mean(1)
    return actor, critic, {"entropy": entropy}


MAX_ENTROPY = math.log(N_ACTIONS)

