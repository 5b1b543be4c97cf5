"""Belief inference over other agents from an agent's own (observation, action, reward) stream.

A recurrent variational encoder reads ``(o_t, u_{t-1}, r_t)`` and emits a
diagonal Gaussian over a ``d``-dimensional latent. Two feed-forward decoders
predict the next observation and the next reward from ``(o_t, u_t, z_t)``;
their squared errors plus a weighted KL to the standard normal form the
training loss.

All tensors use the agent-slot layout of :mod:`fam.nn`: encoder inputs are
``(slots, batch, width)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from fam.errors import InputError
from fam.nn import ParamSet, RecurrentState, affine, gru_cell, init_gru, init_mlp, mlp_forward

LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 2.0


@dataclass
class BeliefPosterior:
    mu: torch.Tensor
    log_sigma: torch.Tensor
    z: torch.Tensor
    state: RecurrentState


@dataclass
class FbiParams:
    psi: ParamSet  # encoder: "fc.0.*", "gru.*", "head.0.*"
    phi: ParamSet  # observation decoder
    varphi: ParamSet  # reward decoder
    beta: float = 0.001
    decoder_uses_oa: bool = True
    recon_obs: bool = True
    recon_rew: bool = True

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise InputError("beta must be >= 0")

    def all_params(self) -> ParamSet:
        out = ParamSet()
        for prefix, ps in (("psi", self.psi), ("phi", self.phi), ("varphi", self.varphi)):
            for k, v in ps.items():
                out.tensors[f"{prefix}.{k}"] = v
        return out


def init_fbi(
    obs_dim: int,
    n_actions: int,
    gen: torch.Generator,
    slots: int | None = None,
    latent_dim: int = 5,
    hidden: int = 64,
    beta: float = 0.001,
    decoder_uses_oa: bool = True,
    recon_obs: bool = True,
    recon_rew: bool = True,
) -> FbiParams:
    enc_in = obs_dim + n_actions + 1
    fc, _ = init_mlp([enc_in, hidden], gen, slots, out_gain=math.sqrt(2.0))
    gru = init_gru(hidden, hidden, gen, slots)
    head, _ = init_mlp([hidden, 2 * latent_dim], gen, slots, out_gain=0.01)
    psi = ParamSet()
    for prefix, ps in (("fc", fc), ("gru", gru), ("head", head)):
        for k, v in ps.items():
            psi.tensors[f"{prefix}.{k}"] = v
    dec_in = obs_dim + n_actions + latent_dim if decoder_uses_oa else latent_dim
    phi, _ = init_mlp([dec_in, hidden, hidden, obs_dim], gen, slots)
    varphi, _ = init_mlp([dec_in, hidden, hidden, 1], gen, slots)
    fbi = FbiParams(psi, phi, varphi, beta, decoder_uses_oa, recon_obs, recon_rew)
    fbi.all_params().requires_grad_(True)
    return fbi


def latent_dim(psi: ParamSet) -> int:
    return psi["head.0.w"].shape[-1] // 2


def encoder_input(obs: torch.Tensor, prev_action_onehot: torch.Tensor, reward: torch.Tensor) -> torch.Tensor:
    if reward.dim() == obs.dim() - 1:
        reward = reward.unsqueeze(-1)
    return torch.cat([obs, prev_action_onehot, reward], dim=-1)


def encode_step(
    psi: ParamSet,
    state: RecurrentState,
    obs: torch.Tensor,
    prev_action_onehot: torch.Tensor,
    reward: torch.Tensor,
) -> tuple[RecurrentState, torch.Tensor, torch.Tensor]:
    """One encoder step: ReLU feature layer, GRU update, linear (mu, log_sigma) head."""
    x = encoder_input(obs, prev_action_onehot, reward)
    feat = torch.relu(affine(x, psi["fc.0.w"], psi["fc.0.b"]))
    h = gru_cell(psi.scope("gru"), state.hidden, feat)
    out = affine(h, psi["head.0.w"], psi["head.0.b"])
    mu, log_sigma = out.chunk(2, dim=-1)
    log_sigma = log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return RecurrentState(h, state.step + 1), mu, log_sigma


def encode_sequence(psi: ParamSet, inputs: torch.Tensor, h0: torch.Tensor | None = None):
    """Run the encoder over ``inputs`` shaped ``(slots, batch, T, width)``.

    Returns ``mu, log_sigma`` of shape ``(slots, batch, T, d)``. The feature and
    head layers are applied to all steps at once; only the GRU is sequential.
    """
    s, b, t, w = inputs.shape
    feat = torch.relu(affine(inputs.reshape(s, b * t, w), psi["fc.0.w"], psi["fc.0.b"])).reshape(s, b, t, -1)
    hidden = psi["gru.w_hh"].shape[-2]
    h = torch.zeros(s, b, hidden, dtype=inputs.dtype) if h0 is None else h0
    gru = psi.scope("gru")
    hs = []
    for k in range(t):
        h = gru_cell(gru, h, feat[:, :, k])
        hs.append(h)
    hs = torch.stack(hs, dim=2).reshape(s, b * t, hidden)
    out = affine(hs, psi["head.0.w"], psi["head.0.b"]).reshape(s, b, t, -1)
    mu, log_sigma = out.chunk(2, dim=-1)
    return mu, log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)


def sample_latent(mu: torch.Tensor, log_sigma: torch.Tensor, epsilon: torch.Tensor) -> torch.Tensor:
    """Reparameterised draw ``mu + exp(log_sigma) * epsilon``."""
    return mu + torch.exp(log_sigma) * epsilon


def decoder_input(obs: torch.Tensor, action_onehot: torch.Tensor, z: torch.Tensor, uses_oa: bool = True) -> torch.Tensor:
    return torch.cat([obs, action_onehot, z], dim=-1) if uses_oa else z


def decode_obs(phi: ParamSet, obs, action_onehot, z, uses_oa: bool = True) -> torch.Tensor:
    return mlp_forward(phi, decoder_input(obs, action_onehot, z, uses_oa))


def decode_rew(varphi: ParamSet, obs, action_onehot, z, uses_oa: bool = True) -> torch.Tensor:
    return mlp_forward(varphi, decoder_input(obs, action_onehot, z, uses_oa)).squeeze(-1)


def kl_to_standard_normal(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over the last axis."""
    return -0.5 * (1.0 + 2.0 * log_sigma - mu**2 - torch.exp(2.0 * log_sigma)).sum(-1)


@dataclass
class FbiBatch:
    """Aligned transitions for the belief-inference loss, slot-major.

    ``enc_inputs`` (slots, B, T, w) are the encoder triplets for steps 0..T-1,
    ``obs``/``actions`` are o_t and one-hot u_t, ``next_obs``/``next_reward``
    the facts o_{t+1}, r_{t+1}. ``mask`` (B, T) marks valid steps.
    """

    enc_inputs: torch.Tensor
    obs: torch.Tensor
    actions: torch.Tensor
    next_obs: torch.Tensor
    next_reward: torch.Tensor
    mask: torch.Tensor | None = None
    epsilon: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


def fbi_loss(batch: FbiBatch, params: FbiParams, gen: torch.Generator | None = None):
    """Mean over transitions of squared obs error + squared reward error + beta * KL.

    Returns ``(loss, components)`` where ``loss`` has one entry per slot and
    ``components`` maps ``recon_obs`` / ``recon_rew`` / ``kl`` to per-slot means
    (disabled reconstruction terms are absent).
    """
    if batch.enc_inputs.numel() == 0:
        raise InputError("empty batch")
    mu, log_sigma = encode_sequence(params.psi, batch.enc_inputs)
    eps = batch.epsilon
    if eps is None:
        eps = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
    z = sample_latent(mu, log_sigma, eps)
    s, b, t, _ = z.shape
    flat = lambda x: x.reshape(s, b * t, -1)  # noqa: E731
    dec_in = flat(decoder_input(batch.obs, batch.actions, z, params.decoder_uses_oa))
    mask = torch.ones(b, t, dtype=mu.dtype) if batch.mask is None else batch.mask.to(mu.dtype)
    n = mask.sum()

    def mean(x: torch.Tensor) -> torch.Tensor:  # x (s, b, t)
        return (x * mask).sum((1, 2)) / n

    comps = {}
    total = torch.zeros(s, dtype=mu.dtype)
    if params.recon_obs:
        pred = mlp_forward(params.phi, dec_in).reshape(s, b, t, -1)
        comps["recon_obs"] = mean(((pred - batch.next_obs) ** 2).sum(-1))
        total = total + comps["recon_obs"]
    if params.recon_rew:
        pred = mlp_forward(params.varphi, dec_in).reshape(s, b, t)
        comps["recon_rew"] = mean((pred - batch.next_reward) ** 2)
        total = total + comps["recon_rew"]
    comps["kl"] = mean(kl_to_standard_normal(mu, log_sigma))
    total = total + params.beta * comps["kl"]
    return total, comps
