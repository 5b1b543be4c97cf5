import numpy as np
import pytest
import torch

from fam import env as env_mod
from fam import fbi as fbi_mod
from fam import rl
from fam.config import RunConfig
from fam.env import EnvConfig
from fam.errors import ConfigError, InputError, LoadError
from fam.trainer import (
    METRIC_COLUMNS,
    build_variant,
    collect_rollouts,
    compute_returns,
    cycle_generator,
    load_checkpoint,
    read_table,
    rl_losses,
    run,
    save_checkpoint,
    train_epoch,
    update_targets,
)


def small(algorithm="fam", n_agents=3, task="CN", **kw):
    env = EnvConfig.cn(n_agents, n_agents) if task == "CN" else EnvConfig.pp(n_agents, 1)
    base = dict(env=env, algorithm=algorithm, total_steps=4 * 25, batch_episodes=4, n_envs=2, hidden=16, seed=3)
    base.update(kw)
    return RunConfig(**base)


def snapshot(ps):
    return {k: v.detach().clone() for k, v in ps.items()}


def same(a, b):
    return set(a) == set(b) and all(torch.equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------------------
# wiring


@pytest.mark.parametrize(
    "name, actor_in, critic_in, has_fbi",
    [
        ("fam", 14 + 5, 14 + 5, True),
        ("fam_wo_in_oa", 14 + 5, 14 + 5, True),
        ("ippo", 14, 14, False),
        ("ia2c", 14, 14, False),
        ("mappo", 14, 3 * 14, False),
        ("maa2c", 14, 3 * 14, False),
    ],
)
def test_variant_input_widths(name, actor_in, critic_in, has_fbi):
    stack, variant = build_variant(name, small(name))
    assert stack.actor["0.w"].shape == (3, actor_in, 16)
    assert stack.critic["0.w"].shape == (3, critic_in, 16)
    assert (stack.fbi is not None) == has_fbi
    assert variant.name == name


def test_ablation_decoder_inputs():
    stack, _ = build_variant("fam_wo_in_oa", small())
    assert stack.fbi.phi["0.w"].shape[1] == 5
    stack, _ = build_variant("fam", small())
    assert stack.fbi.phi["0.w"].shape[1] == 14 + 5 + 5


def test_unknown_variant_rejected():
    with pytest.raises(ConfigError):
        build_variant("qmix", small())
    with pytest.raises(ConfigError):
        small("qmix")


def test_agents_have_disjoint_parameters_unless_shared():
    stack, _ = build_variant("fam", small())
    w = stack.actor["0.w"]
    assert not torch.equal(w[0], w[1])
    shared, _ = build_variant("fam", small(share_params=True))
    assert shared.actor["0.w"].shape[0] == 1


@pytest.mark.parametrize("name", ["fam_wo_rec_rew", "fam_wo_rec_obs"])
def test_ablation_loss_report_components(name):
    cfg = small(name)
    stack, variant = build_variant(name, cfg)
    batch = collect_rollouts(stack, variant, cfg, 0)
    report = train_epoch(batch, stack, variant, cfg, cycle_generator(cfg.seed, 0, 1))
    dropped = "recon_rew" if name == "fam_wo_rec_rew" else "recon_obs"
    kept = "recon_obs" if name == "fam_wo_rec_rew" else "recon_rew"
    assert dropped not in report
    assert kept in report and "kl" in report


# ---------------------------------------------------------------------------
# rollouts


def test_rollout_counting():
    cfg = small(n_agents=5, batch_episodes=10, total_steps=250, n_envs=4)
    stack, variant = build_variant("fam", cfg)
    batch = collect_rollouts(stack, variant, cfg, 0)
    assert batch.actions.shape == (5, 10, 25)
    assert batch.obs.shape == (5, 10, 26, 14)
    assert batch.rewards.shape == (10, 25)
    assert batch.z.shape == (5, 10, 26, 5)
    assert len(batch.transitions()) == 10 * 25


def test_rollouts_are_deterministic():
    cfg = small()
    stack, variant = build_variant("fam", cfg)
    a = collect_rollouts(stack, variant, cfg, 2)
    b = collect_rollouts(stack, variant, cfg, 2)
    for k in ("obs", "actions", "rewards", "logp", "values", "z"):
        assert torch.equal(getattr(a, k), getattr(b, k)), k
    assert not torch.equal(a.actions, collect_rollouts(stack, variant, cfg, 3).actions)


@pytest.mark.parametrize("task", ["CN", "PP"])
def test_recorded_rewards_replay_through_env(task):
    cfg = small(task=task)
    stack, variant = build_variant("fam", cfg)
    batch = collect_rollouts(stack, variant, cfg, 0)
    for e in range(batch.n_episodes):
        for t in range(25):
            state = env_mod.WorldState(batch.positions[e, t + 1], np.zeros_like(batch.positions[e, t + 1]))
            assert batch.rewards[e, t].item() == env_mod.team_reward(state, cfg.env)


def test_initial_encoder_input_is_zero_padded():
    cfg = small()
    stack, variant = build_variant("fam", cfg)
    fb = collect_rollouts(stack, variant, cfg, 0).fbi_batch()
    assert torch.all(fb.enc_inputs[:, :, 0, 14:] == 0)
    assert torch.equal(fb.enc_inputs[:, :, 1:, 14:19], fb.actions[:, :, :-1])


def test_stored_latents_match_encoder_replay():
    cfg = small()
    stack, variant = build_variant("fam", cfg)
    batch = collect_rollouts(stack, variant, cfg, 0)
    mu, ls = fbi_mod.encode_sequence(stack.fbi.psi, batch.fbi_batch().enc_inputs)
    assert torch.allclose(mu, batch.mu[:, :, :25], atol=1e-5)
    assert torch.allclose(ls, batch.log_sigma[:, :, :25], atol=1e-5)


# ---------------------------------------------------------------------------
# updates


def test_zero_learning_rates_leave_parameters_unchanged():
    cfg = small(alpha1=0.0, alpha2=0.0, epochs=1)
    stack, variant = build_variant("fam", cfg)
    before = {k: snapshot(v) for k, v in stack.networks().items()}
    batch = collect_rollouts(stack, variant, cfg, 0)
    train_epoch(batch, stack, variant, cfg, cycle_generator(cfg.seed, 0, 1))
    for k, ps in stack.networks().items():
        assert same(snapshot(ps), before[k]), k


def test_empty_batch_rejected():
    cfg = small()
    stack, variant = build_variant("fam", cfg)
    batch = collect_rollouts(stack, variant, cfg, 0).select(torch.tensor([], dtype=torch.long))
    with pytest.raises(InputError):
        train_epoch(batch, stack, variant, cfg)


def test_loss_report_matches_independent_recomputation():
    cfg = small(alpha1=0.0, alpha2=0.0, epochs=1, minibatches=1)
    stack, variant = build_variant("fam", cfg)
    batch = collect_rollouts(stack, variant, cfg, 0)
    compute_returns(batch, stack, variant, cfg)
    tr = batch.transitions()
    actor, _ = rl.actor_loss_ppo(stack.actor, tr, cfg.epsilon_clip, cfg.entropy_coef)
    critic = rl.critic_loss(stack.critic, stack.critic_target, tr, cfg.gamma)
    gen = cycle_generator(cfg.seed, 0, 1)
    perm = torch.randperm(batch.n_episodes, generator=gen)
    fbi_loss, _ = fbi_mod.fbi_loss(batch.select(perm).fbi_batch(), stack.fbi, gen)
    report = train_epoch(batch, stack, variant, cfg, cycle_generator(cfg.seed, 0, 1))
    assert report["loss_actor"] == pytest.approx(actor.mean().item(), abs=1e-6)
    assert report["loss_critic"] == pytest.approx(critic.mean().item(), abs=1e-6)
    assert report["loss_fbi"] == pytest.approx(fbi_loss.mean().item(), abs=1e-6)
    expected_total = actor.mean().item() + critic.mean().item() + fbi_loss.mean().item()
    assert report["loss_total"] == pytest.approx(expected_total, abs=1e-5)


def test_rl_updates_never_touch_encoder():
    cfg = small(alpha2=0.0, total_steps=10 * 100)
    stack, variant = build_variant("fam", cfg)
    before = snapshot(stack.fbi.all_params())
    actor_before = snapshot(stack.actor)
    for cycle in range(10):
        batch = collect_rollouts(stack, variant, cfg, cycle)
        train_epoch(batch, stack, variant, cfg, cycle_generator(cfg.seed, cycle, 1))
        update_targets(stack, cfg.tau_soft)
    assert same(snapshot(stack.fbi.all_params()), before)
    assert not same(snapshot(stack.actor), actor_before)


def test_fbi_parameters_move_when_trained():
    cfg = small()
    stack, variant = build_variant("fam", cfg)
    before = snapshot(stack.fbi.all_params())
    batch = collect_rollouts(stack, variant, cfg, 0)
    train_epoch(batch, stack, variant, cfg, cycle_generator(cfg.seed, 0, 1))
    assert not same(snapshot(stack.fbi.all_params()), before)


def test_fam_with_zero_latent_matches_ippo_losses():
    cfg_fam = small("fam", beta=0.0, zero_latent=True)
    cfg_ippo = small("ippo")
    fam_stack, fam_var = build_variant("fam", cfg_fam)
    ippo_stack, ippo_var = build_variant("ippo", cfg_ippo)
    # give fam the ippo weights on the observation inputs; the latent inputs see zeros
    with torch.no_grad():
        for name in ("actor", "critic", "critic_target"):
            dst, src = getattr(fam_stack, name), getattr(ippo_stack, name)
            for k in dst:
                if k == "0.w":
                    dst[k][:, :14] = src[k]
                else:
                    dst[k].copy_(src[k])
    batch = collect_rollouts(ippo_stack, ippo_var, cfg_ippo, 0)
    compute_returns(batch, ippo_stack, ippo_var, cfg_ippo)
    fam_batch = collect_rollouts(fam_stack, fam_var, cfg_fam, 0)
    assert torch.equal(fam_batch.actions, batch.actions)
    assert torch.all(fam_batch.z == 0)
    tr = batch.transitions()
    tr_fam = rl.Transitions(**{**tr.__dict__, "z": torch.zeros(*tr.obs.shape[:2], 5), "next_z": torch.zeros(*tr.obs.shape[:2], 5)})
    a1, c1, e1 = rl_losses(ippo_stack, ippo_var, tr, cfg_ippo)
    a2, c2, e2 = rl_losses(fam_stack, fam_var, tr_fam, cfg_fam)
    assert torch.allclose(a1, a2, atol=1e-6)
    assert torch.allclose(c1, c2, atol=1e-6)
    assert torch.allclose(e1, e2, atol=1e-6)


def test_soft_update_keeps_target_between_online_and_previous():
    cfg = small(tau_soft=0.3)
    stack, variant = build_variant("fam", cfg)
    for cycle in range(3):
        batch = collect_rollouts(stack, variant, cfg, cycle)
        train_epoch(batch, stack, variant, cfg, cycle_generator(cfg.seed, cycle, 1))
        old = snapshot(stack.critic_target)
        update_targets(stack, cfg.tau_soft)
        for k, v in stack.critic_target.items():
            online = stack.critic[k].detach()
            lo, hi = torch.minimum(old[k], online), torch.maximum(old[k], online)
            assert torch.all((v >= lo - 1e-7) & (v <= hi + 1e-7))
            assert torch.allclose(v, 0.7 * old[k] + 0.3 * online, atol=1e-7)


@pytest.mark.parametrize("name", ["ia2c", "maa2c", "mappo", "fam_wo_in_oa"])
def test_baselines_train(name):
    cfg = small(name)
    stack, variant = build_variant(name, cfg)
    before = snapshot(stack.actor)
    batch = collect_rollouts(stack, variant, cfg, 0)
    report = train_epoch(batch, stack, variant, cfg, cycle_generator(cfg.seed, 0, 1))
    assert not report["aborted"]
    assert np.isfinite(report["loss_actor"]) and np.isfinite(report["loss_critic"])
    assert not same(snapshot(stack.actor), before)


def test_nonfinite_loss_aborts_cycle_but_run_continues():
    cfg = small()
    stack, variant = build_variant("fam", cfg)
    batch = collect_rollouts(stack, variant, cfg, 0)
    compute_returns(batch, stack, variant, cfg)
    batch.advantages[0, 0, 0] = float("nan")
    report = train_epoch(batch, stack, variant, cfg, cycle_generator(cfg.seed, 0, 1))
    assert report["aborted"]
    batch = collect_rollouts(stack, variant, cfg, 1)
    assert not train_epoch(batch, stack, variant, cfg, cycle_generator(cfg.seed, 1, 1))["aborted"]


# ---------------------------------------------------------------------------
# driver, logs, checkpoints


def test_single_cycle_run(tmp_path):
    cfg = small(total_steps=100)
    art = run(cfg, tmp_path)
    header, rows = read_table(art.metrics_path)
    assert header == list(METRIC_COLUMNS)
    assert len(rows) == 1 and int(rows[0]["step"]) == 100
    assert (tmp_path / "checkpoints" / "final.pt").is_file()
    assert RunConfig.from_text((tmp_path / "config.cfg").read_text()) == cfg


def test_metric_row_count(tmp_path):
    cfg = small(total_steps=5 * 100)
    art = run(cfg, tmp_path)
    assert len(read_table(art.metrics_path)[1]) == cfg.total_steps // cfg.steps_per_cycle == 5


def test_pp_log_leaves_occupancy_empty(tmp_path):
    cfg = small("ippo", task="PP")
    _, rows = read_table(run(cfg, tmp_path).metrics_path)
    assert rows[0]["occupied_landmarks"] == ""
    assert rows[0]["loss_fbi"] == ""


def _without_wall(rows):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]


def test_identical_configs_give_identical_logs(tmp_path):
    cfg = small(total_steps=3 * 100)
    a = read_table(run(cfg, tmp_path / "a").metrics_path)[1]
    b = read_table(run(cfg, tmp_path / "b").metrics_path)[1]
    assert _without_wall(a) == _without_wall(b)


def test_resume_reproduces_remaining_rows(tmp_path):
    cfg = small(total_steps=4 * 100, checkpoint_interval=200)
    full = read_table(run(cfg, tmp_path / "full").metrics_path)[1]
    part = run(cfg, tmp_path / "part", max_cycles=2)
    ckpt = tmp_path / "part" / "checkpoints" / "ckpt_000000200.pt"
    assert ckpt in part.checkpoints
    resumed = read_table(run(cfg, tmp_path / "part", resume=ckpt).metrics_path)[1]
    assert _without_wall(resumed) == _without_wall(full)


def test_checkpoint_round_trip(tmp_path):
    cfg = small()
    stack, variant = build_variant("fam", cfg)
    batch = collect_rollouts(stack, variant, cfg, 0)
    train_epoch(batch, stack, variant, cfg)
    save_checkpoint(tmp_path / "c.pt", stack, variant, cfg, 0)
    stack2, variant2, cfg2, meta = load_checkpoint(tmp_path / "c.pt")
    assert cfg2 == cfg and variant2 == variant and meta["cycle"] == 0
    for k, ps in stack.networks().items():
        assert ps.equal(stack2.networks()[k]), k


def test_checkpoint_errors(tmp_path):
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "missing.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "junk.pt")
    cfg = small(total_steps=100)
    run(cfg, tmp_path / "r")
    with pytest.raises(LoadError):
        run(cfg.replace(alpha1=1e-2), tmp_path / "r2", resume=tmp_path / "r" / "checkpoints" / "final.pt")


def test_checkpoint_with_mismatched_shapes(tmp_path):
    cfg = small()
    stack, variant = build_variant("fam", cfg)
    save_checkpoint(tmp_path / "c.pt", stack, variant, cfg, 0)
    payload = torch.load(tmp_path / "c.pt", weights_only=False)
    payload["params"]["actor"]["tensors"] = {k: v[:, :1] for k, v in payload["params"]["actor"]["tensors"].items()}
    torch.save(payload, tmp_path / "bad.pt")
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "bad.pt")
