"""Policy-gradient training through time.

The cue task trains with REINFORCE: a batch of episodes is rolled out on
one tape (episodes vectorized along the leading axis), the terminal reward
is discounted back to the decision step, and backpropagation runs through
every timestep of the spiking and plasticity dynamics. The toy continuous
task trains with PPO + GAE; stored rollouts are re-run through the network
each epoch to refresh the policy log-probabilities.

Episode RNG is derived per (seed, stream, iteration), so resuming from a
checkpoint replays exactly the draws an uninterrupted run would have seen.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoding import ActionCodec, PopulationCodec, gaussian_action, gaussian_log_prob
from .envs import (CueEpisode, CueTaskConfig, ToyVelocityConfig, ToyVelocityEnv,
                   cue_generate_batch, cue_reward, decide)
from .seeding import stream
from .snn import PlasticNetwork

log = logging.getLogger(__name__)

METRICS_HEADER = "iteration,loss,accuracy,mean_hidden_rate,lr,wall_time"


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite loss aborts training."""


class PPOUpdateError(RuntimeError):
    """Raised when the PPO objective turns non-finite."""


# --- optimizer --------------------------------------------------------------

class AdamOptimizer:
    """Adam with a linear learning-rate anneal from 1 to 0 over total_updates."""

    def __init__(self, params: dict[str, ad.Node], lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, total_updates: int | None = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.total_updates = total_updates
        self.step_count = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def lr_factor(self) -> float:
        if not self.total_updates or self.total_updates <= 1:
            return 1.0
        return max(0.0, 1.0 - self.step_count / (self.total_updates - 1))

    def current_lr(self) -> float:
        return self.lr * self.lr_factor()

    def step(self) -> float:
        """Apply one Adam update from accumulated .grad fields; returns the lr used."""
        for name, p in self.params.items():
            g = p.grad
            if g is not None and not np.all(np.isfinite(g)):
                log.warning("non-finite gradient for %s; skipping optimizer step", name)
                self.step_count += 1
                return self.current_lr()
        lr_eff = self.current_lr()
        t = self.step_count + 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            p.value = p.value - lr_eff * m_hat / (np.sqrt(v_hat) + self.eps)
        self.step_count += 1
        return lr_eff

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = arrays[f"adam.m.{name}"].copy()
            self.v[name] = arrays[f"adam.v.{name}"].copy()
        self.step_count = step_count


# --- REINFORCE on the cue task ----------------------------------------------

@dataclass
class CueBatchRecord:
    """One batched episode rollout, log-probs still attached to the tape."""

    episodes: list
    actions: np.ndarray          # (B,)
    log_probs: ad.Node           # (B,)
    rewards: np.ndarray          # (B,)
    decision_ends: np.ndarray    # (B,)
    horizon: int
    mean_hidden_rate: float


def rollout_cue(net: PlasticNetwork, episodes: list, policy_rng: np.random.Generator,
                full_horizon: bool = False) -> CueBatchRecord:
    """Run a batch of cue episodes through the network on one tape.

    Simulation stops at the last decision window unless full_horizon is
    set; steps past an episode's own decision cannot influence its outcome
    or gradient, but they do count toward activity reports.
    """
    B = len(episodes)
    net.reset(B)
    horizon = episodes[0].schedule.shape[1]
    ends = np.array([ep.decision_window[1] for ep in episodes])
    t_stop = horizon if full_horizon else int(ends.max())
    schedules = np.stack([ep.schedule for ep in episodes])  # (B, n_in, H)

    window_nodes, window_masks = [], []
    hidden_spike_sum = 0.0
    hidden_count = 0
    for t in range(t_stop):
        out = net.step(schedules[:, :, t])
        for layer in net.hidden_layers:
            s = layer.state.self_hist[-1].value
            hidden_spike_sum += float(s.sum())
            hidden_count += s.size
        mask = np.array([1.0 if ep.decision_window[0] <= t < ep.decision_window[1] else 0.0
                         for ep in episodes])[:, None]
        if mask.any():
            window_nodes.append(out)
            window_masks.append(mask)

    counts = ad.weighted_sum(window_nodes, window_masks)  # (B, 2) spike counts
    actions, log_probs = decide(counts, policy_rng)
    rewards = np.array([cue_reward(a, ep.correct_side) for a, ep in zip(actions, episodes)])
    return CueBatchRecord(episodes=episodes, actions=actions, log_probs=log_probs,
                          rewards=rewards, decision_ends=ends, horizon=horizon,
                          mean_hidden_rate=hidden_spike_sum / max(hidden_count, 1))


def discounted_returns(rewards: np.ndarray, discount: float) -> np.ndarray:
    """G_t = sum_k discount^k r_{t+k} (return-to-go)."""
    g = np.zeros(len(rewards))
    acc = 0.0
    for t in reversed(range(len(rewards))):
        acc = rewards[t] + discount * acc
        g[t] = acc
    return g


def reinforce_loss_steps(log_probs: list, rewards: np.ndarray, discount: float,
                         baseline: float = 0.0) -> ad.Node:
    """-sum_t (G_t - baseline) * log pi(a_t) for a single episode record."""
    if len(log_probs) == 0:
        raise ValueError("empty episode record")
    g = discounted_returns(np.asarray(rewards, dtype=np.float64), discount)
    return ad.weighted_sum(log_probs, list(-(g - baseline)))


def reinforce_loss(record: CueBatchRecord, discount: float, baseline: float = 0.0,
                   reward_mode: str = "discounted") -> tuple[ad.Node, np.ndarray]:
    """Batch-mean REINFORCE loss for the single-decision cue task.

    The terminal reward discounts back over horizon - t_decision steps
    ("discounted"), or counts at face value ("bandit").
    """
    if record.log_probs.value.size == 0:
        raise ValueError("empty episode record")
    if reward_mode == "discounted":
        g = record.rewards * discount ** (record.horizon - record.decision_ends)
    elif reward_mode == "bandit":
        g = record.rewards.astype(np.float64)
    else:
        raise ValueError(f"unknown reward mode {reward_mode!r}")
    adv = g - baseline
    loss = ad.mean(ad.hadamard(record.log_probs, ad.const(-adv)))
    return loss, g


@dataclass
class TrainRow:
    iteration: int
    loss: float
    accuracy: float
    mean_hidden_rate: float
    lr: float
    wall_time: float

    def csv(self) -> str:
        return (f"{self.iteration},{self.loss:.6f},{self.accuracy:.6f},"
                f"{self.mean_hidden_rate:.6f},{self.lr:.8g},{self.wall_time:.3f}")


class CueTrainer:
    """REINFORCE training loop with rolling-accuracy halting.

    All mutable training state (network parameters, Adam moments, the
    rolling outcome window, the return baseline, the iteration counter)
    lives on this object so a checkpoint can reproduce the run bit for bit.
    """

    def __init__(self, net: PlasticNetwork, env_cfg: CueTaskConfig, seed: int,
                 lr: float = 5e-4, total_updates: int = 500, batch_episodes: int = 16,
                 discount: float = 0.99, reward_mode: str = "discounted",
                 use_baseline: bool = True, halt_accuracy: float = 0.97,
                 rolling_window: int = 100):
        self.net = net
        self.env_cfg = env_cfg
        self.seed = seed
        self.batch_episodes = batch_episodes
        self.discount = discount
        self.reward_mode = reward_mode
        self.use_baseline = use_baseline
        self.halt_accuracy = halt_accuracy
        self.total_updates = total_updates
        self.optimizer = AdamOptimizer(net.parameters(), lr=lr, total_updates=total_updates)
        self.rolling: deque = deque(maxlen=rolling_window)
        self.baseline = 0.0
        self.iteration = 0
        self.halted_at: int | None = None
        self._t0 = time.perf_counter()

    @property
    def rolling_accuracy(self) -> float:
        return float(np.mean(self.rolling)) if self.rolling else 0.5

    def train_iteration(self) -> TrainRow:
        it = self.iteration
        env_rng = stream(self.seed, "env", it)
        policy_rng = stream(self.seed, "policy", it)
        episodes = cue_generate_batch(self.env_cfg, env_rng, self.batch_episodes)
        record = rollout_cue(self.net, episodes, policy_rng)
        baseline = self.baseline if self.use_baseline else 0.0
        loss, returns = reinforce_loss(record, self.discount, baseline, self.reward_mode)
        if not np.isfinite(loss.value):
            raise TrainingDiverged(f"non-finite training loss at iteration {it}")
        self.optimizer.zero_grad()
        ad.backward(loss)
        lr_used = self.optimizer.step()
        if self.use_baseline:
            self.baseline = 0.9 * self.baseline + 0.1 * float(returns.mean())
        for a, ep in zip(record.actions, record.episodes):
            self.rolling.append(1.0 if a == ep.correct_side else 0.0)
        self.iteration += 1
        acc = self.rolling_accuracy
        row = TrainRow(iteration=it, loss=-acc, accuracy=acc,
                       mean_hidden_rate=record.mean_hidden_rate, lr=lr_used,
                       wall_time=time.perf_counter() - self._t0)
        if len(self.rolling) == self.rolling.maxlen and acc >= self.halt_accuracy:
            self.halted_at = self.iteration
        return row

    def run(self, max_iterations: int | None = None, row_hook=None) -> list:
        budget = self.total_updates if max_iterations is None else max_iterations
        rows = []
        while self.iteration < budget and self.halted_at is None:
            row = self.train_iteration()
            rows.append(row)
            if row_hook is not None:
                row_hook(row)
        return rows


def eval_accuracy(net: PlasticNetwork | None, env_cfg: CueTaskConfig, trials: int,
                  rng_seed: int, policy=None, batch_size: int = 50) -> tuple[float, np.ndarray]:
    """Fraction of correct decisions over fresh episodes; parameters frozen.

    Plastic traces still evolve inside every episode. `policy` (episode ->
    action) replaces the network when given, for oracle and random probes.
    Returns (accuracy, per-trial outcomes).
    """
    outcomes = []
    counter = 0
    while len(outcomes) < trials:
        n = min(batch_size, trials - len(outcomes))
        env_rng = stream(rng_seed, "eval-env", counter)
        policy_rng = stream(rng_seed, "eval-policy", counter)
        episodes = cue_generate_batch(env_cfg, env_rng, n)
        if policy is not None:
            actions = [policy(ep) for ep in episodes]
        else:
            with ad.no_tape():
                record = rollout_cue(net, episodes, policy_rng)
            actions = record.actions
        outcomes.extend(1.0 if a == ep.correct_side else 0.0
                        for a, ep in zip(actions, episodes))
        counter += 1
    outcomes = np.array(outcomes[:trials])
    return float(outcomes.mean()), outcomes


def firing_rate_report(net: PlasticNetwork, env_cfg: CueTaskConfig, episodes: int = 100,
                       rng_seed: int = 0, batch_size: int = 50) -> float:
    """Mean hidden spikes per neuron per step over full-horizon episodes."""
    total, count = 0.0, 0
    counter = 0
    done = 0
    while done < episodes:
        n = min(batch_size, episodes - done)
        env_rng = stream(rng_seed, "rate-env", counter)
        policy_rng = stream(rng_seed, "rate-policy", counter)
        eps = cue_generate_batch(env_cfg, env_rng, n)
        with ad.no_tape():
            record = rollout_cue(net, eps, policy_rng, full_horizon=True)
        # mean_hidden_rate already aggregates spikes/neuron/step for the batch
        total += record.mean_hidden_rate * n
        count += n
        done += n
        counter += 1
    return total / count


# --- GAE / PPO ---------------------------------------------------------------

def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimation for one episode.

    values carries one extra bootstrap entry: len(values) == len(rewards)+1.
    Returns raw (unnormalized) advantages; batches are normalized in
    ppo_update.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(rewards) + 1:
        raise ValueError(f"need len(values) == len(rewards)+1, got {len(values)} vs {len(rewards)}")
    deltas = rewards + gamma * values[1:] - values[:-1]
    adv = np.zeros_like(rewards)
    acc = 0.0
    for t in reversed(range(len(rewards))):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


class ValueHead:
    """Linear state-value readout over hidden window rates (non-spiking)."""

    def __init__(self, n_features: int):
        self.w = ad.param(np.zeros(n_features))
        self.b = ad.param(0.0)

    def parameters(self) -> dict[str, ad.Node]:
        return {"value.w": self.w, "value.b": self.b}

    def predict(self, features: np.ndarray) -> ad.Node:
        return ad.add(ad.matvec(ad.const(features), self.w), self.b)

    def values(self, features: np.ndarray) -> np.ndarray:
        return features @ self.w.value + self.b.value


@dataclass
class ToyBatchRecord:
    """Stored PPO rollout: inputs replayable, actions and old log-probs fixed."""

    input_spikes: list           # per net step: (B, n_obs) arrays
    actions: np.ndarray          # (T, B, d) sampled actions
    old_log_probs: np.ndarray    # (T, B)
    rewards: np.ndarray          # (T, B)
    features: np.ndarray         # (T, B, F) hidden window rates at decisions
    mean_hidden_rate: float


def _hidden_features(net: PlasticNetwork) -> np.ndarray:
    return np.concatenate([layer.state.rate_post for layer in net.hidden_layers], axis=1)


def toy_forward(net: PlasticNetwork, record_inputs: list, act_codec: ActionCodec,
                n_steps: int) -> list:
    """Replay stored input spikes; returns the (B, d) action-mean node per RL step."""
    t_window = act_codec.t_window
    means = []
    interval_nodes = []
    for i, spikes in enumerate(record_inputs):
        out = net.step(spikes)
        interval_nodes.append(out)
        if (i + 1) % t_window == 0:
            means.append(act_codec.decode_node(interval_nodes))
            interval_nodes = []
    assert len(means) == n_steps
    return means


def rollout_toy(net: PlasticNetwork, env: ToyVelocityEnv, obs_codec: PopulationCodec,
                act_codec: ActionCodec, rng_obs: np.random.Generator,
                rng_policy: np.random.Generator, noise_kind: str | None = None,
                noise_sigma: float = 0.0, noise_rng: np.random.Generator | None = None) -> ToyBatchRecord:
    """Interact for one episode batch, storing everything PPO needs to replay."""
    B = env.batch
    cfg = env.cfg
    sigma_log = net.output_layer.params.sigma_log
    net.reset(B)
    obs = env.reset()
    if noise_kind == "friction":
        env.set_friction_noise(noise_rng.normal(0.0, noise_sigma, size=obs[:, :cfg.dims].shape))

    input_spikes, actions, old_lp, rewards, feats = [], [], [], [], []
    hidden_spike_sum, hidden_count = 0.0, 0
    interval_nodes = []
    for step in range(cfg.n_steps):
        for _ in range(act_codec.t_window):
            x = obs
            if noise_kind == "observation":
                x = x + noise_rng.normal(0.0, noise_sigma, size=x.shape)
            spikes = obs_codec.encode(x, rng_obs)
            input_spikes.append(spikes)
            out = net.step(spikes)
            interval_nodes.append(out)
            for layer in net.hidden_layers:
                s = layer.state.self_hist[-1].value
                hidden_spike_sum += float(s.sum())
                hidden_count += s.size
        mean_node = act_codec.decode_node(interval_nodes)
        interval_nodes = []
        sample, logp = gaussian_action(mean_node, sigma_log, rng_policy)
        act = sample
        if noise_kind == "action":
            act = act * (1.0 + noise_rng.normal(0.0, noise_sigma, size=act.shape))
        feats.append(_hidden_features(net))
        obs, r = env.step(act)
        actions.append(sample)
        old_lp.append(logp.value.copy())
        rewards.append(r)
    return ToyBatchRecord(input_spikes=input_spikes,
                          actions=np.stack(actions),
                          old_log_probs=np.stack(old_lp),
                          rewards=np.stack(rewards),
                          features=np.stack(feats),
                          mean_hidden_rate=hidden_spike_sum / max(hidden_count, 1))


@dataclass
class PPOStats:
    mean_ratio: float
    clip_fraction: float
    kl_estimate: float
    policy_loss: float
    value_loss: float


def ppo_update(record: ToyBatchRecord, net: PlasticNetwork, act_codec: ActionCodec,
               value_head: ValueHead, policy_opt: AdamOptimizer, value_opt: AdamOptimizer,
               gamma: float = 0.99, lam: float = 0.97, clip_eps: float = 0.2,
               epochs: int = 10) -> PPOStats:
    """Clipped-surrogate PPO over a stored rollout batch.

    Advantages come from GAE against the rollout-time value estimates and
    are normalized over the whole batch. Each epoch replays the stored
    input spikes through the network to refresh log-probabilities, then
    takes one Adam step on the policy and one on the value head (squared
    error against empirical returns).
    """
    T, B = record.rewards.shape
    flat_feats = record.features.reshape(T * B, -1)
    values = value_head.values(flat_feats).reshape(T, B)
    adv = np.zeros((T, B))
    returns = np.zeros((T, B))
    for b in range(B):
        v = np.append(values[:, b], 0.0)  # terminal bootstrap
        adv[:, b] = gae(record.rewards[:, b], v, gamma, lam)
        returns[:, b] = discounted_returns(record.rewards[:, b], gamma)
    adv = normalize_advantages(adv)

    sigma_log = net.output_layer.params.sigma_log
    stats = None
    for epoch in range(epochs):
        means = toy_forward(net, record.input_spikes, act_codec, T)
        step_logps = [gaussian_log_prob(record.actions[t], means[t], sigma_log)
                      for t in range(T)]
        logp_new = ad.record("concat", step_logps, axis=0)       # (T*B,)
        old = record.old_log_probs.reshape(T * B)
        ratio = ad.exp(ad.sub(logp_new, ad.const(old)))
        adv_flat = adv.reshape(T * B)
        obj_raw = ad.hadamard(ratio, ad.const(adv_flat))
        obj_clip = ad.hadamard(ad.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps),
                               ad.const(adv_flat))
        take_raw = (obj_raw.value <= obj_clip.value).astype(np.float64)
        minimum = ad.add(ad.hadamard(obj_raw, ad.const(take_raw)),
                         ad.hadamard(obj_clip, ad.const(1.0 - take_raw)))
        policy_loss = ad.negate(ad.mean(minimum))
        if not np.isfinite(policy_loss.value):
            raise PPOUpdateError(f"non-finite PPO objective at epoch {epoch}: "
                                 f"ratio range [{ratio.value.min()}, {ratio.value.max()}]")
        policy_opt.zero_grad()
        ad.backward(policy_loss)
        policy_opt.step()

        pred = value_head.predict(flat_feats)
        err = ad.sub(pred, ad.const(returns.reshape(T * B)))
        value_loss = ad.mean(ad.hadamard(err, err))
        value_opt.zero_grad()
        ad.backward(value_loss)
        value_opt.step()

        if epoch == 0:
            outside = np.abs(ratio.value - 1.0) > clip_eps
            stats = PPOStats(mean_ratio=float(ratio.value.mean()),
                             clip_fraction=float(outside.mean()),
                             kl_estimate=float((old - logp_new.value).mean()),
                             policy_loss=float(policy_loss.value),
                             value_loss=float(value_loss.value))
    return stats


@dataclass
class ToyTrainResult:
    rows: list
    net: PlasticNetwork
    value_head: ValueHead
    mean_returns: list


def train_toy_ppo(net: PlasticNetwork, env_cfg: ToyVelocityConfig, obs_codec: PopulationCodec,
                  act_codec: ActionCodec, seed: int, total_updates: int,
                  batch_episodes: int = 8, lr: float = 5e-4, value_lr: float = 1e-2,
                  gamma: float = 0.99, lam: float = 0.97, clip_eps: float = 0.2,
                  epochs: int = 10, row_hook=None, stop_return: float | None = None) -> ToyTrainResult:
    value_head = ValueHead(n_features=sum(net.layer_sizes[1:-1]))
    policy_opt = AdamOptimizer(net.parameters(), lr=lr, total_updates=total_updates)
    value_opt = AdamOptimizer(value_head.parameters(), lr=value_lr, total_updates=total_updates)
    rows, mean_returns = [], []
    t0 = time.perf_counter()
    for it in range(total_updates):
        env = ToyVelocityEnv(env_cfg, batch=batch_episodes)
        record = rollout_toy(net, env, obs_codec, act_codec,
                             rng_obs=stream(seed, "obs", it),
                             rng_policy=stream(seed, "policy", it))
        stats = ppo_update(record, net, act_codec, value_head, policy_opt, value_opt,
                           gamma=gamma, lam=lam, clip_eps=clip_eps, epochs=epochs)
        mean_return = float(record.rewards.sum(axis=0).mean())
        mean_returns.append(mean_return)
        row = TrainRow(iteration=it, loss=-mean_return, accuracy=mean_return,
                       mean_hidden_rate=record.mean_hidden_rate,
                       lr=policy_opt.current_lr(), wall_time=time.perf_counter() - t0)
        rows.append(row)
        if row_hook is not None:
            row_hook(row)
        if stop_return is not None and len(mean_returns) >= 3 \
                and np.mean(mean_returns[-3:]) >= stop_return:
            break
    return ToyTrainResult(rows=rows, net=net, value_head=value_head, mean_returns=mean_returns)


def eval_toy_return(net: PlasticNetwork, env_cfg: ToyVelocityConfig,
                    obs_codec: PopulationCodec, act_codec: ActionCodec, episodes: int,
                    rng_seed: int, noise_kind: str | None = None,
                    noise_sigma: float = 0.0, batch_size: int = 20) -> tuple[float, np.ndarray]:
    """Mean episode return under frozen parameters, optional noise injection."""
    returns = []
    counter = 0
    while len(returns) < episodes:
        n = min(batch_size, episodes - len(returns))
        env = ToyVelocityEnv(env_cfg, batch=n)
        with ad.no_tape():
            record = rollout_toy(net, env, obs_codec, act_codec,
                                 rng_obs=stream(rng_seed, "eval-obs", counter),
                                 rng_policy=stream(rng_seed, "eval-policy", counter),
                                 noise_kind=noise_kind, noise_sigma=noise_sigma,
                                 noise_rng=stream(rng_seed, "eval-noise", counter))
        returns.extend(record.rewards.sum(axis=0).tolist())
        counter += 1
    returns = np.array(returns[:episodes])
    return float(returns.mean()), returns
