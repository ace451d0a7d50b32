"""Task environments: the noisy cue-association maze and a toy velocity task.

The cue task presents a sequence of left/right cue periods as elevated
spike probability on dedicated input populations, then a silent rest
period, then a decision period flagged by its own population; a fourth
population fires task-independent noise throughout. The agent must pick
the side that produced the majority of cues.

The toy velocity environment is a d-dimensional point mass with linear
drag, rewarded for forward velocity minus an energy penalty. Its optimal
open-loop return has a closed form, which makes it a measurable stand-in
for physics-engine locomotion when exercising PPO/GAE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoding import PopulationCodec

LEFT, RIGHT = 0, 1
SIDE_NAMES = {LEFT: "L", RIGHT: "R"}

# input population layout: 10 left, 10 right, 10 decision, 10 noise
POP_SIZE = 10
N_POPS = 4


@dataclass
class CueTaskConfig:
    n_cues: int = 7
    cue_duration: int = 25
    rest_choices: tuple = (45, 75, 105)
    decision_duration: int = 25
    horizon: int = 500
    p_cue_event: float = 0.75
    p_cue_rest: float = 0.05
    p_noise_rest: float = 0.2
    pop_size: int = POP_SIZE
    no_input: bool = False    # suppress cue/decision events (spike-noise only)

    def __post_init__(self):
        if self.n_cues % 2 == 0:
            raise ValueError(f"n_cues must be odd for a strict majority, got {self.n_cues}")
        for name in ("p_cue_event", "p_cue_rest", "p_noise_rest"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")

    @property
    def n_inputs(self) -> int:
        return N_POPS * self.pop_size

    @classmethod
    def low_noise(cls, **kw) -> "CueTaskConfig":
        return cls(p_cue_event=0.75, p_cue_rest=0.05, p_noise_rest=0.2, **kw)

    @classmethod
    def high_noise(cls, **kw) -> "CueTaskConfig":
        return cls(p_cue_event=0.65, p_cue_rest=0.25, p_noise_rest=0.4, **kw)


@dataclass
class CueEpisode:
    cue_sides: list            # n_cues entries in {LEFT, RIGHT}
    schedule: np.ndarray       # (n_inputs, horizon) binary spikes
    correct_side: int
    decision_window: tuple     # [start, end) step interval

    @property
    def decision_end(self) -> int:
        return self.decision_window[1]


def _pop_slice(cfg: CueTaskConfig, pop: int) -> slice:
    return slice(pop * cfg.pop_size, (pop + 1) * cfg.pop_size)


def cue_generate(cfg: CueTaskConfig, rng: np.random.Generator) -> CueEpisode:
    """One episode: sides i.i.d. uniform, schedule sampled per configured probabilities."""
    sides = [int(s) for s in rng.integers(0, 2, size=cfg.n_cues)]
    rest = int(rng.choice(cfg.rest_choices))
    cue_block = cfg.n_cues * cfg.cue_duration
    dec_start = cue_block + rest
    dec_end = dec_start + cfg.decision_duration
    if dec_end > cfg.horizon:
        raise ValueError(f"schedule of {dec_end} steps exceeds horizon {cfg.horizon}")

    # baseline: cue-side and decision populations at rest, noise population always on
    prob = np.full((cfg.n_inputs, cfg.horizon), cfg.p_cue_rest)
    prob[_pop_slice(cfg, 3)] = cfg.p_noise_rest
    if not cfg.no_input:
        for i, side in enumerate(sides):
            t0 = i * cfg.cue_duration
            prob[_pop_slice(cfg, side), t0:t0 + cfg.cue_duration] = cfg.p_cue_event
        prob[_pop_slice(cfg, 2), dec_start:dec_end] = cfg.p_cue_event

    schedule = (rng.random(prob.shape) < prob).astype(np.float64)
    counts = np.bincount(sides, minlength=2)
    correct = int(np.argmax(counts))
    return CueEpisode(cue_sides=sides, schedule=schedule, correct_side=correct,
                      decision_window=(dec_start, dec_end))


def cue_generate_batch(cfg: CueTaskConfig, rng: np.random.Generator, batch: int) -> list:
    return [cue_generate(cfg, rng) for _ in range(batch)]


def decide(counts, rng: np.random.Generator):
    """Sample L/R from a two-way softmax over decision-window spike counts.

    `counts` may be a (2,) array, a (B, 2) array, or a tape node of either
    shape; with a node input the returned log-probabilities stay on the
    tape (gradients flow into the spiking activity behind the counts).
    Returns (action, log_prob) with a leading batch axis iff the input had one.
    """
    node = counts if ad.is_node(counts) else ad.const(counts)
    vals = np.atleast_2d(node.value)
    if vals.shape[-1] != 2:
        raise ValueError(f"decide expects two output counts, got shape {node.value.shape}")
    shifted = vals - vals.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    actions = (rng.random(vals.shape[0]) < probs[:, RIGHT]).astype(int)

    batched = node.value.ndim == 2
    shift_const = node.value.max(axis=1, keepdims=True) if batched else node.value.max()
    stable = ad.sub(node, ad.const(shift_const))
    axis = 1 if batched else None
    log_z = ad.log(ad.sum_(ad.exp(stable), axis=axis))
    onehot = np.zeros_like(vals)
    onehot[np.arange(vals.shape[0]), actions] = 1.0
    onehot = onehot if batched else onehot[0]
    chosen = ad.sum_(ad.hadamard(stable, ad.const(onehot)), axis=axis)
    log_prob = ad.sub(chosen, log_z)
    if not batched:
        return int(actions[0]), log_prob
    return actions, log_prob


def cue_reward(action: int, correct_side: int) -> float:
    return 1.0 if action == correct_side else -1.0


def serialize_episode(ep: CueEpisode) -> str:
    """Columnar text: one `step,neuron,spike` row per spike event."""
    lines = [f"# horizon={ep.schedule.shape[1]} n_inputs={ep.schedule.shape[0]} "
             f"correct={SIDE_NAMES[ep.correct_side]} "
             f"decision={ep.decision_window[0]}:{ep.decision_window[1]}",
             "step,neuron,spike"]
    neurons, steps = np.nonzero(ep.schedule)
    order = np.lexsort((neurons, steps))
    for i in order:
        lines.append(f"{steps[i]},{neurons[i]},1")
    return "\n".join(lines) + "\n"


@dataclass
class ToyVelocityConfig:
    dims: int = 2
    n_steps: int = 10            # RL steps per episode
    drag: float = 0.2
    gain: float = 0.5            # force/mass per unit action
    energy_cost: float = 0.1
    pos_bound: float = 25.0
    vel_bound: float = 5.0


class ToyVelocityEnv:
    """Point mass per dimension: v' = (1-drag) v + gain*a, reward sum(v') - c*|a|^2."""

    def __init__(self, cfg: ToyVelocityConfig, batch: int = 1):
        self.cfg = cfg
        self.batch = batch
        self.vel = np.zeros((batch, cfg.dims))
        self.pos = np.zeros((batch, cfg.dims))
        self.t = 0
        self.drag = np.full((batch, cfg.dims), cfg.drag)

    def reset(self) -> np.ndarray:
        self.vel[:] = 0.0
        self.pos[:] = 0.0
        self.t = 0
        self.drag[:] = self.cfg.drag
        return self.observe()

    def set_friction_noise(self, z: np.ndarray) -> None:
        """Episode-constant percentage perturbation of the drag constants."""
        self.drag = self.cfg.drag * (1.0 + z)

    def observe(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel], axis=1)

    def step(self, action: np.ndarray):
        action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        self.vel = (1.0 - self.drag) * self.vel + self.cfg.gain * action
        self.pos = self.pos + self.vel
        self.t += 1
        reward = self.vel.sum(axis=1) - self.cfg.energy_cost * (action ** 2).sum(axis=1)
        return self.observe(), reward

    def observation_codec(self, p_dim: int = 16, theta_min: float = 0.05) -> PopulationCodec:
        c = self.cfg
        bounds = ([(-c.pos_bound, c.pos_bound)] * c.dims) + ([(-c.vel_bound, c.vel_bound)] * c.dims)
        return PopulationCodec(bounds=np.array(bounds), p_dim=p_dim, theta_min=theta_min)


def toy_action_weights(cfg: ToyVelocityConfig) -> np.ndarray:
    """Per-step marginal return of one unit of action, for the closed-form optimum.

    With v_k = (1-drag) v_{k-1} + gain*a_k, the episode velocity sum is
    linear in each a_k with weight gain * sum_{j>=0}^{remaining} (1-drag)^j.
    """
    decay = 1.0 - cfg.drag
    n = cfg.n_steps
    w = np.empty(n)
    for k in range(n):
        remaining = n - k
        w[k] = cfg.gain * (1.0 - decay ** remaining) / (1.0 - decay)
    return w


def toy_optimal_return(cfg: ToyVelocityConfig) -> float:
    """Exact optimum of the undiscounted episode return over open-loop actions.

    The return decouples per step and dimension into w_k a - c a^2,
    maximized at a = w_k / (2c) clipped to [-1, 1].
    """
    w = toy_action_weights(cfg)
    a = np.clip(w / (2.0 * cfg.energy_cost), -1.0, 1.0)
    per_dim = float(np.sum(w * a - cfg.energy_cost * a ** 2))
    return cfg.dims * per_dim


def toy_constant_action_return(cfg: ToyVelocityConfig, a: float) -> float:
    """Closed-form return of holding the same action every step (per all dims)."""
    w = toy_action_weights(cfg)
    per_dim = float(np.sum(w * a - cfg.energy_cost * a ** 2))
    return cfg.dims * per_dim
