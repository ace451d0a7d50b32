"""Population spike codecs and noise injection.

Scalars are encoded by banks of place-coded neurons whose spike
probability decays exponentially with squared distance from each neuron's
preferred value, floored at a global baseline probability. Actions are
decoded from signed halves of an output population averaged over a fixed
integration window, landing in [-1, 1] before an affine map to the target
range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

LOG_2PI = float(np.log(2.0 * np.pi))


def place_centers(p_min: float, p_max: float, p_dim: int, formula: str = "interpolated") -> np.ndarray:
    """Preferred values for one sub-population.

    "interpolated" spaces p_dim centers linearly from p_min to p_max.
    "literal" keeps the uncorrected published form, which does not
    interpolate (it passes through 0 at m = p_num); retained only for
    side-by-side comparison.
    """
    if p_max <= p_min:
        raise ValueError(f"need p_max > p_min, got ({p_min}, {p_max})")
    if p_dim < 2:
        raise ValueError(f"need at least 2 neurons per sub-population, got {p_dim}")
    m = np.arange(p_dim, dtype=np.float64)
    if formula == "interpolated":
        return p_min + m * (p_max - p_min) / (p_dim - 1)
    if formula == "literal":
        p_num = p_dim  # the published expression couples the two sizes
        return p_min * (m - p_num) - p_max * (p_num - m)
    raise ValueError(f"unknown center formula {formula!r}")


@dataclass
class PopulationCodec:
    """Place-coded spike encoder for a vector of bounded scalars."""

    bounds: np.ndarray            # (p_num, 2) per-input (min, max)
    p_dim: int = 50
    theta_min: float = 0.05       # baseline spike probability, applied to every neuron
    width_gain: float = 15.0      # exponent gain on squared center distance
    formula: str = "interpolated"
    centers: np.ndarray = field(init=False)

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(-1, 2)
        if not 0.0 <= self.theta_min < 1.0:
            raise ValueError(f"theta_min must be in [0, 1), got {self.theta_min}")
        self.centers = np.stack([
            place_centers(lo, hi, self.p_dim, self.formula) for lo, hi in self.bounds
        ])

    @property
    def p_num(self) -> int:
        return self.bounds.shape[0]

    @property
    def n_neurons(self) -> int:
        return self.p_num * self.p_dim

    def spike_probabilities(self, x: np.ndarray) -> np.ndarray:
        """Pr[spike] per neuron; x is (..., p_num), result (..., p_num*p_dim)."""
        x = np.asarray(x, dtype=np.float64)
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        x = np.clip(x, lo, hi)
        d2 = (self.centers - x[..., :, None]) ** 2
        p = np.minimum(np.exp(-self.width_gain * d2), 1.0)
        p = np.maximum(self.theta_min, p)
        return p.reshape(x.shape[:-1] + (self.n_neurons,))

    def encode(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Sample one binary spike vector (each neuron independent)."""
        p = self.spike_probabilities(x)
        return (rng.random(p.shape) < p).astype(np.float64)

    def decode_stimulus(self, spike_counts: np.ndarray, n_samples: int) -> np.ndarray:
        """Matched readout: stimulus estimate per sub-population.

        Subtracts the expected baseline mass (n_samples * theta_min per
        neuron) before the center-of-mass, so the floor probability does
        not drag estimates toward mid-range. Estimates are unbiased only
        where the tuning bump is not truncated by the population edge.
        """
        counts = np.asarray(spike_counts, dtype=np.float64).reshape(self.p_num, self.p_dim)
        signal = np.maximum(counts - n_samples * self.theta_min, 0.0)
        mass = signal.sum(axis=1)
        if np.any(mass <= 0):
            raise ValueError("no above-baseline spikes to decode")
        return (self.centers * signal).sum(axis=1) / mass


@dataclass
class ActionCodec:
    """Signed-population spike decoder for d actuated outputs."""

    d: int
    n_per_pop: int = 100          # neurons per sub-population, half +1 / half -1
    t_window: int = 50            # integration interval (steps)
    out_lo: np.ndarray = None     # (d,) lower output bounds
    out_hi: np.ndarray = None     # (d,) upper output bounds

    def __post_init__(self):
        if self.n_per_pop % 2 != 0:
            raise ValueError(f"sub-population size must be even, got {self.n_per_pop}")
        self.out_lo = np.full(self.d, -1.0) if self.out_lo is None else np.asarray(self.out_lo, dtype=np.float64)
        self.out_hi = np.full(self.d, 1.0) if self.out_hi is None else np.asarray(self.out_hi, dtype=np.float64)

    @property
    def n_neurons(self) -> int:
        return self.d * self.n_per_pop

    @property
    def weights(self) -> np.ndarray:
        """+1 for the first half of each sub-population, -1 for the second."""
        w = np.ones(self.n_per_pop)
        w[self.n_per_pop // 2:] = -1.0
        return np.tile(w, self.d)

    def readout_matrix(self) -> np.ndarray:
        """(n_neurons, d) map from summed spikes to normalized [-1, 1] output."""
        mat = np.zeros((self.n_neurons, self.d))
        half = self.n_per_pop // 2
        w = self.weights / half
        for p in range(self.d):
            rows = slice(p * self.n_per_pop, (p + 1) * self.n_per_pop)
            mat[rows, p] = w[rows]
        return mat

    def decode(self, spikes: np.ndarray) -> np.ndarray:
        """spikes (d, N, T) -> action (d,) in [out_lo, out_hi]."""
        spikes = np.asarray(spikes, dtype=np.float64)
        if spikes.shape != (self.d, self.n_per_pop, self.t_window):
            raise ValueError(f"expected spikes of shape {(self.d, self.n_per_pop, self.t_window)}, "
                             f"got {spikes.shape}")
        w = self.weights.reshape(self.d, self.n_per_pop)
        raw = (w[:, :, None] * spikes).sum(axis=(1, 2)) / self.t_window
        unit = raw / (self.n_per_pop / 2)  # guarantees [-1, 1]
        return self.out_lo + (unit + 1.0) * 0.5 * (self.out_hi - self.out_lo)

    def decode_node(self, spike_nodes: list) -> ad.Node:
        """Tape path: mean of T output-spike nodes through the signed readout.

        spike_nodes are (B, n_neurons) nodes covering one integration
        window; returns the (B, d) action mean in [out_lo, out_hi].
        """
        if len(spike_nodes) != self.t_window:
            raise ValueError(f"expected {self.t_window} steps, got {len(spike_nodes)}")
        summed = ad.weighted_sum(spike_nodes, [1.0 / self.t_window] * self.t_window)
        unit = ad.matmat(summed, self.readout_matrix())
        half_span = 0.5 * (self.out_hi - self.out_lo)
        return ad.add(ad.hadamard(unit, ad.const(half_span)),
                      ad.const(self.out_lo + half_span))


def gaussian_action(mean: ad.Node, sigma_log: ad.Node, rng: np.random.Generator):
    """Sample A_e ~ N(mean, exp(sigma_log)^2) and return (sample, log_prob node).

    The sample itself is a plain array (policy-gradient, not
    reparameterized); the log-probability node differentiates through both
    the mean and sigma_log.
    """
    mean = mean if ad.is_node(mean) else ad.const(mean)
    std = np.exp(sigma_log.value)
    z = rng.standard_normal(mean.value.shape)
    sample = mean.value + std * z
    logp = gaussian_log_prob(sample, mean, sigma_log)
    return sample, logp


def gaussian_log_prob(x: np.ndarray, mean: ad.Node, sigma_log: ad.Node) -> ad.Node:
    """log N(x; mean, exp(sigma_log)^2) summed over the trailing axis."""
    diff = ad.sub(ad.const(x), mean)
    inv_var = ad.exp(ad.scale(sigma_log, -2.0))
    quad = ad.scale(ad.hadamard(ad.hadamard(diff, diff), inv_var), -0.5)
    per_dim = ad.sub(quad, ad.add(sigma_log, ad.const(0.5 * LOG_2PI)))
    axis = None if per_dim.value.ndim <= 1 else per_dim.value.ndim - 1
    if per_dim.value.ndim == 1:
        return ad.sum_(per_dim)
    return ad.sum_(per_dim, axis=axis)


def inject_noise(kind: str, base: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Perturb a vector with pre-sampled Gaussian noise z.

    observation: base + z
    action:      base * (1 + z)   (element-wise gain)
    friction:    base * (1 + z)   (percentage change; z held for a whole episode)
    """
    base = np.asarray(base, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if kind == "observation":
        return base + z
    if kind in ("action", "friction"):
        return base * (1.0 + z)
    raise ValueError(f"unknown noise kind {kind!r}")
