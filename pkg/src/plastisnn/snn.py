"""SRM spiking-layer dynamics on a 1 ms grid.

A layer convolves incoming spikes with an alpha-shaped response kernel,
adds a negative refractory response from its own spike history, forms the
membrane potential from effective weights (fixed weights plus a learned
plasticity coefficient gating a per-episode synaptic trace), and emits
spikes through the surrogate-gradient threshold.

All dynamic state is batched over episodes: spike vectors are (B, n),
traces are (B, n_out, n_in). Parameters are shared across the batch.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .plasticity import RuleParams, apply_rule, make_rule


@dataclass
class NeuronConfig:
    """Neuron hyperparameters; defaults are the standard SRMALPHA set."""

    tau_s: float = 10.0        # PSP kernel time constant (ms)
    tau_ref: float = 2.0       # refractory kernel time constant (ms)
    threshold: float = 10.0    # spike threshold (mV)
    refr_scale: float = 2.0    # relative refractory response scaling
    trunc_tol: float = 1e-3    # kernel truncation tolerance (fraction of peak)
    delta_tau: int = 20        # rate window and trace update interval (steps)
    # Backpropagating through the spike -> refractory -> membrane loop is
    # unstable over long horizons (loop gain |nu| * surrogate can exceed 1,
    # and suppressed neurons recover through the high-surrogate region), so
    # the refractory term is treated as a constant in the backward pass by
    # default. Gradient-check suites disable this on short horizons.
    detach_refractory: bool = True


@dataclass
class KernelBank:
    """Sampled response kernels, truncated to K steps on the 1 ms grid."""

    eps: np.ndarray   # PSP kernel, eps[t] = (t/tau_s) exp(1 - t/tau_s), peak 1 at tau_s
    nu: np.ndarray    # refractory kernel, non-positive, peak magnitude refr_scale*theta
    K: int


def build_kernels(tau_s: float, tau_ref: float, theta: float, refr_scale: float,
                  trunc_tol: float = 1e-3) -> KernelBank:
    """Sample both kernels and pick the shared truncation length.

    K is the smallest length such that |eps[K-1]| and |nu[K-1]| have both
    fallen to trunc_tol times their peak magnitudes.
    """
    if tau_s <= 0 or tau_ref <= 0:
        raise ValueError(f"time constants must be positive, got tau_s={tau_s}, tau_ref={tau_ref}")
    if not 0 < trunc_tol < 1:
        raise ValueError(f"trunc_tol must be in (0, 1), got {trunc_tol}")

    def eps_at(t):
        return (t / tau_s) * np.exp(1.0 - t / tau_s)

    def nu_mag_at(t):
        return refr_scale * theta * (t / tau_ref) * np.exp(1.0 - t / tau_ref)

    eps_peak = 1.0
    nu_peak = refr_scale * theta
    k = int(np.ceil(max(tau_s, tau_ref))) + 1
    while eps_at(k) > trunc_tol * eps_peak or nu_mag_at(k) > trunc_tol * nu_peak:
        k += 1
    K = k + 1
    t = np.arange(K, dtype=np.float64)
    eps = eps_at(t)
    nu = -nu_mag_at(t)
    return KernelBank(eps=eps, nu=nu, K=K)


def psp_response(spike_hist: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """a_j = sum_k eps[k] * spike_hist[j, k]; index 0 is the current step."""
    K = min(spike_hist.shape[-1], eps.shape[0])
    return spike_hist[..., :K] @ eps[:K]


def _kernel_conv_node(hist: deque, kernel: np.ndarray, zeros_like: np.ndarray,
                      offset: int = 0) -> ad.Node:
    """Tape node for sum_k kernel[k+offset] * hist[-1-k] (newest node last).

    offset 0 aligns the newest entry with kernel index 0 (input histories,
    where index 0 is the current step); offset 1 is for the self-spike
    history, whose newest entry is one step old when the refractory term
    of the current step is formed.
    """
    nodes, coeffs = [], []
    L = min(len(hist), kernel.shape[0] - offset)
    for lag in range(L):
        c = kernel[lag + offset]
        if c == 0.0:
            continue
        nodes.append(hist[-1 - lag])
        coeffs.append(c)
    if not nodes:
        return ad.const(np.zeros_like(zeros_like))
    return ad.weighted_sum(nodes, coeffs)


def window_rate_node(hist: deque, delta_tau: int) -> ad.Node:
    """Mean of the last delta_tau spike vectors as a tape node."""
    L = min(len(hist), delta_tau)
    if L == 0:
        raise ValueError("rate window requested on an empty history")
    nodes = [hist[-1 - k] for k in range(L)]
    return ad.weighted_sum(nodes, [1.0 / delta_tau] * L)


@dataclass
class LayerParams:
    """Learnable layer parameters, shared across parallel episodes."""

    weights: ad.Node                 # (n_out, n_in) fixed synaptic weights
    plast_coeff: ad.Node             # (n_out, n_in) per-synapse trace gate
    rule: RuleParams
    sigma_log: ad.Node | None = None  # continuous-action log-std, output layers only

    @property
    def n_out(self) -> int:
        return self.weights.value.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.value.shape[1]


def init_layer_params(n_in: int, n_out: int, rule_kind: str, rng: np.random.Generator,
                      tau_s: float = 10.0, c_clip: float = 2.0,
                      sigma_log_dim: int | None = None) -> LayerParams:
    """Fresh parameters: W ~ U(-b, b) with b = sqrt(6/(n_in+n_out)) * 10/tau_s."""
    bound = np.sqrt(6.0 / (n_in + n_out)) * (10.0 / tau_s)
    w = rng.uniform(-bound, bound, size=(n_out, n_in))
    alpha = rng.uniform(-0.01, 0.01, size=(n_out, n_in))
    rule = make_rule(rule_kind, n_in=n_in, n_out=n_out, rng=rng, c_clip=c_clip)
    # log-std over the decoded continuous action, not the spiking outputs
    sigma_log = ad.param(np.full(sigma_log_dim, -0.5)) if sigma_log_dim else None
    return LayerParams(weights=ad.param(w), plast_coeff=ad.param(alpha),
                       rule=rule, sigma_log=sigma_log)


class LayerState:
    """Per-episode-batch dynamic state; zeroed at episode reset."""

    def __init__(self, n_in: int, n_out: int, batch: int, hist_len: int, delta_tau: int):
        self.n_in = n_in
        self.n_out = n_out
        self.batch = batch
        self.delta_tau = delta_tau
        self.in_hist: deque = deque(maxlen=hist_len)     # nodes, newest last
        self.self_hist: deque = deque(maxlen=hist_len)
        self.self_hist_detached: deque = deque(maxlen=hist_len)
        self.trace = ad.const(np.zeros((batch, n_out, n_in)))
        self.sliding_threshold = ad.const(np.zeros((batch, n_in)))
        self.u: ad.Node | None = None
        self.t = 0
        # value-level sliding windows for the rate estimators
        self._in_window: deque = deque(maxlen=delta_tau)
        self._self_window: deque = deque(maxlen=delta_tau)
        self._in_sum = np.zeros((batch, n_in))
        self._self_sum = np.zeros((batch, n_out))

    @property
    def rate_pre(self) -> np.ndarray:
        return self._in_sum / self.delta_tau

    @property
    def rate_post(self) -> np.ndarray:
        return self._self_sum / self.delta_tau

    def push_input(self, s_in: ad.Node) -> None:
        self.in_hist.append(s_in)
        if len(self._in_window) == self._in_window.maxlen:
            self._in_sum = self._in_sum - self._in_window[0]
        self._in_window.append(s_in.value)
        self._in_sum = self._in_sum + s_in.value

    def push_self(self, s_out: ad.Node) -> None:
        self.self_hist.append(s_out)
        self.self_hist_detached.append(ad.const(s_out.value))
        if len(self._self_window) == self._self_window.maxlen:
            self._self_sum = self._self_sum - self._self_window[0]
        self._self_window.append(s_out.value)
        self._self_sum = self._self_sum + s_out.value


def membrane(params: LayerParams, state: LayerState, a: ad.Node, refractory: ad.Node) -> ad.Node:
    """u = (W + alpha ⊙ E) a + refractory, recorded on the tape."""
    drive = ad.plastic_matvec(params.weights, params.plast_coeff, state.trace, a)
    return ad.add(drive, refractory)


class PlasticLayer:
    """One SRM layer: params + kernels + per-rollout state."""

    def __init__(self, params: LayerParams, kernels: KernelBank, neuron: NeuronConfig):
        self.params = params
        self.kernels = kernels
        self.neuron = neuron
        self.state: LayerState | None = None

    def reset(self, batch: int) -> None:
        hist_len = max(self.kernels.K, self.neuron.delta_tau)
        self.state = LayerState(self.params.n_in, self.params.n_out, batch,
                                hist_len=hist_len, delta_tau=self.neuron.delta_tau)

    def step(self, s_in: ad.Node) -> ad.Node:
        st = self.state
        st.push_input(s_in)
        a = _kernel_conv_node(st.in_hist, self.kernels.eps,
                              np.zeros((st.batch, st.n_in)))
        self_hist = st.self_hist_detached if self.neuron.detach_refractory else st.self_hist
        refractory = _kernel_conv_node(self_hist, self.kernels.nu,
                                       np.zeros((st.batch, st.n_out)), offset=1)
        u = membrane(self.params, st, a, refractory)
        s = ad.spike_surrogate(u, self.neuron.threshold)
        st.u = u
        st.push_self(s)
        st.t += 1
        return s

    def update_trace(self) -> None:
        apply_rule(self.params.rule, self.state)


class PlasticNetwork:
    """Feedforward stack of plastic SRM layers with shared neuron config.

    `step` pushes one input spike vector through every layer and, every
    delta_tau completed steps, runs the per-layer trace updates (the
    post-synaptic rates then include the spikes just produced).
    """

    def __init__(self, layer_sizes: list[int], rule_kinds: list[str],
                 neuron: NeuronConfig, rng: np.random.Generator,
                 c_clip: float = 2.0, sigma_log_dim: int | None = None):
        if len(rule_kinds) != len(layer_sizes) - 1:
            raise ValueError("need one rule kind per connection")
        self.neuron = neuron
        self.kernels = build_kernels(neuron.tau_s, neuron.tau_ref, neuron.threshold,
                                     neuron.refr_scale, neuron.trunc_tol)
        self.layer_sizes = list(layer_sizes)
        self.layers = []
        for i, kind in enumerate(rule_kinds):
            head_dim = sigma_log_dim if i == len(rule_kinds) - 1 else None
            params = init_layer_params(layer_sizes[i], layer_sizes[i + 1], kind, rng,
                                       tau_s=neuron.tau_s, c_clip=c_clip,
                                       sigma_log_dim=head_dim)
            self.layers.append(PlasticLayer(params, self.kernels, neuron))
        self.t = 0

    def reset(self, batch: int) -> None:
        self.t = 0
        for layer in self.layers:
            layer.reset(batch)

    def step(self, s_in) -> ad.Node:
        x = s_in if isinstance(s_in, ad.Node) else ad.const(s_in)
        for layer in self.layers:
            x = layer.step(x)
        self.t += 1
        if self.t % self.neuron.delta_tau == 0:
            for layer in self.layers:
                layer.update_trace()
        return x

    def parameters(self) -> dict[str, ad.Node]:
        out = {}
        for i, layer in enumerate(self.layers):
            p = layer.params
            out[f"layer{i}.weights"] = p.weights
            out[f"layer{i}.plast_coeff"] = p.plast_coeff
            for name, node in p.rule.named_params().items():
                out[f"layer{i}.rule.{name}"] = node
            if p.sigma_log is not None:
                out[f"layer{i}.sigma_log"] = p.sigma_log
        return out

    @property
    def hidden_layers(self) -> list[PlasticLayer]:
        return self.layers[:-1]

    @property
    def output_layer(self) -> PlasticLayer:
        return self.layers[-1]
