"""Differentiable synaptic-trace update rules.

Five rule kinds evolve the per-episode trace E (and, for BCM, the sliding
rate threshold phi) from windowed pre-/post-synaptic spike rates:

  linear-decay:  E' = (1-eta) E + eta (r_post ⊗ r_pre)
  dp-oja:        E' = (1-eta) E + eta ((r_post - E r_pre) ⊗ r_pre)
  dp-bcm:        E' = (1-eta) E + eta (r_post ⊗ r_beta)
                 r_beta = r_pre ⊙ (r_pre - (phi + psi))
                 phi'   = (1-eta_phi) phi + eta_phi r_pre
  ndp-oja:       post-synaptic factor gated by M = W_m r_post
  ndp-bcm:       likewise; the gate applies only to the post factor

Every update is recorded on the tape and clipped to ±c_clip, so gradients
flow into eta, eta_phi, psi, W_m and, through the rates, into the spiking
dynamics that produced them. The raw eta parameters pass through a sigmoid
before use, keeping the effective rates in (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

RULE_KINDS = ("none", "linear-decay", "dp-oja", "dp-bcm", "ndp-oja", "ndp-bcm")

# sigmoid(RAW_RATE_INIT) = 0.1
RAW_RATE_INIT = float(np.log(0.1 / 0.9))


@dataclass
class RuleParams:
    """Learnable per-layer rule parameters; inactive fields are None."""

    kind: str
    eta: ad.Node | None = None        # raw trace-update rate (scalar)
    eta_phi: ad.Node | None = None    # raw threshold-update rate (scalar, BCM)
    bias: ad.Node | None = None       # psi, static threshold bias (n_in,) (BCM)
    mod_w: ad.Node | None = None      # W_m, modulation weights (n_out, n_out) (NDP)
    c_clip: float = 2.0

    def named_params(self) -> dict[str, ad.Node]:
        out = {}
        for name in ("eta", "eta_phi", "bias", "mod_w"):
            node = getattr(self, name)
            if node is not None:
                out[name] = node
        return out

    @property
    def is_bcm(self) -> bool:
        return self.kind in ("dp-bcm", "ndp-bcm")

    @property
    def is_modulated(self) -> bool:
        return self.kind in ("ndp-oja", "ndp-bcm")


def make_rule(kind: str, n_in: int, n_out: int, rng: np.random.Generator,
              c_clip: float = 2.0) -> RuleParams:
    if kind not in RULE_KINDS:
        raise ValueError(f"unknown plasticity rule kind {kind!r}")
    if c_clip <= 0:
        raise ValueError(f"c_clip must be positive, got {c_clip}")
    rule = RuleParams(kind=kind, c_clip=c_clip)
    if kind == "none":
        return rule
    rule.eta = ad.param(RAW_RATE_INIT)
    if kind in ("dp-bcm", "ndp-bcm"):
        rule.eta_phi = ad.param(RAW_RATE_INIT)
        rule.bias = ad.param(np.zeros(n_in))
    if kind in ("ndp-oja", "ndp-bcm"):
        bound = 1.0 / np.sqrt(n_out)
        rule.mod_w = ad.param(rng.uniform(-bound, bound, size=(n_out, n_out)))
    return rule


def _blend(e, eta, novelty, c_clip: float) -> ad.Node:
    """clip((1 - eta) E + eta * novelty, ±c_clip)."""
    keep = ad.hadamard(ad.sub(ad.const(1.0), eta), e)
    take = ad.hadamard(eta, novelty)
    return ad.clamp(ad.add(keep, take), -c_clip, c_clip)


def trace_update_linear(e, rho_pre, rho_post, eta, c_clip: float = 2.0) -> ad.Node:
    return _blend(e, eta, ad.outer(rho_post, rho_pre), c_clip)


def trace_update_oja(e, r_pre, r_post, eta, c_clip: float = 2.0) -> ad.Node:
    decayed = ad.sub(r_post, ad.matvec(e, r_pre))
    return _blend(e, eta, ad.outer(decayed, r_pre), c_clip)


def bcm_drive(r_pre, phi, psi) -> ad.Node:
    """r_beta = r_pre ⊙ (r_pre - (phi + psi)): signed potentiation drive."""
    boundary = ad.add(phi, psi)
    return ad.hadamard(r_pre, ad.sub(r_pre, boundary))


def trace_update_bcm(e, r_post, r_beta, eta, c_clip: float = 2.0) -> ad.Node:
    return _blend(e, eta, ad.outer(r_post, r_beta), c_clip)


def bcm_threshold_update(phi, r_pre, eta_phi) -> ad.Node:
    keep = ad.hadamard(ad.sub(ad.const(1.0), eta_phi), phi)
    take = ad.hadamard(eta_phi, r_pre)
    return ad.add(keep, take)


def modulatory_signal(mod_w, r_post) -> ad.Node:
    """M = W_m r_post; gradients reach both W_m and the activity behind r_post."""
    if ad.is_node(r_post) and r_post.value.ndim == 2:
        return ad.matmat(r_post, ad.record("transpose", (mod_w,)))
    return ad.matvec(mod_w, r_post)


def trace_update_ndp_oja(e, r_pre, r_post, m, eta, c_clip: float = 2.0) -> ad.Node:
    gated = ad.hadamard(m, r_post)
    decayed = ad.sub(gated, ad.matvec(e, r_pre))
    return _blend(e, eta, ad.outer(decayed, r_pre), c_clip)


def trace_update_ndp_bcm(e, r_post, r_beta, m, eta, c_clip: float = 2.0) -> ad.Node:
    gated = ad.hadamard(m, r_post)
    return _blend(e, eta, ad.outer(gated, r_beta), c_clip)


def _window_rate(hist, delta_tau: int) -> ad.Node:
    """Sliding-window mean of the last delta_tau spike nodes (newest last)."""
    span = min(len(hist), delta_tau)
    if span == 0:
        raise ValueError("rate window requested on an empty history")
    nodes = [hist[-1 - k] for k in range(span)]
    return ad.weighted_sum(nodes, [1.0 / delta_tau] * span)


def apply_rule(rule: RuleParams, state) -> None:
    """Advance state.trace (and phi for BCM) by one rule application.

    Must be called at trace-update boundaries (t a multiple of delta_tau);
    rates are windowed means over the preceding delta_tau steps, with the
    post-synaptic window including the spikes of the current step.
    """
    if rule.kind not in RULE_KINDS:
        raise ValueError(f"unknown plasticity rule kind {rule.kind!r}")
    if rule.kind == "none":
        return
    r_pre = _window_rate(state.in_hist, state.delta_tau)
    r_post = _window_rate(state.self_hist, state.delta_tau)
    eta = ad.sigmoid(rule.eta)
    if rule.kind == "linear-decay":
        state.trace = trace_update_linear(state.trace, r_pre, r_post, eta, rule.c_clip)
        return
    if rule.kind == "dp-oja":
        state.trace = trace_update_oja(state.trace, r_pre, r_post, eta, rule.c_clip)
        return
    if rule.kind == "ndp-oja":
        m = modulatory_signal(rule.mod_w, r_post)
        state.trace = trace_update_ndp_oja(state.trace, r_pre, r_post, m, eta, rule.c_clip)
        return
    # BCM variants share the drive and threshold dynamics
    r_beta = bcm_drive(r_pre, state.sliding_threshold, rule.bias)
    if rule.kind == "dp-bcm":
        state.trace = trace_update_bcm(state.trace, r_post, r_beta, eta, rule.c_clip)
    else:
        m = modulatory_signal(rule.mod_w, r_post)
        state.trace = trace_update_ndp_bcm(state.trace, r_post, r_beta, m, eta, rule.c_clip)
    eta_phi = ad.sigmoid(rule.eta_phi)
    state.sliding_threshold = bcm_threshold_update(state.sliding_threshold, r_pre, eta_phi)
