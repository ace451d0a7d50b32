"""Finite-difference verification of the whole differentiable stack.

Two suites:

* op suite -- every registered tape op on random small tensors against
  central differences (step 1e-5), relative error <= 1e-6 where the
  analytic gradient is above 1e-8.

* network suite -- a small plastic network unrolled for several trace
  updates in soft-spike mode (sigmoid forward, exact derivative), with
  full refractory backpropagation enabled. The scalar probe loss touches
  the decision log-probability, a Gaussian action log-probability, and the
  mean output rate, so every learnable parameter kind (W, alpha, eta,
  eta_phi, psi, W_m, sigma_log) is exercised. Analytic gradients must
  match finite differences at relative error <= 1e-4.

Both suites are also exposed through the CLI `gradcheck` command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoding import gaussian_log_prob
from .snn import NeuronConfig, PlasticNetwork

FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tolerance:.0e})"


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    analytic = np.atleast_1d(analytic)
    numeric = np.atleast_1d(numeric)
    mask = np.abs(analytic) > floor
    if not mask.any():
        return 0.0
    denom = np.maximum(np.abs(analytic[mask]), np.abs(numeric[mask]))
    return float(np.max(np.abs(analytic[mask] - numeric[mask]) / denom))


def _fd_grad(fn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        up = fn()
        x[idx] = orig - step
        dn = fn()
        x[idx] = orig
        g[idx] = (up - dn) / (2 * step)
        it.iternext()
    return g


# --- op suite ---------------------------------------------------------------

def _op_cases(rng: np.random.Generator) -> dict:
    return {
        "add": (lambda ps: ad.add(ps[0], ps[1]), [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
        "sub": (lambda ps: ad.sub(ps[0], ps[1]), [rng.normal(size=(3,)), rng.normal(size=(3,))]),
        "hadamard": (lambda ps: ad.hadamard(ps[0], ps[1]),
                     [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
        "mat-vec": (lambda ps: ad.matvec(ps[0], ps[1]), [rng.normal(size=(3, 4)), rng.normal(size=4)]),
        "mat-vec-batched": (lambda ps: ad.matvec(ps[0], ps[1]),
                            [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4))]),
        "mat-mat": (lambda ps: ad.matmat(ps[0], ps[1]), [rng.normal(size=(2, 3)), rng.normal(size=(3, 4))]),
        "outer-product": (lambda ps: ad.outer(ps[0], ps[1]), [rng.normal(size=3), rng.normal(size=4)]),
        "outer-batched": (lambda ps: ad.outer(ps[0], ps[1]),
                          [rng.normal(size=(2, 3)), rng.normal(size=(2, 4))]),
        "scalar-scale": (lambda ps: ad.scale(ps[0], 2.5), [rng.normal(size=(2, 3))]),
        "exp": (lambda ps: ad.exp(ps[0]), [rng.normal(size=(2, 3))]),
        "negate": (lambda ps: ad.negate(ps[0]), [rng.normal(size=(3,))]),
        "sum": (lambda ps: ad.sum_(ps[0], axis=1), [rng.normal(size=(2, 3))]),
        "mean": (lambda ps: ad.mean(ps[0]), [rng.normal(size=(2, 3))]),
        "clamp": (lambda ps: ad.clamp(ps[0], -10.0, 10.0), [rng.normal(size=(2, 3))]),
        "log": (lambda ps: ad.log(ps[0]), [rng.uniform(0.5, 2.0, size=(2, 3))]),
        "sigmoid": (lambda ps: ad.sigmoid(ps[0]), [rng.normal(size=(2, 3))]),
        "transpose": (lambda ps: ad.record("transpose", (ps[0],)), [rng.normal(size=(2, 3))]),
        "concat": (lambda ps: ad.record("concat", (ps[0], ps[1]), axis=0),
                   [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))]),
        "slice": (lambda ps: ad.record("slice", (ps[0],), key=(slice(0, 2),)),
                  [rng.normal(size=(3, 4))]),
        "weighted-sum": (lambda ps: ad.weighted_sum(ps, [0.4, -1.1]),
                         [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
        "plastic-matvec": (lambda ps: ad.plastic_matvec(*ps),
                           [rng.normal(size=(3, 4)), rng.normal(size=(3, 4)),
                            rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4))]),
        "spike-soft": (lambda ps: ad.spike_surrogate(ps[0], theta=1.0),
                       [rng.normal(loc=1.0, size=(2, 3))]),
    }


def run_op_suite(seed: int = 0, tol: float = 1e-6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, arrays) in _op_cases(rng).items():
        worst = 0.0
        with ad.soft_spike_mode(name == "spike-soft"):
            for i in range(len(arrays)):
                params = [ad.param(a) for a in arrays]
                out = fn(params)
                loss = ad.mean(out) if out.value.size > 1 else out
                ad.backward(loss)
                analytic = params[i].grad

                def f(i=i):
                    vals = [ad.const(a) for a in arrays]
                    out = fn(vals)
                    return float((ad.mean(out) if out.value.size > 1 else out).value)

                numeric = _fd_grad(f, arrays[i])
                worst = max(worst, _rel_err(analytic, numeric))
        results.append(CheckResult(name=name, max_rel_err=worst, tolerance=tol))
    return results


# --- full-network suite ------------------------------------------------------

def _probe_network(kind: str, seed: int) -> tuple[PlasticNetwork, dict]:
    neuron = NeuronConfig(delta_tau=20, detach_refractory=False)
    net = PlasticNetwork([4, 4, 2], [kind, kind], neuron,
                         np.random.default_rng(seed), sigma_log_dim=1)
    rng = np.random.default_rng(seed + 1)
    for layer in net.layers:
        w = layer.params.weights.value
        w -= w.mean(axis=1, keepdims=True)
        w *= 6.0
        layer.params.plast_coeff.value[:] = rng.uniform(-0.5, 0.5, w.shape)
    return net, net.parameters()


def _probe_loss(net: PlasticNetwork, kind: str, steps: int = 60, batch: int = 2) -> float:
    """Deterministic scalar probe touching every learnable parameter kind."""
    rng = np.random.default_rng(99)
    inputs = (rng.random((steps, batch, 4)) < 0.5).astype(np.float64)
    fixed_action_sample = np.full((batch, 1), 0.3)
    onehot = np.zeros((batch, 2))
    onehot[:, 0] = 1.0

    net.reset(batch)
    outs = []
    for t in range(steps):
        outs.append(net.step(inputs[t]))
    window = outs[-20:]
    counts = ad.weighted_sum(window, [1.0] * len(window))          # (B, 2)
    shift = counts.value.max(axis=1, keepdims=True)
    stable = ad.sub(counts, ad.const(shift))
    logz = ad.log(ad.sum_(ad.exp(stable), axis=1))
    choice_lp = ad.sub(ad.sum_(ad.hadamard(stable, ad.const(onehot)), axis=1), logz)

    mean_rate = ad.mean(ad.weighted_sum(outs, [1.0 / steps] * steps))
    sigma_log = net.output_layer.params.sigma_log
    act_mean = ad.mean(ad.scale(counts, 1.0 / 20.0), axis=1)        # (B,)
    gauss_lp = gaussian_log_prob(fixed_action_sample[:, 0], act_mean, sigma_log)

    loss = ad.add(ad.add(ad.mean(choice_lp), ad.mean(gauss_lp)), mean_rate)
    return loss


def run_network_suite(kinds=("linear-decay", "dp-oja", "dp-bcm", "ndp-oja", "ndp-bcm"),
                      seed: int = 3, tol: float = 1e-4,
                      max_components: int = 6) -> list[CheckResult]:
    """Soft-spike FD check of d(loss)/d(param) for every rule and parameter.

    Dense tensors are sampled at max_components fixed positions; scalars
    are checked fully.
    """
    results = []
    with ad.soft_spike_mode():
        for kind in kinds:
            net, params = _probe_network(kind, seed)
            loss = _probe_loss(net, kind)
            grads = ad.backward(loss, params)
            for name, p in params.items():
                analytic = grads[name]
                flat = p.value.reshape(-1)
                if flat.size <= max_components:
                    idxs = np.arange(flat.size)
                else:
                    idxs = np.linspace(0, flat.size - 1, max_components).astype(int)
                worst = 0.0
                for i in idxs:
                    orig = flat[i]
                    flat[i] = orig + FD_STEP
                    up = float(_probe_loss(net, kind).value)
                    flat[i] = orig - FD_STEP
                    dn = float(_probe_loss(net, kind).value)
                    flat[i] = orig
                    numeric = (up - dn) / (2 * FD_STEP)
                    analytic_i = analytic.reshape(-1)[i]
                    if abs(analytic_i) > 1e-8:
                        err = abs(analytic_i - numeric) / max(abs(analytic_i), abs(numeric))
                        worst = max(worst, err)
                results.append(CheckResult(name=f"{kind}/{name}", max_rel_err=worst, tolerance=tol))
    return results


def run_all(seed: int = 0) -> tuple[list[CheckResult], bool]:
    results = run_op_suite(seed=seed) + run_network_suite(seed=seed + 3)
    return results, all(r.passed for r in results)
