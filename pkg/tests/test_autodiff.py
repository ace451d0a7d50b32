import numpy as np
import pytest

from plastisnn import autodiff as ad


FD_STEP = 1e-5


def fd_grad(fn, x, step=FD_STEP):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (fn(xp) - fn(xm)) / (2 * step)
        it.iternext()
    return g


def rel_err(analytic, numeric, floor=1e-8):
    analytic = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    numeric = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    mask = np.abs(analytic) > floor
    if not mask.any():
        return 0.0
    denom = np.maximum(np.abs(analytic[mask]), np.abs(numeric[mask]))
    return float(np.max(np.abs(analytic[mask] - numeric[mask]) / denom))


def scalar_loss(node):
    return ad.mean(node) if node.value.size > 1 else node


def check_op_grads(make_output, arrays, tol=1e-6):
    """FD-check d(mean(op(...)))/d(input_i) for every input."""
    for i in range(len(arrays)):
        params = [ad.param(a) for a in arrays]
        out = scalar_loss(make_output(params))
        ad.backward(out)
        analytic = params[i].grad

        def f(x, i=i):
            vals = [ad.const(a) for a in arrays]
            vals[i] = ad.const(x)
            return float(scalar_loss(make_output(vals)).value)

        numeric = fd_grad(f, arrays[i])
        err = rel_err(analytic, numeric)
        assert err <= tol, f"input {i}: rel err {err}"


def test_add_example():
    out = ad.add(ad.const([1.0, 2.0]), ad.const([3.0, 4.0]))
    assert np.array_equal(out.value, [4.0, 6.0])


def test_add_backward_linearity():
    a, b = ad.param([1.0, 2.0]), ad.param([3.0, 4.0])
    loss = ad.sum_(ad.add(a, b))
    ad.backward(loss)
    assert np.array_equal(a.grad, [1.0, 1.0])
    assert np.array_equal(b.grad, [1.0, 1.0])


def test_outer_product_example():
    out = ad.outer(ad.const([1.0, 0.0]), ad.const([2.0, 3.0]))
    assert np.array_equal(out.value, [[2.0, 3.0], [0.0, 0.0]])


def test_shape_mismatch_names_op():
    with pytest.raises(ad.ShapeError, match="mat-vec"):
        ad.matvec(ad.const(np.ones((3, 3))), ad.const(np.ones(4)))
    with pytest.raises(ad.ShapeError, match="outer-product"):
        ad.outer(ad.const(np.ones((2, 3))), ad.const(np.ones(3)))


RNG = np.random.default_rng(7)


@pytest.mark.parametrize("trial", range(5))
def test_matvec_grad_matches_fd(trial):
    m = RNG.normal(size=(3, 3))
    v = RNG.normal(size=3)
    check_op_grads(lambda ps: ad.matvec(ps[0], ps[1]), [m, v])


def test_smooth_op_fd_suite():
    rng = np.random.default_rng(11)
    cases = {
        "add": (lambda ps: ad.add(ps[0], ps[1]), [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
        "add-broadcast": (lambda ps: ad.add(ps[0], ps[1]), [rng.normal(size=(4, 2, 3)), rng.normal(size=(2, 3))]),
        "sub": (lambda ps: ad.sub(ps[0], ps[1]), [rng.normal(size=(3,)), rng.normal(size=(3,))]),
        "hadamard": (lambda ps: ad.hadamard(ps[0], ps[1]), [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
        "hadamard-scalar": (lambda ps: ad.hadamard(ps[0], ps[1]), [rng.normal(size=()), rng.normal(size=(2, 3))]),
        "mat-vec": (lambda ps: ad.matvec(ps[0], ps[1]), [rng.normal(size=(3, 4)), rng.normal(size=4)]),
        "mat-vec-batched": (
            lambda ps: ad.matvec(ps[0], ps[1]),
            [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4))],
        ),
        "mat-mat": (lambda ps: ad.matmat(ps[0], ps[1]), [rng.normal(size=(2, 3)), rng.normal(size=(3, 4))]),
        "outer": (lambda ps: ad.outer(ps[0], ps[1]), [rng.normal(size=3), rng.normal(size=4)]),
        "outer-batched": (lambda ps: ad.outer(ps[0], ps[1]), [rng.normal(size=(2, 3)), rng.normal(size=(2, 4))]),
        "scalar-scale": (lambda ps: ad.scale(ps[0], -1.7), [rng.normal(size=(2, 3))]),
        "exp": (lambda ps: ad.exp(ps[0]), [rng.normal(size=(2, 3))]),
        "negate": (lambda ps: ad.negate(ps[0]), [rng.normal(size=(3,))]),
        "sum": (lambda ps: ad.sum_(ps[0]), [rng.normal(size=(2, 3))]),
        "sum-axis": (lambda ps: ad.sum_(ps[0], axis=1), [rng.normal(size=(2, 3))]),
        "mean": (lambda ps: ad.mean(ps[0]), [rng.normal(size=(2, 3))]),
        "mean-axis": (lambda ps: ad.mean(ps[0], axis=0), [rng.normal(size=(2, 3))]),
        "log": (lambda ps: ad.log(ps[0]), [rng.uniform(0.5, 3.0, size=(2, 3))]),
        "sigmoid": (lambda ps: ad.sigmoid(ps[0]), [rng.normal(size=(2, 3))]),
        "transpose": (lambda ps: ad.record("transpose", (ps[0],)), [rng.normal(size=(2, 3))]),
        "concat": (
            lambda ps: ad.record("concat", (ps[0], ps[1]), axis=0),
            [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))],
        ),
        "slice": (
            lambda ps: ad.record("slice", (ps[0],), key=(slice(0, 2), slice(1, 3))),
            [rng.normal(size=(3, 4))],
        ),
        "weighted-sum": (
            lambda ps: ad.weighted_sum(ps, [0.5, -1.25, 2.0]),
            [rng.normal(size=(2, 3)) for _ in range(3)],
        ),
        "plastic-matvec": (
            lambda ps: ad.plastic_matvec(ps[0], ps[1], ps[2], ps[3]),
            [
                rng.normal(size=(3, 4)),
                rng.normal(size=(3, 4)),
                rng.normal(size=(2, 3, 4)),
                rng.normal(size=(2, 4)),
            ],
        ),
        # clamp is smooth strictly inside its bounds; inputs kept away from them
        "clamp": (lambda ps: ad.clamp(ps[0], -10.0, 10.0), [rng.normal(size=(2, 3))]),
    }
    for name, (fn, arrays) in cases.items():
        check_op_grads(fn, arrays, tol=1e-6)


def test_clamp_gradient_gating():
    x = ad.param([-3.0, 0.5, 3.0, 1.0])
    out = ad.sum_(ad.clamp(x, -1.0, 1.0))
    ad.backward(out)
    # gradient passes strictly inside the bounds only; the boundary itself gates to 0
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0, 0.0])
    assert np.array_equal(ad.clamp(ad.const([-3.0, 0.5, 3.0]), -1.0, 1.0).value, [-1.0, 0.5, 1.0])


def test_spike_forward_threshold():
    out = ad.spike_surrogate(ad.const([9.99, 10.0, 12.0]), theta=10.0)
    assert np.array_equal(out.value, [0.0, 1.0, 1.0])


def test_surrogate_derivative_values():
    assert ad.surrogate_derivative(np.array([10.0]), theta=10.0)[0] == pytest.approx(1.0)
    assert ad.surrogate_derivative(np.array([8.0]), theta=10.0)[0] == pytest.approx(np.exp(-2.0))


def test_spike_backward_uses_surrogate():
    u = ad.param([8.0, 10.0, 11.5])
    loss = ad.sum_(ad.spike_surrogate(u, theta=10.0))
    ad.backward(loss)
    expected = np.exp(-np.abs(u.value - 10.0))
    assert np.allclose(u.grad, expected)


def test_soft_spike_mode_fd():
    rng = np.random.default_rng(3)
    u0 = rng.normal(loc=10.0, scale=2.0, size=5)
    with ad.soft_spike_mode():
        u = ad.param(u0)
        loss = ad.mean(ad.spike_surrogate(u, theta=10.0))
        ad.backward(loss)
        analytic = u.grad

        def f(x):
            return float(ad.mean(ad.spike_surrogate(ad.const(x), theta=10.0)).value)

        numeric = fd_grad(f, u0)
    assert rel_err(analytic, numeric) <= 1e-6


def test_linear_loss_gradient_structure():
    x = np.array([1.0, -2.0, 3.0])
    w = ad.param(np.zeros((2, 3)))
    loss = ad.sum_(ad.matvec(w, ad.const(x)))
    ad.backward(loss)
    assert np.allclose(w.grad, np.vstack([x, x]))


def test_unreached_param_gets_zero_grad():
    p = ad.param([1.0, 2.0])
    q = ad.param([3.0])
    loss = ad.sum_(ad.hadamard(q, q))
    grads = ad.backward(loss, params={"p": p, "q": q})
    assert np.array_equal(grads["p"], [0.0, 0.0])
    assert np.allclose(grads["q"], [6.0])


def test_repeated_backward_is_error():
    p = ad.param([1.0])
    loss = ad.sum_(p)
    ad.backward(loss)
    with pytest.raises(RuntimeError, match="repeated backward"):
        ad.backward(loss)


def test_non_scalar_loss_is_error():
    p = ad.param([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.add(p, p))


def test_gradient_accumulates_until_zero_grad():
    p = ad.param([2.0])
    for _ in range(2):
        loss = ad.sum_(ad.hadamard(p, p))
        ad.backward(loss)
    assert np.allclose(p.grad, [8.0])  # 2 backward passes, 4.0 each
    ad.zero_grad([p])
    assert p.grad is None


def test_backward_rule_invoked_exactly_once():
    counts = {}

    def counting(vjp, key):
        def wrapped(g):
            counts[key] = counts.get(key, 0) + 1
            return vjp(g)

        return wrapped

    a = ad.param([1.0, 2.0])
    b = ad.hadamard(a, a)
    c = ad.add(b, b)  # diamond: b consumed twice
    d = ad.sum_(c)
    for key, node in (("b", b), ("c", c), ("d", d)):
        node.vjp = counting(node.vjp, key)
    ad.backward(d)
    assert counts == {"b": 1, "c": 1, "d": 1}
    assert np.allclose(a.grad, 4.0 * a.value)


def test_diamond_graph_accumulation():
    p = ad.param([3.0])
    sq = ad.hadamard(p, p)
    loss = ad.sum_(ad.add(sq, sq))
    ad.backward(loss)
    assert np.allclose(p.grad, [12.0])


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(42)
        w = ad.param(rng.normal(size=(4, 4)))
        x = ad.const(rng.normal(size=4))
        h = ad.matvec(w, x)
        loss = ad.mean(ad.hadamard(h, h))
        ad.backward(loss)
        return w.grad.copy()

    assert np.array_equal(run(), run())


def test_debug_mode_flags_nonfinite():
    with ad.debug_mode():
        with pytest.raises(FloatingPointError):
            ad.log(ad.const([-1.0]))


def test_no_tape_produces_plain_values():
    with ad.no_tape():
        p = ad.param([1.0, 2.0])
        out = ad.hadamard(p, p)
    assert out.parents == ()
    assert not out.requires_grad


def test_recurrence_deep_graph_no_recursion_limit():
    x = ad.param([1.0])
    h = x
    for _ in range(5000):
        h = ad.scale(h, 0.999)
    loss = ad.sum_(h)
    ad.backward(loss)
    assert np.allclose(x.grad, 0.999 ** 5000)
