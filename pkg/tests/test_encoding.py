import numpy as np
import pytest

from plastisnn import autodiff as ad
from plastisnn.encoding import (ActionCodec, PopulationCodec, gaussian_action,
                                gaussian_log_prob, inject_noise, place_centers)


def test_centers_two_neurons_hit_endpoints():
    assert np.array_equal(place_centers(-3.0, 7.0, 2), [-3.0, 7.0])


def test_centers_symmetric_five():
    assert np.allclose(place_centers(-1.0, 1.0, 5), [-1.0, -0.5, 0.0, 0.5, 1.0])


def test_centers_spacing_fifty():
    c = place_centers(0.0, 10.0, 50)
    assert np.allclose(np.diff(c), 10.0 / 49)
    assert c[0] == 0.0 and c[-1] == 10.0


def test_centers_validation():
    with pytest.raises(ValueError):
        place_centers(1.0, 1.0, 5)
    with pytest.raises(ValueError):
        place_centers(0.0, 1.0, 1)


def test_literal_formula_kept_for_comparison():
    # the uncorrected published expression crosses 0 at m = p_num instead of
    # interpolating the bounds; it stays available behind the flag
    c = place_centers(-1.0, 1.0, 4, formula="literal")
    assert c[-1] == 0.0
    assert not np.isclose(c[0], -1.0)


def codec(p_dim=50, theta_min=0.05):
    return PopulationCodec(bounds=np.array([[-1.0, 1.0]]), p_dim=p_dim, theta_min=theta_min)


def test_probability_law_values():
    cd = codec()
    x = np.array([cd.centers[0, 20]])
    p = cd.spike_probabilities(x)
    assert p[20] == pytest.approx(1.0)                       # exp(0) at the center
    # far neurons sit on the floor
    d2 = (cd.centers[0] - x[0]) ** 2
    far = d2 > np.log(1 / 0.05) / 15.0
    assert np.all(p[: cd.p_dim][far] == 0.05)
    # distance 0.1 from a center
    p_near = np.exp(-15.0 * 0.1 ** 2)
    assert p_near == pytest.approx(0.8607, abs=1e-4)


def test_probability_monotone_until_floor():
    cd = codec()
    x = np.array([0.1])
    p = cd.spike_probabilities(x)[: cd.p_dim]
    d = np.abs(cd.centers[0] - x[0])
    order = np.argsort(d)
    sorted_p = p[order]
    assert np.all(np.diff(sorted_p) <= 1e-12)
    assert np.argmax(p) == order[0]


def test_out_of_bounds_input_is_clipped():
    cd = codec()
    p_hi = cd.spike_probabilities(np.array([5.0]))
    p_edge = cd.spike_probabilities(np.array([1.0]))
    assert np.array_equal(p_hi, p_edge)


def test_encoder_monte_carlo_law():
    # empirical spike frequency within ±0.01 of the law at 1e5 samples
    cd = codec(p_dim=10)
    rng = np.random.default_rng(77)
    x = np.array([0.33])
    p = cd.spike_probabilities(x)
    hits = np.zeros_like(p)
    n = 100_000
    spikes = (rng.random((n, p.size)) < p).astype(np.float64)
    emp = spikes.mean(axis=0)
    assert np.max(np.abs(emp - p)) <= 0.01


def test_decoder_symmetry_and_saturation():
    ac = ActionCodec(d=1, n_per_pop=4, t_window=2)
    both = np.ones((1, 4, 2))
    assert ac.decode(both)[0] == pytest.approx(0.0)
    pos_only = np.zeros((1, 4, 2))
    pos_only[0, :2, :] = 1.0
    assert ac.decode(pos_only)[0] == pytest.approx(1.0)
    neg_only = np.zeros((1, 4, 2))
    neg_only[0, 2:, :] = 1.0
    assert ac.decode(neg_only)[0] == pytest.approx(-1.0)


def test_decoder_hand_example():
    # N=4, T=2: three positive spikes, one negative -> raw (3-1)/2 = 1 -> 0.5
    ac = ActionCodec(d=1, n_per_pop=4, t_window=2)
    spikes = np.zeros((1, 4, 2))
    spikes[0, 0, 0] = spikes[0, 0, 1] = spikes[0, 1, 0] = 1.0
    spikes[0, 2, 1] = 1.0
    assert ac.decode(spikes)[0] == pytest.approx(0.5)


def test_decoder_output_range_mapping():
    ac = ActionCodec(d=2, n_per_pop=4, t_window=3, out_lo=np.array([0.0, -2.0]),
                     out_hi=np.array([4.0, 2.0]))
    sat = np.zeros((2, 4, 3))
    sat[:, :2, :] = 1.0
    assert np.allclose(ac.decode(sat), [4.0, 2.0])
    sat_neg = np.zeros((2, 4, 3))
    sat_neg[:, 2:, :] = 1.0
    assert np.allclose(ac.decode(sat_neg), [0.0, -2.0])


def test_decode_node_matches_plain_decode():
    rng = np.random.default_rng(5)
    ac = ActionCodec(d=2, n_per_pop=6, t_window=4)
    spikes = (rng.random((4, 1, 12)) < 0.5).astype(float)  # (T, B, d*N)
    nodes = [ad.const(s) for s in spikes]
    out = ac.decode_node(nodes)
    plain = ac.decode(spikes.transpose(1, 2, 0)[0].reshape(2, 6, 4))
    assert np.allclose(out.value[0], plain)


def test_codec_round_trip_on_centers():
    """Idealized population read by the matched decoder recovers x.

    Restricted to centers whose tuning bump (exp(-15 d^2) above the 0.05
    floor, radius ~11 neurons here) is not truncated by the population
    edge; truncation biases any readout inward.
    """
    cd = codec(p_dim=50)
    spacing = 2.0 / 49
    for seed in range(3):
        rng = np.random.default_rng(19 + seed)
        for idx in (12, 20, 25, 31, 38):
            x = np.array([cd.centers[0, idx]])
            p = cd.spike_probabilities(x)
            spikes = (rng.random((1000, p.size)) < p).astype(float)
            estimate = cd.decode_stimulus(spikes.sum(axis=0), n_samples=1000)
            assert abs(estimate[0] - x[0]) <= spacing


def test_gaussian_action_monte_carlo_std():
    rng = np.random.default_rng(10)
    mean = ad.const(np.zeros(100_000))
    sigma_log = ad.param(np.zeros(100_000))
    sample, _ = gaussian_action(mean, sigma_log, rng)
    assert np.std(sample) == pytest.approx(1.0, abs=0.01)


def test_gaussian_zero_variance_limit():
    rng = np.random.default_rng(1)
    mean = ad.const(np.array([0.3, -0.7]))
    sigma_log = ad.param(np.full(2, -40.0))
    sample, _ = gaussian_action(mean, sigma_log, rng)
    assert np.allclose(sample, mean.value, atol=1e-12)


def test_gaussian_log_prob_at_mean():
    sigma_log = ad.param(np.array([0.2, -0.4]))
    mean = ad.const(np.array([1.0, 2.0]))
    lp = gaussian_log_prob(mean.value, mean, sigma_log)
    expected = -np.sum(sigma_log.value + 0.5 * np.log(2 * np.pi))
    assert lp.value == pytest.approx(expected)


def test_gaussian_log_prob_gradient_fd():
    rng = np.random.default_rng(3)
    x = rng.normal(size=3)
    m0 = rng.normal(size=3)
    s0 = rng.normal(size=3) * 0.3
    mean = ad.param(m0)
    sig = ad.param(s0)
    lp = gaussian_log_prob(x, mean, sig)
    ad.backward(lp)
    h = 1e-6
    for i in range(3):
        for node, base in ((mean, m0), (sig, s0)):
            up, dn = base.copy(), base.copy()
            up[i] += h
            dn[i] -= h
            if node is mean:
                fd = (gaussian_log_prob(x, ad.const(up), ad.const(s0)).value
                      - gaussian_log_prob(x, ad.const(dn), ad.const(s0)).value) / (2 * h)
            else:
                fd = (gaussian_log_prob(x, ad.const(m0), ad.const(up)).value
                      - gaussian_log_prob(x, ad.const(m0), ad.const(dn)).value) / (2 * h)
            assert node.grad[i] == pytest.approx(float(fd), rel=1e-5, abs=1e-8)


def test_inject_noise_kinds():
    base = np.array([2.0, -1.0])
    z = np.zeros(2)
    for kind in ("observation", "action", "friction"):
        assert np.array_equal(inject_noise(kind, base, z), base)
    assert np.array_equal(inject_noise("observation", np.array([2.0]), np.array([0.5])), [2.5])
    assert np.array_equal(inject_noise("action", base, np.array([-1.0, -1.0])), [0.0, 0.0])
    assert np.allclose(inject_noise("friction", np.array([0.2]), np.array([0.1])), [0.22])
    with pytest.raises(ValueError, match="unknown noise kind"):
        inject_noise("thermal", base, z)
