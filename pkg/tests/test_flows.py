import math

import numpy as np
import pytest

from gfncp.flows import (candidate_energies, decode_many, forward_distribution, greedy_decode, log_order_factor,
                         reward_log, sample_trajectory, shifted_energy, trajectory_logprob, trajectory_logprobs)
from gfncp.model import ClusterState, EncoderConfig, LabelError, ModelParams, canonicalize, energy


def flat_energy_params(width=4, value=0.7):
    """Every assignment gets the same energy: the last layer of f is a constant."""
    p = ModelParams.init(EncoderConfig.small(width=width), 0)
    p.arrays["f.2.W"][:] = 0.0
    p.arrays["f.2.b"][:] = value
    return p


def sharpened(params, factor):
    p = params.copy()
    p.arrays["f.2.W"] *= factor
    p.arrays["f.2.b"] *= factor
    return p


def test_shifted_energy_cases(tiny_params, rng):
    x = rng.normal(size=(5, 2))
    assert shifted_energy(tiny_params, x, [0]).item() == 0.0
    full = [0, 1, 0, 2, 1]
    e = energy(tiny_params, x, ClusterState.from_labels(tiny_params, x, full)).item()
    assert shifted_energy(tiny_params, x, full).item() == e
    prefix = [0, 1, 0]
    hats = [shifted_energy(tiny_params, x, prefix[:-1] + [j]).item() for j in range(3)]
    assert min(hats) == 0.0
    assert all(h >= 0 for h in hats)


def test_shifted_energy_rejects_non_canonical(tiny_params, rng):
    with pytest.raises(LabelError):
        shifted_energy(tiny_params, rng.normal(size=(4, 2)), [0, 2])


def test_forward_distribution_properties(tiny_params, rng):
    x = rng.normal(size=(6, 2)) * 3
    assert forward_distribution(tiny_params, x, []).tolist() == [1.0]
    p = forward_distribution(tiny_params, x, [0, 1, 1])
    assert p.shape == (3,)
    assert np.all(p > 0)
    assert abs(p.sum() - 1) < 1e-12
    raw = np.array([t.item() for t in candidate_energies(tiny_params, x, [0, 1, 1])])
    soft = np.exp(-raw - np.logaddexp.reduce(-raw))
    np.testing.assert_allclose(p, soft, atol=1e-12)


def test_equal_energies_give_uniform():
    p = flat_energy_params()
    x = np.random.default_rng(0).normal(size=(4, 2))
    np.testing.assert_allclose(forward_distribution(p, x, [0, 1]), [1 / 3] * 3, atol=1e-15)
    assert trajectory_logprob(p, x[:2], [0, 1]) == pytest.approx(math.log(0.5), abs=1e-15)


def test_trajectory_logprob_is_product_of_conditionals(tiny_params, rng):
    x = rng.normal(size=(6, 2)) * 2
    order = rng.permutation(6)
    c = [0, 0, 1, 2, 1, 0]
    direct = trajectory_logprob(tiny_params, x, c, order)
    prod = sum(math.log(forward_distribution(tiny_params, x, c[:n], order)[c[n]]) for n in range(1, 6))
    assert abs(direct - prod) < 1e-12
    assert direct <= 0.0
    with_factor = trajectory_logprob(tiny_params, x, c, order, include_order_factor=True)
    assert with_factor == pytest.approx(direct - math.lgamma(7), abs=1e-12)
    assert log_order_factor(6) == pytest.approx(-math.log(720))


def test_reward_log(tiny_params, rng):
    x = rng.normal(size=(5, 2))
    c = [0, 1, 1, 0, 2]
    assert reward_log(tiny_params, x, c) == -shifted_energy(tiny_params, x, c).item()
    perm = rng.permutation(5)
    assert abs(reward_log(tiny_params, x[perm], canonicalize(np.array(c)[perm])) - reward_log(tiny_params, x, c)) < 1e-9
    assert reward_log(tiny_params, x, c) != reward_log(tiny_params, x, [0, 0, 1, 1, 2])


def test_greedy_decode_single_point(tiny_params):
    t = greedy_decode(tiny_params, np.zeros((1, 2)))
    assert t.labels.tolist() == [0]
    assert t.logprob == 0.0


def test_greedy_is_deterministic_and_consistent(tiny_params, rng):
    x = rng.normal(size=(12, 2)) * 4
    a, b = greedy_decode(tiny_params, x), greedy_decode(tiny_params, x)
    assert np.array_equal(a.labels, b.labels) and a.logprob == b.logprob
    assert abs(a.logprob - trajectory_logprob(tiny_params, x, a.labels)) < 1e-10
    for n in range(1, 12):
        p = forward_distribution(tiny_params, x, a.labels[:n])
        assert a.labels[n] == int(np.argmax(p))


def test_greedy_ties_go_to_lowest_index():
    p = flat_energy_params()
    t = greedy_decode(p, np.random.default_rng(1).normal(size=(5, 2)))
    assert t.labels.tolist() == [0, 0, 0, 0, 0]


def test_sample_step_frequencies_match_policy(tiny_params):
    x = np.random.default_rng(2).normal(size=(3, 2))
    order = np.arange(3)
    p = forward_distribution(tiny_params, x, [0], order)
    draws = decode_many(tiny_params, [x] * 10000, [order] * 10000, greedy=False, rng=np.random.default_rng(5))
    freq = np.bincount([t.labels[1] for t in draws], minlength=2) / 10000
    se = np.sqrt(p * (1 - p) / 10000)
    assert np.all(np.abs(freq - p) < 3 * se)


def test_sample_logprob_consistent(tiny_params, rng):
    x = rng.normal(size=(8, 2)) * 3
    t = sample_trajectory(tiny_params, x, rng)
    assert abs(t.logprob - trajectory_logprob(tiny_params, x, t.labels, t.order)) < 1e-10
    again = sample_trajectory(tiny_params, x, np.random.default_rng(9))
    again2 = sample_trajectory(tiny_params, x, np.random.default_rng(9))
    assert np.array_equal(again.labels, again2.labels) and np.array_equal(again.order, again2.order)


def test_deterministic_policy_sample_equals_greedy(rng):
    base = ModelParams.init(EncoderConfig.small(width=4), 7)
    x = rng.normal(size=(10, 2)) * 5
    p = sharpened(base, 1e5)
    g = greedy_decode(p, x)
    assert np.all(g.step_logprobs > -1e-12)
    s = sample_trajectory(p, x, rng, order=np.arange(10))
    assert np.array_equal(s.labels, g.labels)


def test_batched_logprobs_match_single(tiny_params, rng):
    eps = [(rng.normal(size=(n, 2)), canonicalize(rng.integers(0, 3, n))) for n in (1, 3, 6)]
    batched = trajectory_logprobs(tiny_params, eps, chunk=2)
    for (x, c), v in zip(eps, batched):
        assert abs(v - trajectory_logprob(tiny_params, x, c)) < 1e-12


def test_bad_order_rejected(tiny_params):
    with pytest.raises(ValueError):
        trajectory_logprob(tiny_params, np.zeros((3, 2)), [0, 0, 0], order=[0, 0, 1])
    with pytest.raises(ValueError):
        decode_many(tiny_params, [np.zeros((2, 2))], greedy=False)


def test_batched_decode_matches_tape_logprobs(tiny_params, rng):
    sets = [rng.normal(size=(n, 2)) * 3 for n in (1, 9, 4, 12, 7)]
    for greedy in (True, False):
        trajs = decode_many(tiny_params, sets, greedy=greedy, rng=np.random.default_rng(4))
        for x, t in zip(sets, trajs):
            assert len(t.labels) == len(x)
            assert abs(t.logprob - trajectory_logprob(tiny_params, x, t.labels, t.order)) < 1e-10
            if greedy:
                assert np.array_equal(t.labels, greedy_decode(tiny_params, x).labels)
