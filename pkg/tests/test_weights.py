import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from colrel.connectivity import ConnectivityModel, build_erdos_renyi, ensure_valid, random_model
from colrel.weights import (BracketError, InfeasibleModelError, SolverReport, bisect_lambda, feasibility_check,
                            column_map, init_weights, load_weights_csv, load_weights_json, optimize_weights, relay_reach,
                            s_bar_value, s_value, save_weights_csv, save_weights_json, solve_column_finetune,
                            solve_column_relaxed, unbiasedness_residuals)


def model(p, P, E=None):
    P = np.asarray(P, dtype=float)
    E = P * P.T if E is None else E
    E = np.array(E, dtype=float)
    np.fill_diagonal(E, 1.0)
    return ensure_valid(ConnectivityModel(p, P, E))


ONES = np.ones((2, 2))


def brute_s(m, A):
    """Var(sum_i W_i) by enumerating uplinks and pair tables (n <= 3).

    Equals E[(sum_i (W_i - 1))^2] whenever A is unbiased.
    """
    n = m.n
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    probs, totals = [], []
    for up in itertools.product([0, 1], repeat=n):
        wu = math.prod(m.p[k] if up[k] else 1 - m.p[k] for k in range(n))
        if wu == 0:
            continue
        for outs in itertools.product([(1, 1), (1, 0), (0, 1), (0, 0)], repeat=len(pairs)):
            w = wu
            tau = np.eye(n)
            for (i, j), (a, b) in zip(pairs, outs):
                e, pij, pji = m.E[i, j], m.P[i, j], m.P[j, i]
                w *= {(1, 1): e, (1, 0): pij - e, (0, 1): pji - e, (0, 0): 1 - pij - pji + e}[(a, b)]
                tau[i, j], tau[j, i] = a, b
            if w == 0:
                continue
            W = [sum(up[j] * tau[i, j] * A[j, i] for j in range(n)) for i in range(n)]
            probs.append(w)
            totals.append(math.fsum(W))
    probs, totals = np.array(probs), np.array(totals)
    mean = probs @ totals
    return float(probs @ (totals - mean) ** 2)


# ---- feasibility and initialisation

def test_feasibility_examples():
    assert feasibility_check(model([1, 1], [[1, 0.3], [0.2, 1]])) == []
    assert feasibility_check(model([0, 1], np.eye(2))) == [0]
    assert feasibility_check(model([0, 1], [[1, 1], [0, 1]])) == []


def test_init_weights_examples():
    m = model([0.5, 0.5], ONES, ONES)
    np.testing.assert_array_equal(init_weights(m), np.ones((2, 2)))
    np.testing.assert_array_equal(init_weights(model([0.5, 0.25], np.eye(2))), np.diag([2.0, 4.0]))
    n = 5
    np.testing.assert_allclose(init_weights(model(np.ones(n), np.ones((n, n)), np.ones((n, n)))), 1 / n)
    with pytest.raises(InfeasibleModelError):
        init_weights(model([0, 1], np.eye(2)))


def test_init_weights_are_unbiased_and_respect_support():
    for seed in range(20):
        m = random_model(6, np.random.default_rng(seed))
        A = init_weights(m)
        assert np.max(np.abs(unbiasedness_residuals(m, A))) <= 1e-12
        assert np.all(A[relay_reach(m) == 0] == 0)


def test_residual_examples():
    np.testing.assert_array_equal(unbiasedness_residuals(model([0.5, 1], np.eye(2)), np.eye(2)), [-0.5, 0])
    np.testing.assert_array_equal(unbiasedness_residuals(model([0.5, 0.25], np.eye(2)), np.diag([2.0, 4.0])), [0, 0])


# ---- objectives

def test_s_examples():
    n = 3
    perfect = model(np.ones(n), np.ones((n, n)), np.ones((n, n)))
    assert s_value(perfect, init_weights(perfect)) == 0
    assert s_bar_value(perfect, init_weights(perfect)) == 0
    m = model([0.5, 0.5], np.eye(2))
    A = np.diag([2.0, 2.0])
    assert s_value(m, A) == 2.0
    # enumeration: each W_i is 2 w.p. 1/2, 0 otherwise, independently
    assert brute_s(m, A) == 2.0
    m = model([1, 1], [[1, 0.5], [0.5, 1]], [[1, 0.25], [0.25, 1]])
    A = np.array([[0.5, 1.0], [1.0, 0.5]])
    assert math.isclose(s_value(m, A), 0.5, abs_tol=1e-15)
    assert math.isclose(brute_s(m, A), 0.5, abs_tol=1e-15)


def test_s_bar_strict_gap_example():
    m = model([1, 1], [[1, 0.5], [0.5, 1]], [[1, 0.5], [0.5, 1]])
    A = np.array([[0.0, 0.0], [2.0, 1.0]])          # alpha_21 = 2, alpha_22 = 1
    assert s_value(m, A) == 1.0
    assert s_bar_value(m, A) == 2.0
    assert math.isclose(brute_s(m, A), 1.0, abs_tol=1e-14)


def test_s_matches_enumeration_on_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(15):
        m = random_model(int(rng.integers(2, 4)), rng)
        A = rng.uniform(0, 2, (m.n, m.n)) * (relay_reach(m) > 0)
        assert math.isclose(s_value(m, A), brute_s(m, A), rel_tol=1e-12, abs_tol=1e-12)


def test_symmetric_a_and_p_give_equal_objectives():
    rng = np.random.default_rng(4)
    P = rng.uniform(0.1, 1, (4, 4))
    P = np.triu(P, 1) + np.triu(P, 1).T + np.eye(4)
    m = model(rng.uniform(0.1, 1, 4), P, P)
    A = rng.uniform(0, 1, (4, 4))
    A = A + A.T
    assert math.isclose(s_value(m, A), s_bar_value(m, A), rel_tol=1e-14)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 6))
def test_relaxation_bounds_s(seed, n):
    rng = np.random.default_rng(seed)
    m = random_model(n, rng)
    A = rng.exponential(1.0, (n, n))
    assert s_value(m, A) <= s_bar_value(m, A) + 1e-12 * max(1.0, s_bar_value(m, A))


# ---- bisection

def test_bisect_identity():
    assert abs(bisect_lambda(lambda x: x, 0.0, 2.0) - 1.0) <= 1e-12


def test_bisect_bracket_errors():
    with pytest.raises(BracketError):
        bisect_lambda(lambda x: x, 0.0, 0.5)
    with pytest.raises(BracketError):
        bisect_lambda(lambda x: x + 2, 0.0, 5.0)


def test_bisect_relaxed_column_multiplier():
    # n=2, p=(0.5, 0.5), all-ones links: entries (lam - 1) each, constraint 0.5 * 2 * (lam - 1) = 1
    m = model([0.5, 0.5], ONES, ONES)
    lam = bisect_lambda(lambda l: 0.5 * 2 * max(0.0, l - 1.0), 0.0, 10.0)
    assert abs(lam - 2.0) <= 1e-11
    np.testing.assert_allclose(solve_column_relaxed(m, np.ones((2, 2)), 0), [1.0, 1.0], atol=1e-12)


# ---- column solves

def test_case_b_two_sure_relays():
    P = np.array([[1, 1, 1, 0.4], [1, 1, 1, 0.2], [1, 1, 1, 0.5], [0.4, 0.2, 0.5, 1]])
    m = model([1.0, 0.7, 1.0, 0.5], P, P)          # sure relays of client 1: clients 0 and 2
    col = solve_column_relaxed(m, init_weights(m), 1)
    np.testing.assert_array_equal(col, [0.5, 0, 0.5, 0])
    np.testing.assert_array_equal(solve_column_finetune(m, init_weights(m), 1), col)


def test_column_examples():
    m = model([0.5, 0.5], ONES, ONES)
    np.testing.assert_allclose(solve_column_finetune(m, np.ones((2, 2)), 0), [1.0, 1.0], atol=1e-12)
    m = model([0.5, 0.5], np.eye(2))
    np.testing.assert_allclose(solve_column_relaxed(m, np.diag([2.0, 2.0]), 1), [0.0, 2.0], atol=1e-12)
    m = model([0.25, 0.5, 0.5], [[1, 0, 0], [0, 1, 1], [0, 1, 1]])
    np.testing.assert_allclose(solve_column_finetune(m, init_weights(m), 0), [4.0, 0, 0], atol=1e-12)


def test_column_infeasible():
    m = ConnectivityModel([0.0, 1.0], np.eye(2), np.eye(2))
    with pytest.raises(InfeasibleModelError):
        solve_column_relaxed(m, np.eye(2), 0)


def test_column_sum_is_monotone_in_multiplier():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = random_model(5, rng, density=0.9)
        m = ConnectivityModel(np.minimum(m.p, 0.95), m.P, m.E)
        A = optimize_weights(m, sweeps=3)[0]
        for i in range(m.n):
            for fine in (False, True):
                entries, c, hi = column_map(m, A, i, fine)
                sums = [float(c @ entries(lam)) for lam in np.linspace(0.0, hi, 300)]
                assert np.all(np.diff(sums) >= 0)
                assert sums[0] <= 1.0 <= sums[-1]
                cols = np.array([entries(lam) for lam in np.linspace(0.0, hi, 50)])
                assert np.all(np.diff(cols, axis=0) >= 0)


# ---- optimiser

def test_optimize_identity_links():
    m = model([0.5, 0.25], np.eye(2))
    A, rep = optimize_weights(m)
    np.testing.assert_allclose(A, np.diag([2.0, 4.0]), atol=1e-12)
    assert rep.max_residual <= 1e-12


def test_optimize_analytic_two_client_instance():
    A, rep = optimize_weights(model([0.5, 0.5], ONES, ONES))
    assert abs(s_value(model([0.5, 0.5], ONES, ONES), A) - 2.0) <= 1e-9
    assert abs(rep.s - 2.0) <= 1e-9


def test_optimize_perfect_network():
    n = 6
    m = model(np.ones(n), np.ones((n, n)), np.ones((n, n)))
    A, _ = optimize_weights(m)
    assert s_value(m, A) <= 1e-12


def test_optimize_infeasible_model():
    m = ConnectivityModel([0.0, 1.0, 0.0], np.eye(3), np.eye(3))
    with pytest.raises(InfeasibleModelError) as exc:
        optimize_weights(m)
    assert exc.value.columns == [0, 2]


def test_optimize_drop_unreachable():
    P = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]])
    m = model([0.0, 0.5, 0.0], P, P)
    A, rep = optimize_weights(m, unreachable="drop")
    assert rep.unreachable == [2]
    assert np.all(A[:, 2] == 0)
    res = unbiasedness_residuals(m, A)
    assert np.max(np.abs(res[:2])) <= 1e-12 and res[2] == -1.0
    with pytest.raises(ValueError):
        optimize_weights(m, unreachable="ignore")


def test_optimize_is_deterministic_and_monotone_traces():
    m = random_model(7, np.random.default_rng(2))
    A1, r1 = optimize_weights(m, sweeps=30)
    A2, r2 = optimize_weights(m, sweeps=30)
    np.testing.assert_array_equal(A1, A2)
    assert r1.to_json() == r2.to_json()
    for tr in (r1.trace_relaxed, r1.trace_finetune):
        assert all(b <= a + 1e-9 * abs(a) for a, b in zip(tr, tr[1:]))
    assert r1.s <= s_value(m, init_weights(m)) + 1e-12


def test_callback_sees_column_updates():
    m = random_model(4, np.random.default_rng(6))
    seen = []
    optimize_weights(m, sweeps=2, callback=lambda ph, sw, i, A: seen.append((ph, sw, i)))
    assert seen[:4] == [("relaxed", 0, i) for i in range(4)]
    assert {ph for ph, _, _ in seen} == {"relaxed", "finetune"}


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_optimizer_invariants(seed):
    rng = np.random.default_rng(seed)
    m = random_model(int(rng.integers(2, 6)), rng)
    A, rep = optimize_weights(m, sweeps=20)
    assert np.all(A >= 0)
    assert np.all(A[relay_reach(m) == 0] == 0)
    assert np.max(np.abs(unbiasedness_residuals(m, A))) <= 1e-9
    assert rep.s <= rep.s_bar + 1e-12 * max(1, rep.s_bar)


# ---- IO

def test_weights_round_trips(tmp_path):
    A, rep = optimize_weights(random_model(4, np.random.default_rng(1)))
    save_weights_csv(A, tmp_path / "w.csv")
    np.testing.assert_array_equal(load_weights_csv(tmp_path / "w.csv"), A)
    save_weights_json(A, tmp_path / "w.json")
    np.testing.assert_array_equal(load_weights_json(tmp_path / "w.json"), A)
    back = SolverReport(**__import__("json").loads(rep.to_json()))
    assert back == rep
