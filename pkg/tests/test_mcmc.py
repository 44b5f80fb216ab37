import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import quartic_moment_1d, random_spd

from optpred.conditioning import ConditionedGaussian, GaussianMoments, KernelSet
from optpred.errors import DegenerateConstraintsError, InvalidInitError, InvalidInputError
from optpred.mcmc import (
    ConstraintSystem,
    Metropolis,
    TargetDensity,
    batch_means,
    dump_samples,
    feasible_point,
    null_space_basis,
    run_chain,
    run_constrained_chain,
    spawn_seeds,
)


def gaussian_target(C, mu=None):
    P = np.linalg.inv(C)
    mu = np.zeros(C.shape[0]) if mu is None else mu

    def nld(u):
        r = np.asarray(u) - mu
        return 0.5 * np.einsum("...i,ij,...j->...", r, P, r)

    return TargetDensity(nld, C.shape[0])


def flat_target(m):
    return TargetDensity(lambda u: np.zeros(np.shape(u)[:-1]), m)


def test_uniform_target_accepts_everything():
    res = run_chain(flat_target(3), np.zeros(3), 200, 1.0, seed=0)
    assert res.acceptance_rate == 1.0


def test_standard_gaussian_variance():
    target = TargetDensity(lambda u: 0.5 * u[..., 0] ** 2, 1)
    res = run_chain(target, np.zeros((1000, 1)), 1000, 2.4, seed=1, burn_in=200)
    x2 = res.samples[..., 0] ** 2  # (1000 steps, 1000 replicas): 10^6 samples
    mean, err = batch_means(x2.mean(axis=0), 100)
    assert abs(mean - 1.0) < 4 * err


def test_quartic_fourth_moment():
    target = TargetDensity(lambda u: 0.25 * u[..., 0] ** 4, 1)
    res = run_chain(target, np.zeros((1000, 1)), 500, 1.5, seed=2, burn_in=200)
    x4 = res.samples[..., 0] ** 4
    mean, err = batch_means(x4.mean(axis=0), 100)
    assert abs(mean - quartic_moment_1d(4)) < 3 * err


def test_invalid_init():
    target = TargetDensity(lambda u: np.where(u[..., 0] > 0, 0.0, np.inf), 1)
    with pytest.raises(InvalidInitError):
        run_chain(target, np.array([-1.0]), 10, 0.1, seed=0)


def test_zero_steps_rejected():
    with pytest.raises(InvalidInputError):
        run_chain(flat_target(1), np.zeros(1), 0, 0.1, seed=0)


def test_determinism():
    C = random_spd(np.random.default_rng(0), 4)
    a = run_chain(gaussian_target(C), np.zeros(4), 300, 0.5, seed=123, burn_in=50)
    b = run_chain(gaussian_target(C), np.zeros(4), 300, 0.5, seed=123, burn_in=50)
    assert a.samples.tobytes() == b.samples.tobytes()
    c = run_chain(gaussian_target(C), np.zeros(4), 300, 0.5, seed=124, burn_in=50)
    assert a.samples.tobytes() != c.samples.tobytes()


def test_width_frozen_after_burn_in():
    target = TargetDensity(lambda u: 0.5 * u[..., 0] ** 2, 1)
    chain = Metropolis(target, np.zeros((50, 1)), 0.01, seed=0)
    chain.burn(500, adapt=True)
    tuned = chain.width
    assert tuned > 0.5  # moved far from the poor initial width
    list(chain.stream(200))
    assert chain.width == tuned
    assert 0.35 < chain.acceptance_rate < 0.65


def test_two_set_flux_balance():
    # stationary reversible chain: flux A -> B equals flux B -> A for A = {x < 0.3}
    target = TargetDensity(lambda u: 0.5 * u[..., 0] ** 2 + 0.8 * u[..., 0], 1)
    res = run_chain(target, np.full((400, 1), -0.8), 2000, 1.5, seed=3, burn_in=300)
    side = res.samples[..., 0] < 0.3  # (steps, replicas)
    ab = (side[:-1] & ~side[1:]).sum(axis=0).astype(float)
    ba = (~side[:-1] & side[1:]).sum(axis=0).astype(float)
    diff = ab - ba
    mean, err = diff.mean(), diff.std(ddof=1) / np.sqrt(diff.size)
    assert abs(mean) < 4 * max(err, 1.0 / np.sqrt(diff.size))
    assert ab.sum() > 1000


# constraints

def test_feasible_point_square():
    G = np.array([[2.0, 1.0], [0.5, 3.0]])
    V = np.array([1.0, -2.0])
    u = feasible_point(ConstraintSystem(G, V))
    np.testing.assert_allclose(u, np.linalg.solve(G, V), rtol=1e-13)


def test_feasible_point_zero_values():
    G = np.random.default_rng(0).standard_normal((2, 6))
    np.testing.assert_array_equal(feasible_point(ConstraintSystem(G, np.zeros(2))), 0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_feasible_point_residual(seed):
    rng = np.random.default_rng(seed)
    G, V = rng.standard_normal((2, 32)), rng.normal(0, 5, 2)
    u = feasible_point(ConstraintSystem(G, V))
    assert np.abs(G @ u - V).max() < 1e-12
    # minimum norm: no component in the null space
    assert np.abs(null_space_basis(G).T @ u).max() < 1e-12


def test_rank_deficient_constraints():
    G = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
    with pytest.raises(DegenerateConstraintsError):
        ConstraintSystem(G, [0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), N=st.integers(1, 5), m=st.integers(6, 20))
def test_null_space_basis_orthonormal(seed, N, m):
    G = np.random.default_rng(seed).standard_normal((N, m))
    Q = null_space_basis(G)
    assert Q.shape == (m, m - N)
    np.testing.assert_allclose(Q.T @ Q, np.eye(m - N), atol=1e-12)
    assert np.abs(G @ Q).max() < 1e-12 * np.abs(G).max() * m


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_projection_residual_every_sample(seed):
    rng = np.random.default_rng(seed)
    m = 12
    C = random_spd(rng, m)
    G, V = rng.standard_normal((3, m)), rng.normal(0, 2, 3)
    res = run_constrained_chain(gaussian_target(C), ConstraintSystem(G, V), 200, 0.5, seed, replicas=5)
    assert np.abs(res.samples @ G.T - V).max() < 1e-10
    assert res.extra["max_residual"] < 1e-10


def test_projection_conditional_mean_default_proposals():
    rng = np.random.default_rng(8)
    C = random_spd(rng, 8)
    w = rng.random((2, 8)) + 0.1
    kernels = KernelSet.normalize(w)
    V = np.array([0.5, -0.25])
    exact = ConditionedGaussian.build(GaussianMoments(np.zeros((1, 8)), C), kernels, V).mean.flat()
    res = run_constrained_chain(gaussian_target(C), ConstraintSystem(kernels.weights, V), 400, 0.5, 9,
                                burn_in=300, replicas=1000)
    mean, err = batch_means(res.samples.mean(axis=0), 100)
    assert np.all(np.abs(mean - exact) < 3 * err)


def test_penalty_flat_target_residual_spread():
    G = np.array([[0.25, 0.25, 0.25, 0.25]])
    delta = 0.05
    system = ConstraintSystem(G, [0.3], mode="penalty", delta=delta)
    res = run_constrained_chain(flat_target(4), system, 400, 0.1, 4, burn_in=200, replicas=1000)
    r = (res.samples @ G.T - 0.3)[..., 0]  # (steps, replicas)
    sd_per_replica = np.sqrt((r ** 2).mean(axis=0))
    mean, err = batch_means(sd_per_replica ** 2, 100)
    assert abs(mean - delta ** 2 / 2) < 3 * err


def test_penalty_approaches_projection():
    # Gaussian target with weakly informative kernels, so the penalty bias is visible
    rng = np.random.default_rng(21)
    C = 0.02 * random_spd(rng, 6)
    kernels = KernelSet.normalize(rng.random((2, 6)) + 0.2)
    V = np.array([0.1, -0.1])
    exact = ConditionedGaussian.build(GaussianMoments(np.zeros((1, 6)), C), kernels, V).mean.flat()
    errors, noise = [], []
    for i, delta in enumerate([0.1, 0.05, 0.025]):
        system = ConstraintSystem(kernels.weights, V, mode="penalty", delta=delta)
        res = run_constrained_chain(gaussian_target(C), system, 1500, 0.05, 30 + i, burn_in=500, replicas=400)
        mean, err = batch_means(res.samples.mean(axis=0), 100)
        errors.append(np.linalg.norm(mean - exact))
        noise.append(np.linalg.norm(err))
    assert errors[0] > errors[1] - 3 * noise[1]
    assert errors[1] > errors[2] - 3 * noise[2]
    assert errors[0] > errors[2] + 3 * (noise[0] + noise[2])


def test_projection_rejects_infeasible_init():
    G = np.array([[1.0, 1.0, 0.0]])
    with pytest.raises(InvalidInitError):
        run_constrained_chain(flat_target(3), ConstraintSystem(G, [1.0]), 10, 0.1, 0, init=np.zeros(3))


# helpers

def test_batch_means_iid():
    x = np.random.default_rng(0).standard_normal(100_000)
    mean, err = batch_means(x, 100)
    assert err == pytest.approx(1 / np.sqrt(x.size), rel=0.25)
    assert mean == pytest.approx(x.mean())


def test_spawn_seeds_stable():
    a, b = spawn_seeds(7, 4), spawn_seeds(7, 4)
    assert a == b and len(set(a)) == 4
    assert all(0 <= s < 2 ** 64 for s in a)
    assert spawn_seeds(7, 5)[:4] == a


def test_dump_samples_roundtrip(tmp_path):
    x = np.random.default_rng(0).standard_normal((5, 3))
    dump_samples(tmp_path / "s.npy", x)
    np.testing.assert_array_equal(np.load(tmp_path / "s.npy"), x)
    dump_samples(tmp_path / "s.csv", x)
    back = np.loadtxt(tmp_path / "s.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(back, x, rtol=1e-15)


def test_diagnostics_json(tmp_path):
    res = run_chain(flat_target(2), np.zeros((4, 2)), 50, 0.3, seed=5)
    res.write_diagnostics(tmp_path / "d.json")
    data = json.loads((tmp_path / "d.json").read_text())
    assert data["acceptance_rate"] == 1.0 and data["seed"] == 5
    assert len(data["batch_means"]["stderr"]) == 2
