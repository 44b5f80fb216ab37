"""Nonlinear Hamiltonian lattice: fine dynamics, canonical prior and reduced equations.

The fine system has ``2n`` unknowns ``p(j), q(j)`` on a periodic lattice with
spacing ``dx = 1/n`` and Hamiltonian

    H = 1/2 sum_j [ ((p(j+1)-p(j))/dx)^2 + ((q(j+1)-q(j))/dx)^2
                    + mass^2 (p(j)^2 + q(j)^2) + quartic/2 (p(j)^4 + q(j)^4) ]

with ``mass = 0`` and ``quartic = 1`` for the reference problem.  States are
arrays whose last two axes are ``(2, n)``: index 0 holds ``p``, index 1 ``q``.

The canonical density ``exp(-H)`` is not Gaussian.  Its covariance profile is
estimated by Metropolis sampling; a Gaussian with the same first and second
moments then supplies conditional moments for the reduced equations.  The
ensemble oracle, by contrast, samples the true density restricted to the
constraint surface and integrates the fine system.
"""
import json
from dataclasses import asdict, dataclass, field
from itertools import combinations_with_replacement, permutations
from typing import Optional

import numpy as np

from .conditioning import GaussianConditioner, GaussianMoments, KernelSet, conditional_cubic
from .errors import InvalidInputError, InvalidProfileError, InvalidStepError, TuningError
from .mcmc import ConstraintSystem, Metropolis, TargetDensity, run_constrained_chain, spawn_seeds
from .ode import OdeProblem, integrate
from .parallel import pmap
from .policy import DEFAULT_POLICY

__all__ = [
    "LatticeModel",
    "ChainConfig",
    "CovarianceProfile",
    "TrajectoryStats",
    "EffectiveSystem",
    "fine_rhs",
    "hamiltonian",
    "canonical_target",
    "estimate_covariance",
    "gaussianized_prior",
    "effective_nonlinear_rhs",
    "fit_cubic_polynomial",
    "ensemble_oracle",
    "sample_constrained_states",
    "variable_names",
    "canonical_values",
    "energy_drift",
    "max_stable_dt",
]

#: RK4 is applied to a linear part with frequencies up to 4/dx^2; keep dt*4/dx^2 below this
RK4_STABILITY_LIMIT = 2.5


@dataclass(frozen=True)
class LatticeModel:
    n: int = 16
    N: int = 2
    sigma: float = 0.25
    #: 1-based kernel centre sites; default spreads N centres evenly from site 1
    centers: Optional[tuple] = (1, 9)
    quartic: float = 1.0
    mass: float = 0.0

    def __post_init__(self):
        if self.n < 4:
            raise InvalidInputError("the lattice needs at least 4 sites")
        if not 1 <= self.N < self.n:
            raise InvalidInputError("need 1 <= N < n kernels")
        if not self.sigma > 0:
            raise InvalidInputError("sigma must be positive")
        centers = self.centers
        if centers is None or len(centers) != self.N:
            centers = tuple(1 + (a * self.n) // self.N for a in range(self.N))
        centers = tuple(int(c) for c in centers)
        if any(not 1 <= c <= self.n for c in centers):
            raise InvalidInputError("kernel centres must be sites 1..n")
        object.__setattr__(self, "centers", centers)
        if self.quartic < 0 or self.mass < 0:
            raise InvalidInputError("quartic and mass parameters must be non-negative")
        if self.quartic == 0 and self.mass == 0:
            raise InvalidInputError("the canonical density is not normalizable without quartic or mass term")

    @property
    def dx(self):
        return 1.0 / self.n

    def distance(self, j1, j2):
        """Periodic index distance ``min(|j1-j2|, |j1-j2-n|, |j1-j2+n|)``."""
        diff = np.asarray(j1) - np.asarray(j2)
        return np.minimum(np.abs(diff), np.minimum(np.abs(diff - self.n), np.abs(diff + self.n)))

    @property
    def kernels(self):
        """One normalized discrete Gaussian per centre, acting on component 0."""
        sites = np.arange(1, self.n + 1)
        w = np.array([np.exp(-self.distance(c, sites) ** 2 / (self.n ** 2 * self.sigma ** 2))
                      for c in self.centers])
        return KernelSet.normalize(w, np.zeros(self.N, dtype=int), self.centers)

    @property
    def kernels_pq(self):
        """The ``2N`` collective variables ``(U^p_1..U^p_N, U^q_1..U^q_N)``."""
        return self.kernels.stacked([0, 1])

    def collective(self, states):
        """Collective variables of states shaped ``(..., 2, n)`` -> ``(..., 2N)``."""
        w = self.kernels.weights
        states = np.asarray(states)
        return np.concatenate([states[..., 0, :] @ w.T, states[..., 1, :] @ w.T], axis=-1)


def _laplacian(u, dx):
    return (np.roll(u, 1, axis=-1) - 2.0 * u + np.roll(u, -1, axis=-1)) / dx ** 2


def fine_rhs(state, model=LatticeModel()):
    """Hamilton's equations ``dp/dt = dH/dq``, ``dq/dt = -dH/dp`` for states ``(..., 2, n)``."""
    state = np.asarray(state, dtype=float)
    p, q = state[..., 0, :], state[..., 1, :]
    m2, lam, dx = model.mass ** 2, model.quartic, model.dx
    out = np.empty_like(state)
    out[..., 0, :] = -_laplacian(q, dx) + m2 * q + lam * q ** 3
    out[..., 1, :] = _laplacian(p, dx) - m2 * p - lam * p ** 3
    return out


def hamiltonian(state, model=LatticeModel()):
    state = np.asarray(state, dtype=float)
    grad = (np.roll(state, -1, axis=-1) - state) / model.dx
    density = grad ** 2 + model.mass ** 2 * state ** 2 + 0.5 * model.quartic * state ** 4
    return 0.5 * density.sum(axis=(-2, -1))


def max_stable_dt(model):
    return RK4_STABILITY_LIMIT * model.dx ** 2 / 4.0


def canonical_target(model=LatticeModel()):
    """``exp(-H)`` over the flattened state ``(p_1..p_n, q_1..q_n)`` with local energies."""
    n, dx = model.n, model.dx
    m2, lam = model.mass ** 2, model.quartic
    flat = np.arange(2 * n)
    comp, site = flat // n, flat % n
    left = comp * n + (site - 1) % n
    right = comp * n + (site + 1) % n

    def nld(u):
        u = np.asarray(u, dtype=float)
        return hamiltonian(u.reshape(u.shape[:-1] + (2, n)), model)

    def local(states, idx, values):
        ul = states[:, left[idx]]
        ur = states[:, right[idx]]
        return (((values - ul) ** 2 + (ur - values) ** 2) / (2.0 * dx ** 2)
                + 0.5 * m2 * values ** 2 + 0.25 * lam * values ** 4)

    def delta(states, idx, old, new):
        nb = states[:, left[idx]] + states[:, right[idx]]
        o2, n2 = old * old, new * new
        return ((n2 - o2) * (1.0 / dx ** 2 + 0.5 * m2) - (new - old) * nb / dx ** 2
                + 0.25 * lam * (n2 * n2 - o2 * o2))

    colors = site % 2
    if n % 2:
        colors[site == n - 1] = 2
    sets = [flat[colors == c] for c in range(colors.max() + 1)]
    return TargetDensity(nld, 2 * n, local_energy=local, color_sets=sets, local_delta=delta)


@dataclass(frozen=True)
class ChainConfig:
    """Metropolis settings for the covariance profile.

    ``samples`` counts recorded configurations pooled over all replicas;
    ``burn_in`` counts sweeps per replica.  Replicas are split into
    ``blocks`` with independent random streams; the error bars come from
    ``batches`` groups of whole replicas, which are exactly independent.
    """

    samples: int = 2_000_000
    burn_in: int = 100_000
    thin: int = 10
    proposal_width: float = 0.05
    replicas: int = 1000
    blocks: int = 10
    batches: int = 100
    seed: int = 0
    acceptance_band: tuple = (0.2, 0.8)

    def __post_init__(self):
        if self.replicas % self.blocks or self.replicas % self.batches:
            raise InvalidInputError("replicas must be divisible by blocks and by batches")
        if self.samples < self.replicas or self.thin < 1 or self.burn_in < 0:
            raise InvalidInputError("inconsistent chain lengths")

    @property
    def sweeps_per_replica(self):
        return -(-self.samples // self.replicas) * self.thin


@dataclass
class CovarianceProfile:
    """Translation-invariant covariance ``c(r) = <p(j) p(j+r)>``, ``r = 0..n-1``."""

    c: np.ndarray
    stderr: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)

    @property
    def n(self):
        return self.c.shape[0]

    def circulant(self):
        idx = np.arange(self.n)
        return self.c[(idx[None, :] - idx[:, None]) % self.n]

    def rows(self):
        return [(r, self.c[r], self.stderr[r]) for r in range(self.n)]

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"c": self.c.tolist(), "stderr": self.stderr.tolist(), "meta": self.meta}, fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(data["c"], data["stderr"], data.get("meta", {}))


def _symmetrize(c):
    return 0.5 * (c + np.roll(c[::-1], 1))


def _covariance_block(args):
    model, config, seed, replicas, rng_init = args
    n = model.n
    target = canonical_target(model)
    init = np.random.default_rng(rng_init).normal(0.0, 0.3, size=(replicas, 2 * n))
    chain = Metropolis(target, init, config.proposal_width, seed)
    chain.burn(config.burn_in, adapt=True)
    acf = np.zeros((replicas, n))
    cross = np.zeros((replicas, n))
    kept = 0
    for state in chain.stream(config.sweeps_per_replica, config.thin):
        fp = np.fft.rfft(state[:, :n], axis=1)
        fq = np.fft.rfft(state[:, n:], axis=1)
        acf += 0.5 * (np.fft.irfft(np.abs(fp) ** 2, n, axis=1) + np.fft.irfft(np.abs(fq) ** 2, n, axis=1)) / n
        cross += np.fft.irfft(fp * np.conj(fq), n, axis=1) / n
        kept += 1
    return acf / kept, cross / kept, chain.acceptance_rate, chain.width, kept


def estimate_covariance(model=LatticeModel(), config=ChainConfig()):
    """Metropolis estimate of the covariance profile of ``exp(-H)``.

    Means are taken to be zero by the ``u -> -u`` symmetry, so raw second
    moments are averaged over sites, over ``p`` and ``q``, over recorded
    sweeps and over replicas.  The ``p``-``q`` cross covariances are checked
    to vanish within five standard errors and then dropped.

    Raises
    ------
    TuningError
        If the post-burn-in acceptance rate leaves ``config.acceptance_band``.
    InvalidProfileError
        If the cross covariances are significantly nonzero.
    """
    per_block = config.replicas // config.blocks
    seeds = spawn_seeds(config.seed, 2 * config.blocks)
    jobs = [(model, config, seeds[2 * b], per_block, seeds[2 * b + 1]) for b in range(config.blocks)]
    results = pmap(_covariance_block, jobs)
    acf = np.concatenate([r[0] for r in results])
    cross = np.concatenate([r[1] for r in results])
    rates = np.array([r[2] for r in results])
    rate = float(rates.mean())
    lo, hi = config.acceptance_band
    if not lo <= rate <= hi:
        raise TuningError(f"acceptance rate {rate:.3f} outside [{lo}, {hi}]; "
                          f"final widths {[round(r[3], 4) for r in results]}")

    size = config.replicas // config.batches
    batch_acf = acf.reshape(config.batches, size, -1).mean(axis=1)
    batch_cross = cross.reshape(config.batches, size, -1).mean(axis=1)
    c = _symmetrize(batch_acf.mean(axis=0))
    stderr = batch_acf.std(axis=0, ddof=1) / np.sqrt(config.batches)
    stderr = 0.5 * (stderr + np.roll(stderr[::-1], 1))
    cross_mean = batch_cross.mean(axis=0)
    cross_err = batch_cross.std(axis=0, ddof=1) / np.sqrt(config.batches)
    pq_z = float(np.max(np.abs(cross_mean) / cross_err))
    if pq_z > 5.0:
        raise InvalidProfileError(f"p-q cross covariance is {pq_z:.1f} standard errors from zero")
    meta = {
        "seed": config.seed,
        "block_seeds": seeds,
        "replicas": config.replicas,
        "sweeps_per_replica": config.sweeps_per_replica,
        "burn_in": config.burn_in,
        "thin": config.thin,
        "recorded_samples": int(sum(r[4] for r in results) * per_block),
        "acceptance_rate": rate,
        "proposal_widths": [float(r[3]) for r in results],
        "pq_max_abs_z": pq_z,
        "model": asdict(model),
    }
    return CovarianceProfile(c, stderr, meta)


def gaussianized_prior(profile, policy=DEFAULT_POLICY):
    """Zero-mean Gaussian with circulant ``pp`` and ``qq`` blocks from ``profile`` and no ``pq`` coupling."""
    c = profile.c
    if c[0] <= 0:
        raise InvalidProfileError("c(0) must be positive")
    if not np.allclose(c[1:], c[1:][::-1], rtol=0.0, atol=1e-12 * abs(c[0])):
        raise InvalidProfileError("profile is not symmetric under r -> n - r")
    eig = np.fft.fft(c).real
    if eig.min() <= policy.spd_rel_eps * c[0]:
        raise InvalidProfileError(f"circulant has non-positive eigenvalue {eig.min():.3e}")
    C = profile.circulant()
    return GaussianMoments.from_blocks([[C, None], [None, C]], dx=1.0 / profile.n, policy=policy)


def _monomials(dim, degree):
    for deg in range(degree + 1):
        for combo in combinations_with_replacement(range(dim), deg):
            yield combo


class EffectiveSystem:
    """Reduced equations ``dV/dt = <<g, F(u)>>_V`` as a precomputed cubic polynomial.

    Conditional means are affine in ``V`` and conditional variances are
    constant, so the averaged cubic term ``<u^3>_V = m^3 + 3 v m`` makes the
    right-hand side a polynomial of degree three whose coefficient tensors are
    assembled once here.
    """

    def __init__(self, model, prior, policy=DEFAULT_POLICY):
        self.model = model
        self.prior = prior
        self.kernels = model.kernels_pq
        self.conditioner = GaussianConditioner(prior, self.kernels, policy)
        n, R = model.n, self.kernels.N
        cond = self.conditioner
        A = cond.coefficients.reshape(2, n, R)
        a0 = prior.mean.values - np.einsum("cjr,r->cj", A, cond.kernel_means)
        var = np.asarray(cond.variance).reshape(2, n)
        dx, m2, lam = model.dx, model.mass ** 2, model.quartic

        def lin_op(f):  # -lap f + m^2 f along the site axis (axis 0)
            return -(np.roll(f, 1, axis=0) - 2.0 * f + np.roll(f, -1, axis=0)) / dx ** 2 + m2 * f

        g = self.kernels.weights
        c0, c1 = np.zeros(R), np.zeros((R, R))
        c2, c3 = np.zeros((R, R, R)), np.zeros((R, R, R, R))
        for r in range(R):
            comp = self.kernels.components[r]
            src, sign = 1 - comp, (1.0 if comp == 0 else -1.0)
            a, Af, v, w = a0[src], A[src], var[src], g[r]
            c0[r] = sign * w @ (lin_op(a) + lam * (a ** 3 + 3.0 * v * a))
            c1[r] = sign * w @ (lin_op(Af) + lam * (3.0 * (a ** 2)[:, None] * Af + 3.0 * v[:, None] * Af))
            c2[r] = sign * lam * np.einsum("j,ja,jb->ab", w * 3.0 * a, Af, Af)
            c3[r] = sign * lam * np.einsum("j,ja,jb,jc->abc", w, Af, Af, Af)
        self.c0, self.c1, self.c2, self.c3 = c0, c1, c2, c3

    @property
    def dim(self):
        return self.c0.shape[0]

    def __call__(self, t, V):
        V = np.asarray(V, dtype=float)
        return (self.c0 + V @ self.c1.T
                + np.einsum("rab,...a,...b->...r", self.c2, V, V)
                + np.einsum("rabc,...a,...b,...c->...r", self.c3, V, V, V))

    def monomial_coefficients(self, row):
        """Coefficients of ``dV_row/dt`` keyed by variable-index tuples (sorted, with repetition)."""
        out = {}
        for combo in _monomials(self.dim, 3):
            k = len(combo)
            if k == 0:
                val = self.c0[row]
            elif k == 1:
                val = self.c1[row, combo[0]]
            else:
                tensor = self.c2[row] if k == 2 else self.c3[row]
                val = sum(tensor[perm] for perm in set(permutations(combo)))
            out[combo] = float(val)
        return out

    def labelled_coefficients(self, row, tol=0.0):
        names = variable_names(self.dim // 2)
        out = {}
        for combo, val in self.monomial_coefficients(row).items():
            if abs(val) <= tol:
                continue
            label = "*".join(names[i] for i in combo) or "1"
            out[label] = val
        return out

    def reported_coefficients(self):
        """The coefficients quoted for ``dV^p_1/dt`` (requires N = 2).

        Returns the linear coefficients on ``V^q_1`` and ``V^q_2`` and the
        cubic coefficients on ``(V^q_1)^3, (V^q_1)^2 V^q_2, V^q_1 (V^q_2)^2, (V^q_2)^3``.
        """
        if self.dim != 4:
            raise InvalidInputError("reported coefficients are defined for N = 2")
        mono = self.monomial_coefficients(0)
        linear = (mono[(2,)], mono[(3,)])
        cubic = (mono[(2, 2, 2)], mono[(2, 2, 3)], mono[(2, 3, 3)], mono[(3, 3, 3)])
        return linear, cubic


def variable_names(N):
    return [f"Up{a + 1}" for a in range(N)] + [f"Uq{a + 1}" for a in range(N)]


def effective_nonlinear_rhs(model, prior, V, policy=DEFAULT_POLICY, conditioner=None):
    """Direct evaluation of ``<<g_a, F(u)>>_V`` from conditional moments (no precomputed polynomial)."""
    if conditioner is None:
        conditioner = GaussianConditioner(prior, model.kernels_pq, policy)
    cond = conditioner.condition(V)
    n = model.n
    mean = cond.mean.values
    third = np.array([[conditional_cubic(cond, j, c) for j in range(n)] for c in range(2)])
    p, q = mean[0], mean[1]
    dx, m2, lam = model.dx, model.mass ** 2, model.quartic
    Fp = -_laplacian(q, dx) + m2 * q + lam * third[1]
    Fq = _laplacian(p, dx) - m2 * p - lam * third[0]
    w = model.kernels.weights
    return np.concatenate([w @ Fp, w @ Fq])


def fit_cubic_polynomial(rhs, dim, samples=200, seed=0, scale=1.0):
    """Least-squares fit of a vector field by all monomials of degree <= 3.

    Returns one ``{index tuple: coefficient}`` dict per output component.
    """
    rng = np.random.default_rng(seed)
    X = scale * rng.standard_normal((samples, dim))
    monos = list(_monomials(dim, 3))
    design = np.column_stack([np.prod(X[:, list(m)], axis=1) if m else np.ones(samples) for m in monos])
    Y = np.array([rhs(x) for x in X])
    coef, *_ = np.linalg.lstsq(design, Y, rcond=None)
    return [{m: float(coef[i, r]) for i, m in enumerate(monos)} for r in range(Y.shape[1])]


@dataclass
class TrajectoryStats:
    """Per-time-level statistics of the ``2N`` collective variables over an ensemble."""

    times: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    count: int
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    meta: dict = field(default_factory=dict)
    values: Optional[np.ndarray] = None

    @property
    def stderr(self):
        return np.sqrt(self.var / self.count)

    def density(self, var_index, level):
        widths = np.diff(self.hist_edges[var_index])
        return self.hist_counts[level, var_index] / (self.count * widths)


def _constrained_block(args):
    model, V, steps, seed, replicas, factor = args
    n = model.n
    G = model.kernels_pq.operator(2)
    constraints = ConstraintSystem(G, V)
    result = run_constrained_chain(canonical_target(model), constraints, 1, 0.5, seed,
                                   burn_in=steps, replicas=replicas, proposal_factor=factor)
    return result.samples[0].reshape(replicas, 2, n), result.acceptance_rate, result.extra["max_residual"]


def sample_constrained_states(model, V, count, seed, *, chain_steps=2000, block_size=2500, prior=None,
                              policy=DEFAULT_POLICY):
    """Independent draws from ``exp(-H)`` restricted to ``U = V``.

    Each draw is the final state of its own projection-mode chain started at
    the minimum-norm feasible point.  When a Gaussianized ``prior`` is
    given, proposals are shaped by its conditional covariance; this only
    affects mixing, not the sampled law.
    """
    V = np.asarray(V, dtype=float)
    factor = None
    if prior is not None:
        cov = GaussianConditioner(prior, model.kernels_pq, policy).covariance
        lam, vec = np.linalg.eigh(cov)
        factor = vec * np.sqrt(np.clip(lam, 0.0, None))
    sizes = [block_size] * (count // block_size)
    if count % block_size:
        sizes.append(count % block_size)
    seeds = spawn_seeds(seed, len(sizes))
    jobs = [(model, V, chain_steps, s, size, factor) for s, size in zip(seeds, sizes)]
    results = pmap(_constrained_block, jobs)
    states = np.concatenate([r[0] for r in results])
    meta = {
        "block_seeds": seeds,
        "block_sizes": sizes,
        "chain_steps": chain_steps,
        "acceptance_rates": [float(r[1]) for r in results],
        "max_constraint_residual": float(max(r[2] for r in results)),
    }
    return states, meta


def ensemble_oracle(model, V, T, count, dt, seed, *, record_every=10, chain_steps=2000, block_size=2500,
                    prior=None, bins=40, keep_values=False):
    """Mean evolution of the collective variables over an ensemble of fine solutions.

    Initial states are sampled from the true canonical density conditioned on
    ``U = V``; each is advanced with RK4 and the collective variables are
    recorded every ``record_every`` steps.

    Raises
    ------
    InvalidStepError
        If ``dt * 4 / dx^2`` exceeds the RK4 stability margin.
    """
    if count < 1:
        raise InvalidInputError("count must be at least 1")
    if dt * 4.0 / model.dx ** 2 > RK4_STABILITY_LIMIT:
        raise InvalidStepError(f"dt={dt} exceeds the RK4 stability bound {max_stable_dt(model):.3e}")
    states, meta = sample_constrained_states(model, V, count, seed, chain_steps=chain_steps,
                                             block_size=block_size, prior=prior)

    problem = OdeProblem(lambda t, y: fine_rhs(y, model), states, T, dt, record_every,
                         observe=model.collective)
    traj = integrate(problem)
    values = traj.states  # (levels, count, 2N)
    lo, hi = values.min(axis=(0, 1)), values.max(axis=(0, 1))
    pad = 1e-9 * np.maximum(1.0, np.abs(hi - lo))
    edges = np.array([np.linspace(l - p, h + p, bins + 1) for l, h, p in zip(lo, hi, pad)])
    counts = np.array([[np.histogram(values[t, :, v], edges[v])[0] for v in range(values.shape[2])]
                       for t in range(values.shape[0])])
    meta.update({"seed": seed, "dt": dt, "T": T, "record_every": record_every,
                 "partial_step": traj.partial_step})
    return TrajectoryStats(traj.times, values.mean(axis=1), values.var(axis=1, ddof=1) if count > 1
                           else np.zeros(values.shape[::2]), count, edges, counts, meta,
                           values if keep_values else None)


def energy_drift(model, states, T, dt):
    """Relative energy change ``|H(T) - H(0)| / H(0)`` of each trajectory under RK4."""
    states = np.asarray(states, dtype=float)
    traj = integrate(OdeProblem(lambda t, y: fine_rhs(y, model), states, T, dt, record_every=10 ** 9))
    h0 = hamiltonian(states, model)
    return np.abs(hamiltonian(traj.final, model) - h0) / h0


def canonical_values(model, seed, sweeps=20_000, proposal_width=0.05):
    """Collective variables of one state drawn from ``exp(-H)`` by a single burned-in chain."""
    init = np.random.default_rng(seed).normal(0.0, 0.3, size=2 * model.n)
    chain = Metropolis(canonical_target(model), init, proposal_width, seed)
    chain.burn(sweeps, adapt=True)
    return model.collective(chain.state[0].reshape(2, model.n))
