"""Gaussian priors conditioned on the values of linear functionals.

A prior is a Gaussian random field ``u`` with ``d`` components on a periodic
grid of ``n`` points.  A *collective variable* is a linear functional
``U_a = <g_a, u^{i_a}>`` of one component, defined by a kernel ``g_a``.
Given measured values ``V`` of ``N`` collective variables, the conditional
law of ``u`` is again Gaussian; its mean is a linear regression on ``V`` and
its covariance does not depend on ``V`` at all.

Two prior representations share the same small protocol
(``constraint_covariance``, ``cross_covariance``, ``kernel_means``,
``variance``, ``covariance``, ``mean``):

* :class:`GaussianMoments` -- dense mean and covariance on a grid, paired
  with grid-mode :class:`KernelSet` weights.
* :class:`SpectralGaussian` -- a stationary prior on ``[0, 2*pi)`` given by a
  Fourier spectrum, paired with :class:`SpectralKernelSet` coefficients.
  Kernel contractions are evaluated as spectral sums; fields are returned on
  an evaluation grid.

:class:`GaussianConditioner` holds everything that is independent of ``V``
(factorized constraint covariance, regression coefficients, conditional
covariance).  :meth:`GaussianConditioner.condition` attaches values and
returns a :class:`ConditionedGaussian`.
"""
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import IllConditionedConstraintsError, InvalidInputError, UnsupportedOrderError
from .policy import DEFAULT_POLICY

__all__ = [
    "Field",
    "KernelSet",
    "SpectralKernelSet",
    "GaussianMoments",
    "SpectralGaussian",
    "GaussianConditioner",
    "ConditionedGaussian",
    "constraint_covariance",
    "regression_coefficients",
    "conditional_mean",
    "conditional_covariance",
    "wick_moment",
    "conditional_cubic",
    "pairings",
]

MAX_WICK_ORDER = 8


@dataclass(frozen=True)
class Field:
    """Real ``d``-component function sampled on ``n`` periodic grid points."""

    values: np.ndarray
    dx: float = 1.0

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[None, :]
        if values.ndim != 2 or values.shape[1] < 1:
            raise InvalidInputError(f"field values must have shape (d, n), got {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def d(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[1]

    def component(self, i):
        return self.values[i]

    def flat(self):
        return self.values.ravel()

    def roll(self, shift):
        """Periodic shift ``j -> j + shift`` applied to every component."""
        return Field(np.roll(self.values, shift, axis=1), self.dx)

    @classmethod
    def zeros(cls, d, n, dx=1.0):
        return cls(np.zeros((d, n)), dx)


class KernelSet:
    """Grid-mode kernels: one weight vector and one component index per row.

    ``U_a = sum_j weights[a, j] * u^{components[a]}(j)``.  By default every
    row must sum to one (local-average normalization); pass
    ``normalized=False`` for quadrature representations of kernels that
    integrate to zero.
    """

    def __init__(self, weights, components=None, centers=None, *, normalized=True, atol=1e-10):
        weights = np.atleast_2d(np.asarray(weights, dtype=float))
        if weights.shape[0] < 1 or weights.shape[1] < 1:
            raise InvalidInputError("a kernel set needs at least one kernel on at least one site")
        if components is None:
            components = np.zeros(weights.shape[0], dtype=int)
        components = np.asarray(components, dtype=int).reshape(-1)
        if components.shape[0] != weights.shape[0]:
            raise InvalidInputError("one component index per kernel is required")
        if np.any(components < 0):
            raise InvalidInputError("component indices must be non-negative")
        if normalized:
            sums = weights.sum(axis=1)
            if not np.allclose(sums, 1.0, rtol=0.0, atol=atol):
                raise InvalidInputError(f"kernel weights must sum to 1, got {sums}")
        self.weights = weights
        self.components = components
        self.centers = None if centers is None else np.asarray(centers, dtype=float)
        self.weights.setflags(write=False)

    @classmethod
    def normalize(cls, weights, components=None, centers=None):
        weights = np.atleast_2d(np.asarray(weights, dtype=float))
        return cls(weights / weights.sum(axis=1, keepdims=True), components, centers)

    @property
    def N(self):
        return self.weights.shape[0]

    @property
    def n(self):
        return self.weights.shape[1]

    def operator(self, d):
        """Dense ``(N, d*n)`` matrix mapping a flattened field to the collective variables."""
        if self.components.max() >= d:
            raise InvalidInputError(f"kernel refers to component {self.components.max()} but d={d}")
        G = np.zeros((self.N, d * self.n))
        for a, (i, w) in enumerate(zip(self.components, self.weights)):
            G[a, i * self.n:(i + 1) * self.n] = w
        return G

    def apply(self, u):
        """Collective variables of a field, or of a stack of flattened fields ``(..., d*n)``."""
        if isinstance(u, Field):
            return np.einsum("aj,aj->a", self.weights, u.values[self.components])
        u = np.asarray(u, dtype=float)
        d = u.shape[-1] // self.n
        return u @ self.operator(d).T

    def stacked(self, components):
        """Copy of every kernel once per component in ``components`` (component-major order)."""
        weights = np.concatenate([self.weights] * len(components))
        comps = np.repeat(np.asarray(components, dtype=int), self.N)
        centers = None if self.centers is None else np.concatenate([self.centers] * len(components))
        return KernelSet(weights, comps, centers, normalized=False)


class SpectralKernelSet:
    """Kernels on ``[0, 2*pi)`` given by Fourier coefficients ``g(x) = sum_k c_k exp(ikx)``."""

    def __init__(self, modes, coeffs, components=None, centers=None, *, atol=1e-12):
        modes = np.asarray(modes, dtype=int)
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=complex))
        if coeffs.shape[1] != modes.shape[0]:
            raise InvalidInputError("one coefficient per mode is required")
        order = np.argsort(modes)
        modes, coeffs = modes[order], coeffs[:, order]
        if not np.array_equal(modes, -modes[::-1]):
            raise InvalidInputError("mode set must be symmetric about k=0")
        if not np.allclose(coeffs, np.conj(coeffs[:, ::-1]), rtol=0.0, atol=atol):
            raise InvalidInputError("kernel coefficients violate conjugate symmetry")
        if components is None:
            components = np.zeros(coeffs.shape[0], dtype=int)
        self.modes = modes
        self.coeffs = coeffs
        self.components = np.asarray(components, dtype=int).reshape(-1)
        if self.components.shape[0] != coeffs.shape[0]:
            raise InvalidInputError("one component index per kernel is required")
        self.centers = None if centers is None else np.asarray(centers, dtype=float)

    @property
    def N(self):
        return self.coeffs.shape[0]

    def evaluate(self, x):
        """Kernel values ``(N, len(x))`` at the points ``x``."""
        phase = np.exp(1j * np.outer(self.modes, np.asarray(x, dtype=float)))
        return (self.coeffs @ phase).real

    def apply_coefficients(self, fhat):
        """Collective variables of a field given by Fourier coefficients ``fhat[i, k]``."""
        fhat = np.atleast_2d(fhat)
        return 2.0 * np.pi * np.einsum("ak,ak->a", np.conj(self.coeffs), fhat[self.components]).real

    def on_grid(self, n):
        """Quadrature weights ``g(x_j) * h`` on the grid ``x_j = j*2*pi/n``."""
        x = 2.0 * np.pi * np.arange(n) / n
        return KernelSet(self.evaluate(x) * (2.0 * np.pi / n), self.components, self.centers,
                         normalized=False)

    def stacked(self, components):
        coeffs = np.concatenate([self.coeffs] * len(components))
        comps = np.repeat(np.asarray(components, dtype=int), self.N)
        centers = None if self.centers is None else np.concatenate([self.centers] * len(components))
        return SpectralKernelSet(self.modes, coeffs, comps, centers)


def _check_symmetric_psd(cov, policy, what):
    if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-14 * max(1.0, np.abs(cov).max())):
        raise InvalidInputError(f"{what} is not symmetric")
    scale = np.max(np.diag(cov)) if cov.size else 1.0
    lam_min = np.linalg.eigvalsh(cov)[0]
    if lam_min < -policy.spd_rel_eps * scale:
        raise InvalidInputError(f"{what} has eigenvalue {lam_min:.3e} below -eps_spd")


class GaussianMoments:
    """Mean field and dense covariance of a Gaussian prior on a grid.

    ``covariance`` is ``(d*n, d*n)`` with component-major ordering, so the
    block ``[i*n:(i+1)*n, j*n:(j+1)*n]`` holds ``cov(u^i(x), u^j(y))``.
    """

    def __init__(self, mean, covariance, policy=DEFAULT_POLICY, *, check=True):
        if not isinstance(mean, Field):
            mean = Field(mean)
        covariance = np.array(covariance, dtype=float)
        size = mean.d * mean.n
        if covariance.shape != (size, size):
            raise InvalidInputError(
                f"covariance shape {covariance.shape} does not match mean with d={mean.d}, n={mean.n}")
        if check:
            _check_symmetric_psd(covariance, policy, "prior covariance")
        covariance.setflags(write=False)
        self.mean = mean
        self.covariance = covariance
        self.policy = policy

    @classmethod
    def from_blocks(cls, blocks, mean=None, dx=1.0, policy=DEFAULT_POLICY):
        """Build from a ``d x d`` nested list of ``n x n`` blocks (``None`` means zero)."""
        d = len(blocks)
        n = next(np.shape(b)[0] for row in blocks for b in row if b is not None)
        cov = np.block([[np.zeros((n, n)) if b is None else np.asarray(b, float) for b in row]
                        for row in blocks])
        if mean is None:
            mean = Field.zeros(d, n, dx)
        return cls(mean, cov, policy)

    @property
    def d(self):
        return self.mean.d

    @property
    def n(self):
        return self.mean.n

    def block(self, i, j):
        n = self.n
        return self.covariance[i * n:(i + 1) * n, j * n:(j + 1) * n]

    def variance(self):
        return np.diag(self.covariance).copy()

    def _check(self, kernels):
        if not isinstance(kernels, KernelSet):
            raise InvalidInputError("a grid prior needs grid-mode kernels")
        if kernels.n != self.n:
            raise InvalidInputError(f"kernels live on {kernels.n} sites, prior on {self.n}")
        if kernels.components.max() >= self.d:
            raise InvalidInputError("kernel component index exceeds prior component count")

    def constraint_covariance(self, kernels):
        self._check(kernels)
        G = kernels.operator(self.d)
        return G @ self.covariance @ G.T

    def cross_covariance(self, kernels):
        """``C G^T`` with shape ``(d*n, N)``: covariance of each site with each collective variable."""
        self._check(kernels)
        return self.covariance @ kernels.operator(self.d).T

    def kernel_means(self, kernels):
        self._check(kernels)
        return kernels.apply(self.mean)

    def sample(self, size, rng):
        """Draws of shape ``(size, d, n)``."""
        w, Q = np.linalg.eigh(self.covariance)
        root = Q * np.sqrt(np.clip(w, 0.0, None))
        z = rng.standard_normal((size, root.shape[1]))
        return (self.mean.flat() + z @ root.T).reshape(size, self.d, self.n)


class SpectralGaussian:
    """Stationary Gaussian on ``[0, 2*pi)`` with independent, identically distributed components.

    ``cov(u^i(x), u^j(y)) = delta_ij / (2*pi) * sum_k spectrum[k] * exp(ik(x-y))``
    and zero mean.  Fields are reported on ``n_eval`` equispaced points.
    """

    def __init__(self, modes, spectrum, d=1, n_eval=256):
        modes = np.asarray(modes, dtype=int)
        spectrum = np.asarray(spectrum, dtype=float)
        if modes.shape != spectrum.shape:
            raise InvalidInputError("one spectral weight per mode is required")
        if np.any(spectrum < 0):
            raise InvalidInputError("spectrum must be non-negative")
        order = np.argsort(modes)
        self.modes = modes[order]
        self.spectrum = spectrum[order]
        self.d = int(d)
        self.n = int(n_eval)
        self.dx = 2.0 * np.pi / self.n
        self.x = self.dx * np.arange(self.n)

    @property
    def mean(self):
        return Field.zeros(self.d, self.n, self.dx)

    def _check(self, kernels):
        if not isinstance(kernels, SpectralKernelSet):
            raise InvalidInputError("a spectral prior needs spectral kernels")
        if not np.array_equal(kernels.modes, self.modes):
            raise InvalidInputError("kernel and prior mode sets differ")
        if kernels.components.max() >= self.d:
            raise InvalidInputError("kernel component index exceeds prior component count")

    def covariance_function(self, r):
        """Single-component covariance at separations ``r``."""
        r = np.asarray(r, dtype=float)
        flat = r.reshape(-1)
        out = np.empty(flat.shape)
        step = max(1, (1 << 22) // max(1, self.modes.size))
        for i in range(0, flat.size, step):
            out[i:i + step] = np.cos(np.multiply.outer(flat[i:i + step], self.modes)) @ self.spectrum
        return out.reshape(r.shape) / (2.0 * np.pi)

    def constraint_covariance(self, kernels):
        self._check(kernels)
        same = kernels.components[:, None] == kernels.components[None, :]
        M = 2.0 * np.pi * ((np.conj(kernels.coeffs) * self.spectrum) @ kernels.coeffs.T).real
        return np.where(same, M, 0.0)

    def cross_covariance(self, kernels):
        self._check(kernels)
        phase = np.exp(1j * np.outer(self.modes, self.x))
        values = ((kernels.coeffs * self.spectrum) @ phase).real  # (N, n)
        out = np.zeros((self.d * self.n, kernels.N))
        for a, i in enumerate(kernels.components):
            out[i * self.n:(i + 1) * self.n, a] = values[a]
        return out

    def kernel_means(self, kernels):
        self._check(kernels)
        return np.zeros(kernels.N)

    def variance(self):
        return np.full(self.d * self.n, self.spectrum.sum() / (2.0 * np.pi))

    @cached_property
    def covariance(self):
        row = self.covariance_function(self.x)
        idx = np.arange(self.n)
        block = row[(idx[None, :] - idx[:, None]) % self.n]
        return np.kron(np.eye(self.d), block)


def constraint_covariance(prior, kernels, policy=DEFAULT_POLICY):
    """Covariance matrix ``M[b, a] = cov(U_b, U_a)`` of the collective variables.

    Raises
    ------
    InvalidInputError
        If kernels and prior disagree on grid size or component count.
    IllConditionedConstraintsError
        If ``M`` is not positive definite or its condition number exceeds
        ``policy.max_condition``.
    """
    M = prior.constraint_covariance(kernels)
    M = 0.5 * (M + M.T)
    lam = np.linalg.eigvalsh(M)
    if lam[0] <= 0.0 or lam[-1] / lam[0] > policy.max_condition:
        raise IllConditionedConstraintsError(
            f"constraint covariance eigenvalues span [{lam[0]:.3e}, {lam[-1]:.3e}]")
    return M


class GaussianConditioner:
    """The value-independent part of conditioning a prior on a kernel set."""

    def __init__(self, prior, kernels, policy=DEFAULT_POLICY):
        self.prior = prior
        self.kernels = kernels
        self.policy = policy
        self.M = constraint_covariance(prior, kernels, policy)
        self._factor = cho_factor(self.M, lower=True)
        self.M_inverse = cho_solve(self._factor, np.eye(kernels.N))
        self.cross = prior.cross_covariance(kernels)
        # coefficients[:, a] is the regression field c_a, flattened component-major
        self.coefficients = cho_solve(self._factor, self.cross.T).T
        self.kernel_means = prior.kernel_means(kernels)
        residual = np.abs(self.M @ self.M_inverse - np.eye(kernels.N)).max()
        if residual > 1e3 * policy.constraint_rel_tol:
            raise IllConditionedConstraintsError(f"M M^-1 deviates from identity by {residual:.2e}")

    @property
    def N(self):
        return self.kernels.N

    @property
    def d(self):
        return self.prior.d

    @property
    def n(self):
        return self.prior.n

    def regression_fields(self):
        """Array ``(N, d, n)``; entry ``a`` is the regression field ``c_a``."""
        return self.coefficients.T.reshape(self.N, self.d, self.n)

    @cached_property
    def covariance(self):
        cov = self.prior.covariance - self.coefficients @ self.cross.T
        cov = 0.5 * (cov + cov.T)
        cov.setflags(write=False)
        return cov

    @cached_property
    def variance(self):
        """Diagonal of the conditional covariance, without forming the full matrix."""
        v = self.prior.variance() - np.einsum("ia,ia->i", self.coefficients, self.cross)
        v.setflags(write=False)
        return v

    def mean_flat(self, V):
        V = np.asarray(V, dtype=float)
        if V.shape[-1] != self.N:
            raise InvalidInputError(f"expected {self.N} conditioning values, got {V.shape[-1]}")
        return self.prior.mean.flat() + (V - self.kernel_means) @ self.coefficients.T

    def condition(self, V):
        return ConditionedGaussian(self, V)


class ConditionedGaussian:
    """A prior conditioned on ``U = V``; shares all value-independent caches with its conditioner."""

    def __init__(self, conditioner, V):
        V = np.array(V, dtype=float).reshape(-1)
        if V.shape[0] != conditioner.N:
            raise InvalidInputError(f"expected {conditioner.N} conditioning values, got {V.shape[0]}")
        V.setflags(write=False)
        self.conditioner = conditioner
        self.values = V

    @classmethod
    def build(cls, prior, kernels, V, policy=DEFAULT_POLICY):
        return cls(GaussianConditioner(prior, kernels, policy), V)

    prior = property(lambda self: self.conditioner.prior)
    kernels = property(lambda self: self.conditioner.kernels)
    M = property(lambda self: self.conditioner.M)
    M_inverse = property(lambda self: self.conditioner.M_inverse)
    covariance = property(lambda self: self.conditioner.covariance)
    variance = property(lambda self: self.conditioner.variance)

    @property
    def regression_coeffs(self):
        return self.conditioner.regression_fields()

    @cached_property
    def mean(self):
        c = self.conditioner
        dx = getattr(c.prior, "dx", c.prior.mean.dx)
        return Field(c.mean_flat(self.values).reshape(c.d, c.n), dx)


def regression_coefficients(prior, kernels, policy=DEFAULT_POLICY):
    """Regression fields ``c_a = sum_b (C g_b) [M^-1]_{ba}`` as an ``(N, d, n)`` array."""
    return GaussianConditioner(prior, kernels, policy).regression_fields()


def conditional_mean(cond):
    """Conditional mean field ``<u>_V = <u> + sum_a c_a (V_a - <U_a>)``."""
    return cond.mean


def conditional_covariance(prior, kernels, policy=DEFAULT_POLICY):
    """Conditional covariance ``C - sum_a c_a (C g_a)^T``; it does not depend on the values."""
    return GaussianConditioner(prior, kernels, policy).covariance


def pairings(items):
    """All perfect matchings of ``items`` as lists of 2-tuples."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for k, partner in enumerate(rest):
        for tail in pairings(rest[:k] + rest[k + 1:]):
            yield [(first, partner)] + tail


def _central_moment(cov, indices):
    if len(indices) % 2:
        return 0.0
    return sum(np.prod([cov[i, j] for i, j in p]) for p in pairings(indices))


def wick_moment(cov, mean, indices, central=True):
    """Gaussian moment of the variables ``indices`` via the pairing rule.

    Parameters
    ----------
    cov : (m, m) array
        Covariance matrix (conditional or not).
    mean : Field, (m,) array or None
        Mean vector; only used for raw moments.
    indices : sequence of int
        Flattened indices into the state, repetitions allowed.
    central : bool
        If true return ``E[prod (u_i - mean_i)]``; otherwise ``E[prod u_i]``.
    """
    indices = [int(i) for i in indices]
    if len(indices) > MAX_WICK_ORDER:
        raise UnsupportedOrderError(f"moments of order {len(indices)} > {MAX_WICK_ORDER} are not supported")
    cov = np.asarray(cov, dtype=float)
    if central:
        return float(_central_moment(cov, indices))
    if mean is None:
        mu = np.zeros(cov.shape[0])
    else:
        mu = mean.flat() if isinstance(mean, Field) else np.asarray(mean, dtype=float).ravel()
    positions = range(len(indices))
    total = 0.0
    # expand prod (mu_i + x_i): choose which factors contribute fluctuations
    for size in range(0, len(indices) + 1, 2):
        for chosen in combinations(positions, size):
            rest = [indices[p] for p in positions if p not in chosen]
            total += np.prod(mu[rest]) * _central_moment(cov, [indices[p] for p in chosen])
    return float(total)


def conditional_cubic(cond, site, component=0):
    """Conditional third raw moment ``3 <u^2>_V <u>_V - 2 <u>_V^3`` at one site."""
    n = cond.conditioner.n
    flat = component * n + site
    m = cond.mean.values[component, site]
    second = m * m + cond.variance[flat]
    return 3.0 * second * m - 2.0 * m ** 3

