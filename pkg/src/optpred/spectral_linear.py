"""Linear Hamiltonian field on the circle, reduced to N kernel averages.

The state is a pair ``(p, q)`` of real fields on ``[0, 2*pi)`` with Fourier
coefficients ``p_k, q_k``.  Each mode rotates at ``omega_k = k^2 + m0^2``::

    dp_k/dt =  omega_k q_k,      dq_k/dt = -omega_k p_k,

and the invariant Gaussian measure has spectrum ``1/omega_k`` for both
components.  The collective variables are averages against periodic
Gaussians of width ``sigma * dx`` centred on the mesh ``x_a = 2*pi*a/N``,
``dx = 2*pi/N``.

Because the dynamics is linear, the conditional mean of the future
collective variables is available in closed form (:class:`ExactPropagator`).
The effective system ``dV^p/dt = B V^q``, ``dV^q/dt = -B V^p`` is the
closure that assumes the conditioned ensemble stays a conditioned prior.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .conditioning import ConditionedGaussian, GaussianConditioner, SpectralGaussian, SpectralKernelSet
from .errors import InvalidInputError
from .ode import OdeProblem, integrate
from .policy import DEFAULT_POLICY

__all__ = [
    "LinearModel",
    "ExactPropagator",
    "spectral_covariance",
    "kernel_fourier",
    "trig_kernels",
    "optimal_interpolant",
    "effective_linear_rhs",
    "effective_evolution",
    "exact_evolution",
    "sample_prior_field",
    "random_values",
    "deviation_time",
]

MAX_MODES = 1 << 20


def _tail_bound(K, m0, sigma):
    """Bound on ``sum_{|k|>K} exp(-k^2 s^2/4) / (k^2 + m0^2)``, ``s`` the kernel width.

    Successive terms shrink at least by ``exp(-(2K+3) s^2/4)``, so the tail is
    below a geometric series started at ``k = K+1``.
    """
    first = np.exp(-((K + 1) ** 2) * sigma ** 2 / 4.0) / ((K + 1) ** 2 + m0 ** 2)
    ratio = np.exp(-(2 * K + 3) * sigma ** 2 / 4.0)
    return 2.0 * first / (1.0 - ratio) if ratio < 1.0 else np.inf


@dataclass(frozen=True)
class LinearModel:
    """Parameters of the linear example.

    ``sigma`` is measured in units of the mesh spacing ``2*pi/N``.  ``K`` is
    raised (by doubling) until the kernel-weighted Fourier tail is below
    ``policy.tail_rel_tol`` times the ``k = 0`` term; the requested value is
    kept in ``K_requested``.
    """

    N: int = 5
    m0: float = 1.0
    sigma: float = 1.0
    K: int = 512
    n_eval: int = 256
    policy: object = DEFAULT_POLICY
    K_requested: Optional[int] = None

    def __post_init__(self):
        if int(self.N) < 1:
            raise InvalidInputError("N must be at least 1")
        if not self.m0 > 0:
            raise InvalidInputError(f"m0 must be positive, got {self.m0}")
        if not self.sigma > 0:
            raise InvalidInputError(f"sigma must be positive, got {self.sigma}")
        if int(self.K) < 8:
            raise InvalidInputError(f"K must be at least 8, got {self.K}")
        if int(self.n_eval) < 2:
            raise InvalidInputError("n_eval must be at least 2")
        K = int(self.K)
        target = self.policy.tail_rel_tol / self.m0 ** 2
        while _tail_bound(K, self.m0, self.width) > target:
            if K >= MAX_MODES:
                raise InvalidInputError("Fourier truncation cannot reach the tail tolerance")
            K *= 2
        object.__setattr__(self, "K_requested", int(self.K) if self.K_requested is None else self.K_requested)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "n_eval", int(self.n_eval))

    @property
    def dx(self):
        return 2.0 * np.pi / self.N

    @property
    def width(self):
        return self.sigma * self.dx

    @property
    def centers(self):
        return self.dx * np.arange(1, self.N + 1)

    @property
    def modes(self):
        return np.arange(-self.K, self.K + 1)

    @property
    def omega(self):
        k = self.modes
        return k * k + self.m0 ** 2

    def with_sigma(self, sigma):
        return LinearModel(self.N, self.m0, sigma, self.K_requested, self.n_eval, self.policy)


def spectral_covariance(model):
    """Stationary two-component prior with spectrum ``1/(k^2 + m0^2)``.

    ``n_eval`` is raised to ``2K+1`` if needed so that the evaluation grid
    resolves every retained mode.
    """
    n_eval = max(model.n_eval, 2 * model.K + 1)
    return SpectralGaussian(model.modes, 1.0 / model.omega, d=2, n_eval=n_eval)


def _grid_prior(model):
    # The interpolant is reported on n_eval points; the spectral sums do not need a finer grid.
    return SpectralGaussian(model.modes, 1.0 / model.omega, d=2, n_eval=model.n_eval)


def kernel_fourier(model, alpha):
    """Fourier coefficients over ``model.modes`` of the periodic Gaussian centred at ``x_alpha``.

    ``alpha`` runs from 1 to ``N``.
    """
    if not 1 <= int(alpha) <= model.N:
        raise InvalidInputError(f"kernel index must lie in 1..{model.N}, got {alpha}")
    k = model.modes
    x = model.centers[int(alpha) - 1]
    return np.exp(-(k * k) * model.width ** 2 / 4.0) * np.exp(-1j * k * x) / (2.0 * np.pi)


def gaussian_kernels(model):
    coeffs = np.array([kernel_fourier(model, a) for a in range(1, model.N + 1)])
    return SpectralKernelSet(model.modes, coeffs, centers=model.centers)


def trig_kernels(model, k0=1):
    """Kernels ``cos(k0 x)`` and ``sin(k0 x)``, both eigenfunctions of the dynamics."""
    if not 1 <= k0 <= model.K:
        raise InvalidInputError(f"mode {k0} outside 1..{model.K}")
    k = model.modes
    cos = np.where(np.abs(k) == k0, 0.5, 0.0).astype(complex)
    sin = np.where(k == k0, -0.5j, 0.0) + np.where(k == -k0, 0.5j, 0.0)
    return SpectralKernelSet(k, np.array([cos, sin]))


def _kernels(model, kernels):
    return gaussian_kernels(model) if kernels is None else kernels


def _check_values(V, N):
    V = np.asarray(V, dtype=float)
    if V.shape[-1] != 2 * N:
        raise InvalidInputError(f"expected {2 * N} values (V^p then V^q), got {V.shape[-1]}")
    return V


def _pair_sum(kernels, weight):
    """``2*pi * sum_k conj(g_a,k) weight_k g_b,k`` for every kernel pair."""
    c = kernels.coeffs
    return 2.0 * np.pi * ((np.conj(c) * weight) @ c.T).real


def conditioner(model, kernels=None):
    """Value-independent conditioning of the two-component prior on p- and q-kernels."""
    kernels = _kernels(model, kernels)
    return GaussianConditioner(_grid_prior(model), kernels.stacked([0, 1]), model.policy)


def optimal_interpolant(model, V, kernels=None):
    """Conditional mean of ``(p, q)`` on the evaluation grid, as a :class:`ConditionedGaussian`.

    ``V`` holds the ``N`` p-values followed by the ``N`` q-values.  The
    interpolated field is ``result.mean``; its grid is ``model``'s
    ``n_eval`` points ``x_j = 2*pi*j/n_eval``.
    """
    kernels = _kernels(model, kernels)
    V = _check_values(V, kernels.N)
    return ConditionedGaussian(conditioner(model, kernels), V)


@dataclass(frozen=True)
class LinearEffective:
    """Generator ``J = [[0, B], [-B, 0]]`` of the effective linear system."""

    B: np.ndarray
    gram: np.ndarray
    M: np.ndarray
    M_inverse: np.ndarray

    @property
    def J(self):
        N = self.B.shape[0]
        Z = np.zeros((N, N))
        return np.block([[Z, self.B], [-self.B, Z]])

    def __call__(self, t, V):
        N = self.B.shape[0]
        V = np.asarray(V, dtype=float)
        p, q = V[..., :N], V[..., N:]
        return np.concatenate([q @ self.B.T, -(p @ self.B.T)], axis=-1)

    def quadratic_form(self, V):
        """``V^p.M^-1.V^p + V^q.M^-1.V^q``, conserved by the effective flow."""
        N = self.B.shape[0]
        V = np.asarray(V, dtype=float)
        p, q = V[..., :N], V[..., N:]
        Mi = self.M_inverse
        return np.einsum("...a,ab,...b->...", p, Mi, p) + np.einsum("...a,ab,...b->...", q, Mi, q)


def effective_linear_rhs(model, kernels=None):
    """Effective generator with ``B = <g, g> M^-1``."""
    kernels = _kernels(model, kernels)
    cond = GaussianConditioner(_grid_prior(model), kernels, model.policy)
    gram = _pair_sum(kernels, np.ones(model.modes.shape))
    return LinearEffective(gram @ cond.M_inverse, gram, cond.M, cond.M_inverse)


def effective_evolution(model, V, times, dt=1e-3, kernels=None):
    """Integrate the effective system with RK4 and report it at ``times``.

    ``times`` must be non-negative and increasing; consecutive output times
    are reached by whole RK4 steps plus a final partial step when needed.
    """
    rhs = effective_linear_rhs(model, kernels)
    y = _check_values(V, rhs.B.shape[0]).astype(float)
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise InvalidInputError("times must be non-negative and non-decreasing")
    out = np.empty((times.shape[0],) + y.shape)
    t_prev = 0.0
    for i, t in enumerate(times):
        if t > t_prev:
            y = integrate(OdeProblem(rhs, y, t - t_prev, dt, record_every=1 << 30)).final
            t_prev = t
        out[i] = y
    return out


class ExactPropagator:
    """Closed-form conditional mean of the future collective variables.

    ``cC(t)[a, b] = 2*pi * sum_k conj(g_a,k) g_b,k cos(omega_k t)/omega_k`` and
    likewise ``cS`` with ``sin``; the sums are recomputed for every ``t``.
    """

    def __init__(self, model, kernels=None):
        self.model = model
        self.kernels = _kernels(model, kernels)
        cond = GaussianConditioner(_grid_prior(model), self.kernels, model.policy)
        self.M = cond.M
        self.M_inverse = cond.M_inverse
        self.omega = model.omega.astype(float)

    def cC(self, t):
        return _pair_sum(self.kernels, np.cos(self.omega * t) / self.omega)

    def cS(self, t):
        return _pair_sum(self.kernels, np.sin(self.omega * t) / self.omega)

    def __call__(self, V, t):
        if t < 0:
            raise InvalidInputError(f"t must be non-negative, got {t}")
        N = self.kernels.N
        V = _check_values(V, N)
        a = V[..., :N] @ self.M_inverse.T
        b = V[..., N:] @ self.M_inverse.T
        C, S = self.cC(t), self.cS(t)
        return np.concatenate([a @ C.T + b @ S.T, b @ C.T - a @ S.T], axis=-1)


    def derivative(self, V, t):
        """Time derivative of :meth:`__call__` at ``t``."""
        N = self.kernels.N
        V = _check_values(V, N)
        a = V[..., :N] @ self.M_inverse.T
        b = V[..., N:] @ self.M_inverse.T
        dC = _pair_sum(self.kernels, -np.sin(self.omega * t))
        dS = _pair_sum(self.kernels, np.cos(self.omega * t))
        return np.concatenate([a @ dC.T + b @ dS.T, b @ dC.T - a @ dS.T], axis=-1)


def exact_evolution(model, V, t, kernels=None):
    """``(<U^p(t)>_V, <U^q(t)>_V)`` for the exact linear dynamics."""
    return ExactPropagator(model, kernels)(V, t)


def sample_prior_field(model, rng, size=None):
    """Fourier coefficients ``(..., 2, 2K+1)`` of prior samples of ``(p, q)``.

    ``E|f_k|^2 = 1 / (2*pi*omega_k)``; modes are drawn in the order
    ``k = 0, 1, ..., K`` so equal seeds give equal low modes for any ``K``.
    """
    shape = () if size is None else (int(size),)
    K = model.K
    z = rng.standard_normal(shape + (2, K + 1, 2))
    pos = np.arange(K + 1)
    scale = 1.0 / np.sqrt(2.0 * np.pi * (pos * pos + model.m0 ** 2))
    half = (z[..., 0] + 1j * z[..., 1]) * scale / np.sqrt(2.0)
    half[..., 0] = z[..., 0, 0] * scale[0]
    out = np.concatenate([np.conj(half[..., :0:-1]), half], axis=-1)
    return out


def random_values(model, seed, kernels=None):
    """Collective variables ``(V^p, V^q)`` of one prior sample drawn with ``seed``."""
    kernels = _kernels(model, kernels)
    f = sample_prior_field(model, np.random.default_rng(seed))
    return np.concatenate([kernels.apply_coefficients(f[i]) for i in (0, 1)])


def deviation_time(times, approx, exact, scale, threshold=0.05):
    """First time at which ``|approx - exact| > threshold * scale``; ``inf`` if never."""
    err = np.abs(np.asarray(approx) - np.asarray(exact))
    over = np.flatnonzero(err > threshold * scale)
    return float(times[over[0]]) if over.size else float("inf")
