"""Metropolis sampling of canonical densities, with optional linear equality constraints.

States are vectors of dimension ``m``.  Every routine can advance ``R``
independent replicas at once: pass an ``init`` of shape ``(R, m)``.  All
replicas of one chain object share a random stream; independent streams are
obtained by running several chain objects with seeds spawned from a master
seed (see :func:`spawn_seeds`).

Constraints ``G u = V`` are handled in one of two ways:

``projection``
    the chain lives on the affine subspace ``u0 + span(Q)``, where ``Q`` is an
    orthonormal basis of the null space of ``G``; every emitted sample
    satisfies the constraints to rounding.
``penalty``
    the density is multiplied by ``prod_a exp(-(U_a - V_a)^2 / delta^2)``,
    a narrow Gaussian that tends to the delta constraint as ``delta -> 0``.
"""
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateConstraintsError, InvalidInitError, InvalidInputError
from .policy import DEFAULT_POLICY

__all__ = [
    "TargetDensity",
    "ChainResult",
    "Metropolis",
    "run_chain",
    "ConstraintSystem",
    "null_space_basis",
    "feasible_point",
    "run_constrained_chain",
    "batch_means",
    "spawn_seeds",
    "dump_samples",
]

TARGET_ACCEPTANCE = 0.5


@dataclass
class TargetDensity:
    """Unnormalized density ``exp(-neg_log_density(u))`` on ``R^dim``.

    ``neg_log_density`` must accept arrays of shape ``(..., dim)``.

    For cheap single-site updates a target may also supply
    ``local_energy(states, idx, values)``: the part of the negative
    log-density that involves coordinates ``idx`` when they are set to
    ``values`` (shape ``(R, len(idx))``), evaluated per coordinate.  The
    coordinates of one entry of ``color_sets`` must not interact, so they can
    be updated simultaneously.  ``local_delta(states, idx, old, new)`` is an
    optional faster replacement for the difference of two ``local_energy``
    calls.
    """

    neg_log_density: Callable[[np.ndarray], np.ndarray]
    dim: int
    scale: Optional[np.ndarray] = None
    local_energy: Optional[Callable] = None
    color_sets: Optional[Sequence[np.ndarray]] = None
    local_delta: Optional[Callable] = None

    def scales(self):
        if self.scale is None:
            return np.ones(self.dim)
        return np.broadcast_to(np.asarray(self.scale, dtype=float), (self.dim,))


@dataclass
class ChainResult:
    samples: np.ndarray
    acceptance_rate: float
    proposal_width: float
    steps: int
    burn_in: int
    thin: int
    seed: object = None
    extra: dict = field(default_factory=dict)

    def diagnostics(self):
        out = {
            "acceptance_rate": float(self.acceptance_rate),
            "proposal_width": float(self.proposal_width),
            "steps": int(self.steps),
            "burn_in": int(self.burn_in),
            "thin": int(self.thin),
            "seed": self.seed if isinstance(self.seed, (int, type(None))) else str(self.seed),
            "kept_samples": int(self.samples.shape[0]),
        }
        if self.samples.shape[0] >= 2:
            flat = self.samples.reshape(self.samples.shape[0], -1, self.samples.shape[-1]).mean(axis=1)
            mean, err = batch_means(flat, min(100, flat.shape[0]))
            out["batch_means"] = {"mean": mean.tolist(), "stderr": err.tolist()}
        out.update(self.extra)
        return out

    def write_diagnostics(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.diagnostics(), fh, indent=2)


class Metropolis:
    """Random-walk Metropolis chain over one or more replicas.

    One call to :meth:`step` is a sweep over all coordinates in single-site
    mode, or one joint proposal otherwise.  ``proposal_factor`` (shape
    ``(dim, k)``) shapes joint proposals as ``width * factor @ xi`` with
    ``xi ~ N(0, I_k)``; the proposal stays symmetric.
    """

    def __init__(self, target, init, proposal_width=1.0, seed=None, *, single_site=True,
                 proposal_factor=None):
        state = np.array(init, dtype=float)
        self._single = state.ndim == 1
        self.state = np.atleast_2d(state).copy()
        if self.state.shape[1] != target.dim:
            raise InvalidInputError(f"initial state has dimension {self.state.shape[1]}, target {target.dim}")
        if proposal_factor is not None and single_site:
            raise InvalidInputError("a proposal factor requires joint (non single-site) proposals")
        self.target = target
        self.width = float(proposal_width)
        self.rng = np.random.default_rng(seed)
        self.single_site = single_site
        self.factor = None if proposal_factor is None else np.asarray(proposal_factor, dtype=float)
        self._scale = target.scales()
        self.energy = np.asarray(target.neg_log_density(self.state), dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.energy)):
            raise InvalidInitError("negative log-density is not finite at the initial state")
        if single_site:
            sets = target.color_sets
            if sets is None or target.local_energy is None:
                sets = [np.array([i]) for i in range(target.dim)]
            self._sets = [np.asarray(s, dtype=int) for s in sets]
        self.accepted = 0
        self.proposed = 0

    @property
    def replicas(self):
        return self.state.shape[0]

    @property
    def acceptance_rate(self):
        return self.accepted / self.proposed if self.proposed else float("nan")

    def reset_counters(self):
        self.accepted = 0
        self.proposed = 0

    def _accept(self, delta):
        # u < exp(-delta), u uniform on [0, 1)
        return self.rng.random(delta.shape) < np.exp(-delta)

    def _sweep_local(self):
        local, fast = self.target.local_energy, self.target.local_delta
        for idx in self._sets:
            cur = self.state[:, idx]
            prop = cur + self.width * self._scale[idx] * self.rng.standard_normal(cur.shape)
            if fast is not None:
                delta = fast(self.state, idx, cur, prop)
            else:
                delta = local(self.state, idx, prop) - local(self.state, idx, cur)
            ok = self._accept(delta)
            self.state[:, idx] = np.where(ok, prop, cur)
            self.accepted += int(ok.sum())
            self.proposed += ok.size

    def _sweep_full_energy(self):
        f = self.target.neg_log_density
        for idx in self._sets:
            i = idx[0]
            prop = self.state.copy()
            prop[:, i] += self.width * self._scale[i] * self.rng.standard_normal(self.replicas)
            e_new = np.asarray(f(prop), dtype=float).reshape(-1)
            ok = self._accept(e_new - self.energy)
            self.state[ok] = prop[ok]
            self.energy[ok] = e_new[ok]
            self.accepted += int(ok.sum())
            self.proposed += ok.size

    def _joint(self):
        if self.factor is None:
            step = self._scale * self.rng.standard_normal(self.state.shape)
        else:
            step = self.rng.standard_normal((self.replicas, self.factor.shape[1])) @ self.factor.T
        prop = self.state + self.width * step
        e_new = np.asarray(self.target.neg_log_density(prop), dtype=float).reshape(-1)
        ok = self._accept(e_new - self.energy)
        self.state[ok] = prop[ok]
        self.energy[ok] = e_new[ok]
        self.accepted += int(ok.sum())
        self.proposed += ok.size

    def step(self):
        if not self.single_site:
            self._joint()
        elif self.target.local_energy is not None and self.target.color_sets is not None:
            self._sweep_local()
        else:
            self._sweep_full_energy()

    def burn(self, steps, adapt=True, interval=50):
        """Run ``steps`` steps; with ``adapt`` tune the width toward 50% acceptance."""
        done = 0
        while done < steps:
            chunk = min(interval, steps - done)
            self.reset_counters()
            for _ in range(chunk):
                self.step()
            if adapt:
                rate = self.acceptance_rate
                self.width *= float(np.exp(2.0 * (rate - TARGET_ACCEPTANCE)))
            done += chunk
        self.reset_counters()
        if self.target.local_energy is not None and self.single_site:
            self.energy = np.asarray(self.target.neg_log_density(self.state), dtype=float).reshape(-1)

    def stream(self, steps, thin=1):
        """Yield a copy of the state after every ``thin``-th of ``steps`` steps."""
        for k in range(1, steps + 1):
            self.step()
            if k % thin == 0:
                yield self.state[0].copy() if self._single else self.state.copy()


def run_chain(target, init, steps, proposal_width, seed, *, burn_in=0, thin=1, adapt=True,
              single_site=True, proposal_factor=None):
    """Run a Metropolis chain and collect the thinned post-burn-in samples.

    Returns
    -------
    ChainResult
        ``samples`` has shape ``(steps // thin, m)`` for a 1-D ``init`` and
        ``(steps // thin, R, m)`` for replicas.  The acceptance rate refers
        to post-burn-in steps only; the width is frozen after burn-in.
    """
    if steps < 1:
        raise InvalidInputError("steps must be at least 1")
    chain = Metropolis(target, init, proposal_width, seed, single_site=single_site,
                       proposal_factor=proposal_factor)
    chain.burn(burn_in, adapt=adapt)
    samples = np.array(list(chain.stream(steps, thin)))
    return ChainResult(samples, chain.acceptance_rate, chain.width, steps, burn_in, thin, seed)


@dataclass
class ConstraintSystem:
    """Linear constraints ``G u = V`` enforced exactly (projection) or softly (penalty)."""

    G: np.ndarray
    V: np.ndarray
    mode: str = "projection"
    delta: float = 0.05
    policy: object = DEFAULT_POLICY

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.V = np.asarray(self.V, dtype=float).reshape(-1)
        if self.V.shape[0] != self.G.shape[0]:
            raise InvalidInputError("one value per constraint row is required")
        if self.mode not in ("projection", "penalty"):
            raise InvalidInputError(f"unknown constraint mode {self.mode!r}")
        if self.mode == "penalty" and not self.delta > 0:
            raise InvalidInputError("penalty width delta must be positive")
        s = np.linalg.svd(self.G, compute_uv=False)
        if s.size < self.G.shape[0] or s[-1] <= self.policy.rank_rel_tol * s[0]:
            raise DegenerateConstraintsError("constraint matrix does not have full row rank")

    @property
    def N(self):
        return self.G.shape[0]

    @property
    def dim(self):
        return self.G.shape[1]

    def residual(self, u):
        return np.asarray(u) @ self.G.T - self.V


def null_space_basis(G):
    """Orthonormal basis ``(m, m - N)`` of ``{u : G u = 0}`` by modified Gram-Schmidt.

    The rows of ``G`` are orthonormalized first; unit vectors are then
    orthogonalized against everything accepted so far (two passes) and kept
    when a substantial part survives.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    N, m = G.shape
    basis = []

    def orthogonalize(v):
        for _ in range(2):
            for q in basis:
                v = v - (q @ v) * q
        return v

    for row in G:
        v = orthogonalize(row.copy())
        norm = np.linalg.norm(v)
        if norm <= DEFAULT_POLICY.rank_rel_tol * np.linalg.norm(row):
            raise DegenerateConstraintsError("constraint rows are linearly dependent")
        basis.append(v / norm)
    null = []
    for i in range(m):
        if len(basis) == m:
            break
        e = np.zeros(m)
        e[i] = 1.0
        v = orthogonalize(e)
        norm = np.linalg.norm(v)
        if norm > 0.5 / np.sqrt(m):
            v = v / norm
            basis.append(v)
            null.append(v)
    return np.array(null).T.reshape(m, m - N)


def feasible_point(constraints):
    """Minimum-norm solution of ``G u = V``."""
    G, V = constraints.G, constraints.V
    u = G.T @ np.linalg.solve(G @ G.T, V)
    # one step of iterative refinement
    u += G.T @ np.linalg.solve(G @ G.T, V - G @ u)
    return u


def run_constrained_chain(target, constraints, steps, proposal_width, seed, *, burn_in=0, thin=1,
                          init=None, replicas=None, adapt=True, proposal_factor=None,
                          single_site=None):
    """Metropolis sampling of ``target`` restricted by ``constraints``.

    In projection mode proposals are Gaussian steps (optionally shaped by
    ``proposal_factor`` of shape ``(m, k)``) projected onto the null space of
    ``G``; chains start from ``init`` or from :func:`feasible_point`.  In
    penalty mode the narrow-Gaussian factor is added to the target and the
    usual unconstrained sampler is used (single-site by default).

    ``replicas`` runs that many independent copies from the same start.
    """
    m = constraints.dim
    if target.dim != m:
        raise InvalidInputError("target and constraints disagree on the state dimension")
    if init is None:
        init = feasible_point(constraints)
    init = np.array(init, dtype=float)
    if replicas is not None:
        init = np.broadcast_to(init, (replicas, m)).copy()

    if constraints.mode == "penalty":
        G, V, delta = constraints.G, constraints.V, constraints.delta

        def penalized(u):
            r = np.asarray(u) @ G.T - V
            return target.neg_log_density(u) + np.sum(r * r, axis=-1) / delta ** 2

        penalized_target = TargetDensity(penalized, m, target.scale)
        ss = True if single_site is None else single_site
        result = run_chain(penalized_target, init, steps, proposal_width, seed, burn_in=burn_in,
                           thin=thin, adapt=adapt, single_site=ss,
                           proposal_factor=None if ss else proposal_factor)
        result.extra["mode"] = "penalty"
        result.extra["delta"] = delta
        return result

    if single_site:
        raise InvalidInputError("projection mode uses joint proposals only")
    Q = null_space_basis(constraints.G)
    origin = feasible_point(constraints)
    z0 = (init - origin) @ Q
    if np.abs(constraints.residual(init)).max() > 1e-8 * max(1.0, np.abs(constraints.V).max()):
        raise InvalidInitError("initial state violates the constraints")

    def reduced(z):
        return target.neg_log_density(origin + np.asarray(z) @ Q.T)

    if proposal_factor is None:
        factor = Q.T * target.scales()
    else:
        factor = Q.T @ np.asarray(proposal_factor, dtype=float)
    reduced_target = TargetDensity(reduced, Q.shape[1])
    chain = Metropolis(reduced_target, z0, proposal_width, seed, single_site=False,
                       proposal_factor=factor)
    chain.burn(burn_in, adapt=adapt)
    z = np.array(list(chain.stream(steps, thin)))
    samples = origin + z @ Q.T
    result = ChainResult(samples, chain.acceptance_rate, chain.width, steps, burn_in, thin, seed)
    result.extra["mode"] = "projection"
    result.extra["max_residual"] = float(np.abs(constraints.residual(samples)).max())
    return result


def batch_means(x, n_batches=100):
    """Mean and batch-means standard error along axis 0.

    Trailing samples that do not fill a whole batch are discarded for the
    error estimate but kept in the mean.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    n_batches = int(min(n_batches, n))
    if n_batches < 2:
        raise InvalidInputError("at least two samples are needed for batch means")
    size = n // n_batches
    means = x[: size * n_batches].reshape((n_batches, size) + x.shape[1:]).mean(axis=1)
    err = means.std(axis=0, ddof=1) / np.sqrt(n_batches)
    return x.mean(axis=0), err


def spawn_seeds(seed, count):
    """``count`` independent 64-bit seeds derived from a master seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


def dump_samples(path, samples, fmt=None):
    """Write raw samples as CSV (one row per sample) or ``.npy``."""
    samples = np.asarray(samples)
    fmt = fmt or ("npy" if str(path).endswith(".npy") else "csv")
    if fmt == "npy":
        np.save(path, samples)
    elif fmt == "csv":
        flat = samples.reshape(samples.shape[0], -1)
        header = ",".join(f"u{i}" for i in range(flat.shape[1]))
        np.savetxt(path, flat, delimiter=",", header=header, comments="")
    else:
        raise InvalidInputError(f"unknown sample format {fmt!r}")
