"""Numerical tolerances used across the package.

All thresholds live in one frozen record so that a run can override them
from its configuration file and echo the values it used.
"""
from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class NumericalPolicy:
    #: negative-eigenvalue allowance, relative to the largest diagonal entry
    spd_rel_eps: float = 1e-10
    #: largest admissible condition number of the constraint covariance
    max_condition: float = 1e12
    #: relative singular-value cutoff for the rank of a constraint matrix
    rank_rel_tol: float = 1e-10
    #: relative tolerance for reproducing conditioning data
    constraint_rel_tol: float = 1e-10
    #: truncated Fourier tails must fall below this fraction of the k=0 term
    tail_rel_tol: float = 1e-10

    def updated(self, **overrides):
        unknown = set(overrides) - set(asdict(self))
        if unknown:
            raise ValueError(f"unknown policy fields: {sorted(unknown)}")
        return replace(self, **overrides)

    def as_dict(self):
        return asdict(self)


DEFAULT_POLICY = NumericalPolicy()
