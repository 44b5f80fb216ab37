"""Command-line driver for the linear and lattice experiments.

Usage::

    optpred [CONFIG.json] --experiment NAME [--seed S] [--out DIR]

The JSON config may contain any key of :data:`DEFAULTS`; flags override the
file.  Exit status is 0 on success, 1 on a numerical failure and 2 on a usage
or configuration error.
"""
import argparse
import copy
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, OptPredError
from .io import write_csv, write_json
from .lattice import (
    ChainConfig,
    CovarianceProfile,
    EffectiveSystem,
    LatticeModel,
    canonical_values,
    ensemble_oracle,
    estimate_covariance,
    gaussianized_prior,
    variable_names,
)
from .mcmc import spawn_seeds
from .ode import OdeProblem, integrate
from .spectral_linear import (
    ExactPropagator,
    LinearModel,
    deviation_time,
    effective_evolution,
    optimal_interpolant,
    random_values,
)

EXPERIMENTS = (
    "linear-interpolant",
    "linear-evolve",
    "nonlinear-covariance",
    "nonlinear-effective",
    "nonlinear-ensemble",
    "nonlinear-compare",
    "spread",
)

#: sub-seed names, in the order they are spawned from the master seed
SEED_NAMES = ("linear_values", "covariance", "initial_state", "ensemble")

DEFAULTS = {
    "experiment": None,
    "seed": 0,
    "output_dir": "out",
    "linear": {
        "N": 5,
        "m0": 1.0,
        "K": 512,
        "n_eval": 256,
        "sigmas": [1.0, 0.5, 0.1],
        "T": 6.0,
        "dt": 1e-3,
        "output_dt": 0.01,
        "deviation_threshold": 0.05,
    },
    "nonlinear": {
        "n": 16,
        "N": 2,
        "sigma": 0.25,
        "centers": [1, 9],
        "T": 1.0,
        "dt": 1e-3,
        "record_every": 10,
        "count": 10_000,
        "constrained_steps": 2000,
        "block_size": 2500,
        "bins": 40,
        "V": None,
        "initial_sweeps": 20_000,
        "profile": None,
    },
    "chain": {
        "samples": 2_000_000,
        "burn_in": 100_000,
        "thin": 10,
        "proposal_width": 0.05,
        "replicas": 1000,
        "blocks": 10,
        "batches": 100,
    },
}

_INTEGER_KEYS = {"N", "K", "n_eval", "n", "record_every", "count", "constrained_steps", "block_size",
                 "bins", "initial_sweeps", "samples", "burn_in", "thin", "replicas", "blocks", "batches"}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key!r} must be an object")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def _check_positive(section, name, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{section}.{name} must be a number, got {value!r}")
    if name in _INTEGER_KEYS and int(value) != value:
        raise ConfigError(f"{section}.{name} must be an integer, got {value!r}")
    if not value > 0:
        raise ConfigError(f"{section}.{name} must be positive, got {value!r}")


def validate(config):
    """Check a merged config; raises :class:`ConfigError`."""
    if config["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {config['experiment']!r}; choose from {', '.join(EXPERIMENTS)}")
    seed = config["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed must be an integer in [0, 2^64), got {seed!r}")
    for section in ("linear", "nonlinear", "chain"):
        for name, value in config[section].items():
            if name in ("V", "profile", "centers"):
                continue
            if name == "sigmas":
                if not value:
                    raise ConfigError("linear.sigmas must not be empty")
                for s in value:
                    _check_positive(section, name, s)
                continue
            _check_positive(section, name, value)
    V = config["nonlinear"]["V"]
    if V is not None and len(V) != 2 * config["nonlinear"]["N"]:
        raise ConfigError(f"nonlinear.V needs {2 * config['nonlinear']['N']} values")
    return config


def load_config(path=None, experiment=None, seed=None, out=None):
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    config = _merge(DEFAULTS, raw)
    if experiment is not None:
        config["experiment"] = experiment
    if seed is not None:
        config["seed"] = seed
    if out is not None:
        config["output_dir"] = str(out)
    return validate(config)


def _sigma_tag(s):
    return f"{s:g}".replace(".", "p")


class Run:
    """State shared by the experiment functions of one invocation."""

    def __init__(self, config):
        self.config = config
        self.out = Path(config["output_dir"])
        self.seeds = dict(zip(SEED_NAMES, spawn_seeds(config["seed"], len(SEED_NAMES))))
        self.derived = {}
        self.files = []

    def csv(self, name, header, rows):
        self.files.append(name)
        write_csv(self.out / name, header, rows)

    # linear example

    def linear_model(self, sigma):
        c = self.config["linear"]
        return LinearModel(N=int(c["N"]), m0=float(c["m0"]), sigma=float(sigma), K=int(c["K"]),
                           n_eval=int(c["n_eval"]))

    def linear_values(self):
        """One draw of ``V``, made with the first listed width and shared by all widths."""
        sigmas = self.config["linear"]["sigmas"]
        V = random_values(self.linear_model(sigmas[0]), self.seeds["linear_values"])
        self.derived["linear_V"] = V
        return V

    def linear_interpolant(self):
        summary = {}
        V = self.linear_values()
        for sigma in self.config["linear"]["sigmas"]:
            model = self.linear_model(sigma)
            field = optimal_interpolant(model, V).mean
            x = 2.0 * np.pi * np.arange(model.n_eval) / model.n_eval
            tag = _sigma_tag(sigma)
            self.csv(f"interpolant_sigma{tag}.csv", ["x", "interp_p", "interp_q"],
                     zip(x, field.values[0], field.values[1]))
            self.csv(f"points_sigma{tag}.csv", ["x_alpha", "Vp", "Vq"],
                     zip(model.centers, V[:model.N], V[model.N:]))
            summary[tag] = {"K": model.K}
        self.derived["interpolants"] = summary

    def linear_evolve(self):
        c = self.config["linear"]
        times = np.round(np.arange(0.0, c["T"] + 0.5 * c["output_dt"], c["output_dt"]), 12)
        times = times[times <= c["T"] + 1e-12]
        names = variable_names(int(c["N"]))
        summary = {}
        V = self.linear_values()
        for sigma in c["sigmas"]:
            model = self.linear_model(sigma)
            prop = ExactPropagator(model)
            exact = np.array([prop(V, t) for t in times])
            approx = effective_evolution(model, V, times, dt=c["dt"])
            rms = float(np.sqrt(np.mean(V ** 2)))
            tag = _sigma_tag(sigma)
            header = ["t"] + [f"exact_{v}" for v in names] + [f"approx_{v}" for v in names]
            self.csv(f"evolve_sigma{tag}.csv", header, np.column_stack([times, exact, approx]))
            summary[tag] = {
                "initial_rms": rms,
                "max_rel_error_Up1": float(np.abs(exact[:, 0] - approx[:, 0]).max() / rms),
                "deviation_time_Up1": deviation_time(times, approx[:, 0], exact[:, 0], rms,
                                                     c["deviation_threshold"]),
            }
        self.derived["evolution"] = summary

    # lattice example

    def lattice_model(self):
        c = self.config["nonlinear"]
        return LatticeModel(n=int(c["n"]), N=int(c["N"]), sigma=float(c["sigma"]),
                            centers=None if c["centers"] is None else tuple(c["centers"]))

    def profile(self, model):
        path = self.config["nonlinear"]["profile"]
        if path is not None:
            profile = CovarianceProfile.from_json(path)
            if profile.n != model.n:
                raise ConfigError(f"profile {path} has {profile.n} sites, model has {model.n}")
            self.derived["profile_source"] = str(path)
        else:
            chain = ChainConfig(**{k: v for k, v in self.config["chain"].items()},
                                seed=self.seeds["covariance"])
            profile = estimate_covariance(model, chain)
            self.derived["profile_source"] = "estimated"
        self.derived["chain"] = profile.meta
        return profile

    def nonlinear_covariance(self):
        model = self.lattice_model()
        profile = self.profile(model)
        self.csv("covariance.csv", ["r", "c", "stderr"], profile.rows())
        self.files.append("profile.json")
        profile.to_json(self.out / "profile.json")

    def _effective(self, model, profile):
        system = EffectiveSystem(model, gaussianized_prior(profile))
        names = variable_names(model.N)
        self.derived["effective_rhs"] = {f"d{names[r]}/dt": system.labelled_coefficients(r, tol=1e-12)
                                         for r in range(system.dim)}
        if model.N == 2:
            lin, cubic = system.reported_coefficients()
            self.derived["reported_coefficients_Up1"] = {"linear_Vq1_Vq2": lin, "cubic": cubic}
        return system

    def _initial_values(self, model):
        V = self.config["nonlinear"]["V"]
        if V is None:
            V = canonical_values(model, self.seeds["initial_state"], self.config["nonlinear"]["initial_sweeps"])
        V = np.asarray(V, dtype=float)
        self.derived["V"] = V
        return V

    def _effective_trajectory(self, system, V):
        c = self.config["nonlinear"]
        traj = integrate(OdeProblem(system, V, c["T"], c["dt"], int(c["record_every"])))
        return traj.times, traj.states

    def nonlinear_effective(self):
        model = self.lattice_model()
        system = self._effective(model, self.profile(model))
        V = self._initial_values(model)
        times, states = self._effective_trajectory(system, V)
        names = variable_names(model.N)
        self.csv("effective.csv", ["t"] + [f"eff_{v}" for v in names], np.column_stack([times, states]))
        rows = [(f"d{names[r]}/dt", label, value)
                for r in range(system.dim)
                for label, value in system.labelled_coefficients(r, tol=1e-12).items()]
        self.csv("effective_coefficients.csv", ["equation", "monomial", "coefficient"], rows)

    def _ensemble(self, model, prior, V):
        c = self.config["nonlinear"]
        stats = ensemble_oracle(model, V, c["T"], int(c["count"]), c["dt"], self.seeds["ensemble"],
                                record_every=int(c["record_every"]), chain_steps=int(c["constrained_steps"]),
                                block_size=int(c["block_size"]), prior=prior, bins=int(c["bins"]))
        self.derived["ensemble"] = stats.meta
        return stats

    def _histogram(self, stats, index=0):
        rows = []
        edges = stats.hist_edges[index]
        for level, t in enumerate(stats.times):
            dens = stats.density(index, level)
            rows.extend((t, lo, hi, d) for lo, hi, d in zip(edges[:-1], edges[1:], dens))
        self.csv("histogram_Up1.csv", ["t", "bin_lo", "bin_hi", "density"], rows)
        self.derived["histogram_levels"] = len(stats.times)

    def _ensemble_table(self, stats, names):
        header = (["t"] + [f"mean_{v}" for v in names] + [f"stderr_{v}" for v in names]
                  + [f"var_{v}" for v in names])
        self.csv("ensemble.csv", header, np.column_stack([stats.times, stats.mean, stats.stderr, stats.var]))

    def nonlinear_ensemble(self):
        model = self.lattice_model()
        prior = gaussianized_prior(self.profile(model))
        V = self._initial_values(model)
        stats = self._ensemble(model, prior, V)
        self._ensemble_table(stats, variable_names(model.N))
        self._histogram(stats)

    def nonlinear_compare(self):
        model = self.lattice_model()
        profile = self.profile(model)
        system = self._effective(model, profile)
        V = self._initial_values(model)
        stats = self._ensemble(model, gaussianized_prior(profile), V)
        times, eff = self._effective_trajectory(system, V)
        if not np.allclose(times, stats.times, rtol=0.0, atol=1e-12):
            raise OptPredError("ensemble and effective time grids differ")
        names = variable_names(model.N)
        header = ["t"] + [f"mean_{v}" for v in names] + [f"eff_{v}" for v in names]
        self.csv("compare.csv", header, np.column_stack([times, stats.mean, eff]))
        self._ensemble_table(stats, names)
        self._histogram(stats)
        rms = float(np.sqrt(np.mean(V ** 2)))
        bound = np.maximum(3.0 * stats.stderr, 0.03 * rms)
        self.derived["compare"] = {
            "initial_rms": rms,
            "max_abs_deviation": np.abs(eff - stats.mean).max(axis=0),
            "within_bound": bool(np.all(np.abs(eff - stats.mean) <= bound)),
        }

    def spread(self):
        model = self.lattice_model()
        prior = gaussianized_prior(self.profile(model))
        V = self._initial_values(model)
        stats = self._ensemble(model, prior, V)
        self.csv("spread.csv", ["t", "var_Up1"], zip(stats.times, stats.var[:, 0]))
        self._histogram(stats)
        self.derived["spread"] = {"var_Up1_start": stats.var[0, 0], "var_Up1_end": stats.var[-1, 0]}

    def execute(self):
        start = time.perf_counter()
        getattr(self, self.config["experiment"].replace("-", "_"))()
        manifest = {
            "experiment": self.config["experiment"],
            "config": self.config,
            "master_seed": self.config["seed"],
            "sub_seeds": self.seeds,
            "versions": {
                "optpred": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "wall_time_s": time.perf_counter() - start,
            "files": sorted(self.files),
            "derived": self.derived,
        }
        write_json(self.out / "manifest.json", manifest)
        return manifest


def build_parser():
    parser = argparse.ArgumentParser(prog="optpred", description="Run a prediction experiment.")
    parser.add_argument("config", nargs="?", help="JSON config file")
    parser.add_argument("--experiment", choices=EXPERIMENTS)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    return parser


def run(config):
    """Run a validated config; returns the manifest dict."""
    return Run(config).execute()


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.experiment, args.seed, args.out)
    except ConfigError as exc:
        print(f"optpred: config error: {exc}", file=sys.stderr)
        return 2
    try:
        run(config)
    except ConfigError as exc:
        print(f"optpred: config error: {exc}", file=sys.stderr)
        return 2
    except (OptPredError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"optpred: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
