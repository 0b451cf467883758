"""Random-walk Metropolis and MAP reference methods.

Both work on the eight physiological parameters only, with the initial state
pinned to the analytic steady state: that restriction is exactly what the
amortized approach relaxes, so it is kept on purpose. Sampling and
optimization run in a transformed coordinate (log for the log-normal priors,
identity for basal glucose) where every prior is a truncated normal.

The Gaussian likelihood compares the observation against the noiseless
simulated CGM. Posterior values are reported up to the prior truncation
constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import optimize

from .datagen import OBS_LEN, PriorSpec
from .errors import ValidationError
from .physiology import (
    PhysioParams,
    PopulationConstants,
    SensorModel,
    cgm_grid,
    integrate_batch,
    sensor_readings,
    steady_state_batch,
)
from .scenario import Scenario, rasterize

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LikelihoodConfig:
    sigma: float = 2.5  # residual sd, mg/dL

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValidationError("likelihood sigma must be > 0")


@dataclass
class McmcConfig:
    burn_in: int = 10_000
    main_steps: int = 5_000
    proposal_scales: np.ndarray | None = None  # transformed space; default 5% of prior sd
    seed: int = 0
    adapt_burn_in: bool = True
    adapt_interval: int = 200
    target_acceptance: float = 0.3

    def __post_init__(self) -> None:
        if self.burn_in < 0 or self.main_steps < 1:
            raise ValidationError("MCMC step counts must be positive")


@dataclass
class MapConfig:
    restarts: int = 3
    max_iters: int = 400
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.restarts < 1:
            raise ValidationError("MAP needs at least one restart")


class LogPosterior(NamedTuple):
    value: float
    in_support: bool


def _transform(prior: PriorSpec, theta: np.ndarray) -> np.ndarray:
    theta = np.atleast_2d(theta)
    out = np.empty_like(theta)
    for j, p in enumerate(prior.params):
        out[:, j] = p.transform(theta[:, j])
    return out


def _untransform(prior: PriorSpec, eta: np.ndarray) -> np.ndarray:
    eta = np.atleast_2d(eta)
    out = np.empty_like(eta)
    for j, p in enumerate(prior.params):
        out[:, j] = p.untransform(eta[:, j])
    return out


def _prior_logpdf_eta(prior: PriorSpec, eta: np.ndarray) -> np.ndarray:
    """Truncated-normal log prior in the transformed coordinate, normalized up
    to the truncation constant; -inf outside the support box."""
    eta = np.atleast_2d(eta)
    out = np.zeros(eta.shape[0])
    for j, p in enumerate(prior.params):
        out += p.logpdf_transformed(eta[:, j]) - 0.5 * LOG_2PI
    return out


def _eta_bounds(prior: PriorSpec) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([p.bounds_transformed[0] for p in prior.params])
    hi = np.array([p.bounds_transformed[1] for p in prior.params])
    return lo, hi


class PosteriorDensity:
    """Batched log-posterior evaluator over the transformed parameters.

    Holds the rasterized scenario so repeated evaluations (chains, optimizer
    sweeps) do not re-validate inputs. `ys` is one observation per slot; all
    slots are simulated together in one vectorized integration.
    """

    def __init__(self, ys: np.ndarray, prior: PriorSpec, scenario: Scenario,
                 c: PopulationConstants, lik: LikelihoodConfig | None,
                 sensor: SensorModel | None = None):
        self.ys = np.atleast_2d(np.asarray(ys, dtype=float))
        if self.ys.shape[1] != OBS_LEN:
            raise ValidationError(f"observations must have length {OBS_LEN}")
        self.prior = prior
        self.scenario = scenario
        self.c = c
        self.lik = lik
        self.sensor = (sensor or SensorModel()).noiseless()
        self.inputs = rasterize(scenario, 1.0, 60.0, c.BW)
        self.t_obs = cgm_grid(scenario.horizon_min)
        self.eta_lo, self.eta_hi = _eta_bounds(prior)
        self.n_evals = 0

    @property
    def n_slots(self) -> int:
        return self.ys.shape[0]

    def simulate(self, theta: np.ndarray) -> np.ndarray:
        """Noiseless CGM from steady state for each parameter row."""
        theta = np.atleast_2d(theta)
        x0 = steady_state_batch(theta, self.c)
        res = integrate_batch(x0, theta, self.c, self.inputs,
                              self.scenario.horizon_min, capture_every_min=5.0)
        ig = res.captured[:, :OBS_LEN, 8]
        return sensor_readings(ig, self.t_obs, self.sensor, None)

    def log_posterior_eta(self, eta: np.ndarray) -> np.ndarray:
        """One value per slot; eta rows align with observation slots."""
        eta = np.atleast_2d(eta)
        if eta.shape[0] != self.n_slots:
            raise ValidationError("eta rows must match observation slots")
        ok = ((eta >= self.eta_lo) & (eta <= self.eta_hi)).all(axis=1)
        out = np.full(eta.shape[0], -np.inf)
        if not ok.any():
            return out
        lp = _prior_logpdf_eta(self.prior, eta)
        if self.lik is not None:
            theta = _untransform(self.prior, eta)
            # out-of-support rows are simulated too (cheap, keeps batching
            # simple) but their posterior stays -inf
            y_hat = self.simulate(theta)
            self.n_evals += int(ok.sum())
            resid = self.ys - y_hat
            sse = np.where(np.isfinite(y_hat).all(axis=1),
                           (resid ** 2).sum(axis=1), np.inf)
            loglik = -sse / (2.0 * self.lik.sigma ** 2) \
                - OBS_LEN * math.log(self.lik.sigma * math.sqrt(2.0 * math.pi))
            lp = lp + loglik
        out[ok] = lp[ok]
        return out


def log_posterior(theta: PhysioParams, y: np.ndarray, prior: PriorSpec,
                  scenario: Scenario, c: PopulationConstants,
                  lik: LikelihoodConfig) -> LogPosterior:
    """Gaussian log likelihood of `y` against the steady-state simulation of
    `theta`, plus the log prior in the transformed coordinate."""
    arr = theta.as_array()[None, :]
    lo, hi = prior.support_box()
    if np.any(arr[0] < lo) or np.any(arr[0] > hi):
        return LogPosterior(value=-math.inf, in_support=False)
    density = PosteriorDensity(np.asarray(y)[None, :], prior, scenario, c, lik)
    eta = _transform(prior, arr)
    return LogPosterior(value=float(density.log_posterior_eta(eta)[0]), in_support=True)


def _chain_rng(seed: int, chain: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(chain,))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class McmcResult:
    samples: np.ndarray          # (main_steps, 8), natural units
    acceptance_rate: float
    scales: np.ndarray           # proposal scales after burn-in adaptation
    warnings: list = field(default_factory=list)


def _rwmh_core(log_target: Callable[[np.ndarray], np.ndarray], eta0: np.ndarray,
               scales: np.ndarray, burn_in: int, main_steps: int, seed: int,
               adapt: bool, adapt_interval: int, target_acceptance: float,
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lockstep random-walk Metropolis for B independent chains.

    Each chain consumes only its own pre-generated stream, so a chain's path
    is bit-identical whether run alone or inside a batch. Adaptation of the
    proposal scale happens during burn-in only; the main-phase kernel is
    fixed. Returns (chains (B, main, d), acceptance rates, final scales).
    """
    eta = np.atleast_2d(eta0).copy()
    B, d = eta.shape
    total = burn_in + main_steps
    normals = np.empty((B, total, d))
    log_us = np.empty((B, total))
    for b in range(B):
        rng = _chain_rng(seed, b)
        normals[b] = rng.standard_normal((total, d))
        log_us[b] = np.log(rng.random(total))

    scales = np.broadcast_to(np.asarray(scales, dtype=float), (B, d)).copy()
    lp = log_target(eta)
    chains = np.empty((B, main_steps, d))
    accepted_main = np.zeros(B)
    accepted_window = np.zeros(B)

    for k in range(total):
        prop = eta + scales * normals[:, k, :]
        lp_prop = log_target(prop)
        accept = log_us[:, k] < (lp_prop - lp)
        eta[accept] = prop[accept]
        lp[accept] = lp_prop[accept]
        accepted_window += accept

        in_burn = k < burn_in
        if in_burn and adapt and (k + 1) % adapt_interval == 0:
            rate = accepted_window / adapt_interval
            factor = np.clip(np.exp(rate - target_acceptance), 0.7, 1.5)
            scales *= factor[:, None]
            accepted_window[:] = 0.0
        elif not in_burn:
            accepted_main += accept
            chains[:, k - burn_in, :] = eta
        if k == burn_in - 1:
            accepted_window[:] = 0.0

    return chains, accepted_main / main_steps, scales


def rwmh_sample_batch(ys: np.ndarray, prior: PriorSpec, scenario: Scenario,
                      c: PopulationConstants, lik: LikelihoodConfig | None,
                      cfg: McmcConfig) -> list[McmcResult]:
    """Run one chain per observation, stepping all chains in lockstep so the
    expensive simulator runs once per step for the whole batch."""
    density = PosteriorDensity(ys, prior, scenario, c, lik)
    B = density.n_slots
    start = _transform(prior, np.broadcast_to(prior.means(), (B, 8)).copy())
    base_scales = (cfg.proposal_scales if cfg.proposal_scales is not None
                   else 0.05 * np.array([p.scale for p in prior.params]))
    chains, acc, scales = _rwmh_core(
        density.log_posterior_eta, start, base_scales, cfg.burn_in,
        cfg.main_steps, cfg.seed, cfg.adapt_burn_in, cfg.adapt_interval,
        cfg.target_acceptance)
    results = []
    for b in range(B):
        warnings = []
        if not 0.05 <= acc[b] <= 0.7:
            warnings.append(
                f"main-phase acceptance rate {acc[b]:.3f} outside [0.05, 0.7]")
        results.append(McmcResult(
            samples=_untransform(prior, chains[b]),
            acceptance_rate=float(acc[b]),
            scales=scales[b].copy(),
            warnings=warnings))
    return results


def rwmh_sample(y: np.ndarray, prior: PriorSpec, scenario: Scenario,
                c: PopulationConstants, lik: LikelihoodConfig | None,
                cfg: McmcConfig) -> McmcResult:
    """Componentwise Gaussian random-walk Metropolis for one observation."""
    return rwmh_sample_batch(np.asarray(y)[None, :], prior, scenario, c, lik, cfg)[0]


def thin_chain(samples: np.ndarray, n: int) -> np.ndarray:
    """Evenly thin a chain to n rows (deterministic indices)."""
    if samples.shape[0] <= n:
        return samples
    idx = np.linspace(0, samples.shape[0] - 1, n).round().astype(int)
    return samples[idx]


@dataclass
class MapResult:
    theta: PhysioParams
    log_posterior: float
    n_evals: int
    improved: bool
    warnings: list = field(default_factory=list)


def map_estimate(y: np.ndarray, prior: PriorSpec, scenario: Scenario,
                 c: PopulationConstants, lik: LikelihoodConfig, cfg: MapConfig,
                 starts: Sequence[np.ndarray] | None = None) -> MapResult:
    """Multi-start simplex search for the posterior mode (transformed space).

    Start points: the prior location, then prior draws. If no restart improves
    on the best start, the best start is returned with a warning.
    """
    density = PosteriorDensity(np.asarray(y)[None, :], prior, scenario, c, lik)
    lo, hi = _eta_bounds(prior)

    def objective(eta_row: np.ndarray) -> float:
        eta = np.clip(eta_row, lo, hi)[None, :]
        val = density.log_posterior_eta(eta)[0]
        penalty = 1e6 * float(np.abs(eta_row - eta[0]).sum())
        return -val + penalty

    if starts is None:
        start_list = [_transform(prior, prior.means()[None, :])[0]]
        rng = np.random.default_rng(cfg.seed)
        for _ in range(cfg.restarts - 1):
            draw = np.array([p.sample(rng) for p in prior.params])
            start_list.append(_transform(prior, draw[None, :])[0])
    else:
        start_list = [np.asarray(s, dtype=float) for s in starts]

    best_start_val = min(objective(s) for s in start_list)
    best_val = math.inf
    best_eta = start_list[0]
    for s in start_list:
        res = optimize.minimize(objective, s, method="Nelder-Mead",
                                options={"maxiter": cfg.max_iters,
                                         "xatol": cfg.tol, "fatol": cfg.tol})
        if res.fun < best_val:
            best_val = res.fun
            best_eta = res.x
    improved = best_val < best_start_val
    warnings = []
    if not improved:
        best_val = best_start_val
        best_eta = min(start_list, key=objective)
        warnings.append("no restart improved on its start point")
    theta = PhysioParams.from_array(_untransform(prior, np.clip(best_eta, lo, hi)[None, :])[0])
    return MapResult(theta=theta, log_posterior=-best_val, n_evals=density.n_evals,
                     improved=improved, warnings=warnings)
